"""Lattice vector fields on C^n and checks of their structural hypotheses.

Modes are stored 0-based in arrays. Public helpers that take a mode or chart
index (``j``, ``k``) use 1-based numbering, matching the usual lattice labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

HAMILTONIAN = "Hamiltonian"
NON_HAMILTONIAN = "NonHamiltonian"

HERMITIAN_TOL = 1e-12


class InvalidStateError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LatticeModel:
    """Interaction matrix ``A`` plus optional non-Hamiltonian coupling ``C``.

    ``extra`` is an optional additional field term ``b -> db`` (vectorised over
    leading axes). It carries the perturbed-quartic family or, in tests, a
    deliberately broken coupling.
    """

    A: np.ndarray
    C: Optional[np.ndarray] = None
    rho: float = 0.0
    kind: str = HAMILTONIAN
    extra: Optional[Callable[[np.ndarray], np.ndarray]] = field(default=None, compare=False)
    name: str = "custom"

    def __post_init__(self):
        A = np.array(self.A, dtype=complex)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError("A must be square")
        if A.shape[0] < 3:
            raise ConfigError("need at least 3 modes")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)
        if self.C is not None:
            C = np.array(self.C, dtype=float)
            if C.shape != A.shape:
                raise ConfigError("C must have the same shape as A")
            C.setflags(write=False)
            object.__setattr__(self, "C", C)
        if self.kind not in (HAMILTONIAN, NON_HAMILTONIAN):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.rho < 0:
            raise ConfigError("rho must be nonnegative")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def dissipative(self) -> bool:
        return self.kind == NON_HAMILTONIAN and self.C is not None and self.rho != 0.0


def ck_matrix(n: int) -> np.ndarray:
    """Tridiagonal matrix with 1 on the diagonal and -2 on both neighbours."""
    A = np.eye(n, dtype=complex)
    idx = np.arange(n - 1)
    A[idx, idx + 1] = -2.0
    A[idx + 1, idx] = -2.0
    return A


def ck_model(n: int) -> LatticeModel:
    return LatticeModel(ck_matrix(n), name=f"ck{n}")


def example_coupling(n: int) -> np.ndarray:
    """Coupling with C[j,j] = C[j,j+1] = (-1)^j and C[j+1,j] = 2 (1-based j)."""
    C = np.zeros((n, n))
    for j in range(1, n + 1):
        s = (-1.0) ** j
        C[j - 1, j - 1] = s
        if j < n:
            C[j - 1, j] = s
            C[j, j - 1] = 2.0
    return C


def nonhamiltonian_example(n: int, rho: float = 0.03) -> LatticeModel:
    return LatticeModel(ck_matrix(n), example_coupling(n), rho, NON_HAMILTONIAN, name=f"nh{n}")


def with_extra(model: LatticeModel, extra, name=None) -> LatticeModel:
    return LatticeModel(model.A, model.C, model.rho, model.kind, extra, name or model.name + "+extra")


def odd_coupling(eps: float = 1.0):
    """Term eps * b_{l-1} b_{l+1} conj(b_l).

    Phase equivariant and hyperplane preserving, but odd under flipping the
    sign of a neighbour, so it breaks the block structure along heteroclinics.
    """

    def term(b):
        out = np.zeros_like(b)
        out[..., 1:-1] = eps * b[..., :-2] * b[..., 2:] * np.conj(b[..., 1:-1])
        return out

    return term


def _check_state(b) -> np.ndarray:
    b = np.asarray(b, dtype=complex)
    if not np.all(np.isfinite(b)):
        raise InvalidStateError("state has non-finite entries")
    return b


def mass(b) -> np.ndarray:
    return np.sum(np.abs(b) ** 2, axis=-1)


def energy(model: LatticeModel, b) -> np.ndarray:
    """H = 1/4 sum conj(b_l)^2 a_lm b_m^2 (real part; exact for Hermitian A)."""
    b2 = np.asarray(b, dtype=complex) ** 2
    return 0.25 * np.real(np.sum(np.conj(b2) * (b2 @ model.A.T), axis=-1))


def dissipation_R(model: LatticeModel, b) -> np.ndarray:
    if model.C is None:
        return np.zeros(np.shape(b)[:-1])
    p = np.abs(b) ** 2
    return -np.sum(p * (p @ model.C), axis=-1)


def eval_field(model: LatticeModel, b, check=True) -> np.ndarray:
    """Vector field at ``b``; works on arrays of states with modes on the last axis."""
    b = _check_state(b) if check else b
    b2 = b * b
    out = -1j * (b2 @ model.A.T) * np.conj(b)
    if model.dissipative:
        p = (b * np.conj(b)).real
        pc = p @ model.C
        R = -np.sum(p * pc, axis=-1)
        out = out + model.rho * (pc + R[..., None]) * b
    if model.extra is not None:
        out = out + model.extra(b)
    return out


def mass_derivative(model: LatticeModel, b) -> float:
    """Analytic mass rate 2 rho R (M - 1); zero for Hamiltonian models."""
    if not model.dissipative:
        out = np.zeros(np.shape(b)[:-1])
    else:
        out = 2.0 * model.rho * dissipation_R(model, b) * (mass(b) - 1.0)
    return float(out) if np.ndim(out) == 0 else out


def mass_rate_from_field(model: LatticeModel, b):
    return 2.0 * np.real(np.sum(np.conj(b) * eval_field(model, b), axis=-1))


def random_sphere_states(n: int, count: int, rng) -> np.ndarray:
    z = rng.normal(size=(count, n)) + 1j * rng.normal(size=(count, n))
    return z / np.sqrt(mass(z))[:, None]


def is_hermitian(A, tol=HERMITIAN_TOL) -> bool:
    return float(np.max(np.abs(A - A.conj().T))) <= tol


def dominance_holds(A) -> bool:
    n = A.shape[0]
    d = np.abs(np.diag(A))
    for l in range(n):
        for m in range(n):
            if abs(l - m) == 1:
                if not d[l] < abs(A[l, m]):
                    return False
            elif abs(l - m) >= 2:
                if not abs(A[l, m]) < d[l]:
                    return False
    return True


def constant_diagonals(A, tol=1e-12) -> bool:
    d = np.diag(A)
    sub = np.diag(A, -1)
    return bool(np.all(np.abs(d - d[0]) <= tol) and np.all(np.abs(sub - sub[0]) <= tol))


@dataclass
class HypothesisReport:
    violations: dict
    flags: dict
    tol: float

    @property
    def failures(self) -> list:
        bad = [k for k, v in self.violations.items() if not v < self.tol]
        bad += [k for k, ok in self.flags.items() if k != "constant_diagonals" and not ok]
        return bad

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {"violations": self.violations, "flags": self.flags, "tol": self.tol,
                "failures": self.failures, "passed": self.passed}


def check_hypotheses(model: LatticeModel, sample_count: int = 100, seed: int = 0,
                     tol: float = 1e-10) -> HypothesisReport:
    """Sample-based check of phase/sign symmetry, hyperplane and sphere invariance.

    Violations are relative to |b|^3, the homogeneity of the cubic field.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be positive")
    rng = np.random.default_rng(seed)
    n = model.n
    b = random_sphere_states(n, sample_count, rng) * rng.uniform(0.5, 1.5, size=(sample_count, 1))
    scale = np.sqrt(mass(b)) ** 3
    f = eval_field(model, b)

    theta = rng.uniform(0, 2 * np.pi, size=(sample_count, 1))
    rot = np.exp(1j * theta)
    phase = np.max(np.abs(eval_field(model, rot * b) - rot * f).max(axis=1) / scale)

    hyper = 0.0
    for k in range(n):
        bk = b.copy()
        bk[:, k] = 0.0
        hyper = max(hyper, float(np.max(np.abs(eval_field(model, bk)[:, k]) / scale)))

    s = rng.choice([-1.0, 1.0], size=(sample_count, n))
    s[0] = 1.0
    s[0, 0] = -1.0
    sign = np.max(np.abs(eval_field(model, s * b) - s * f).max(axis=1) / scale)

    bs = b / np.sqrt(mass(b))[:, None]
    sphere = float(np.max(np.abs(mass_rate_from_field(model, bs))))
    cross = float(np.max(np.abs(mass_rate_from_field(model, b) - mass_derivative(model, b))
                         / np.maximum(1.0, np.abs(mass_rate_from_field(model, b)))))

    violations = {"phase": float(phase), "hyperplane": float(hyper), "sign": float(sign),
                  "sphere": sphere, "mass_rate": cross}
    flags = {"hermitian": is_hermitian(model.A), "dominance": dominance_holds(model.A),
             "constant_diagonals": constant_diagonals(model.A)}
    return HypothesisReport(violations, flags, tol)


def _parse_matrix(rows, n, name, complex_entries):
    try:
        M = np.zeros((n, n), dtype=complex if complex_entries else float)
        if len(rows) != n:
            raise ConfigError(f"{name} must have {n} rows")
        for i, row in enumerate(rows):
            if len(row) != n:
                raise ConfigError(f"{name} row {i} must have {n} entries")
            for k, entry in enumerate(row):
                if complex_entries:
                    if isinstance(entry, str):
                        re, im = (float(t) for t in entry.split(","))
                    elif isinstance(entry, (list, tuple)):
                        re, im = float(entry[0]), float(entry[1])
                    else:
                        re, im = float(entry), 0.0
                    M[i, k] = re + 1j * im
                else:
                    M[i, k] = float(entry)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"bad {name} entry: {exc}") from exc
    return M


def model_from_dict(cfg: dict) -> LatticeModel:
    """Build a model from a config mapping.

    Either ``preset`` ("ck" or "nh-example") with ``n``, or an explicit ``A``
    given row-major as "re,im" strings or [re, im] pairs.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("model config must be a mapping")
    preset = cfg.get("preset")
    if preset is not None:
        n = int(cfg.get("n", 3))
        if preset == "ck":
            return ck_model(n)
        if preset in ("nh-example", "nh"):
            return nonhamiltonian_example(n, float(cfg.get("rho", 0.03)))
        raise ConfigError(f"unknown preset {preset!r}")
    if "A" not in cfg:
        raise ConfigError("config needs 'A' or 'preset'")
    n = int(cfg.get("n", len(cfg["A"])))
    A = _parse_matrix(cfg["A"], n, "A", True)
    C = _parse_matrix(cfg["C"], n, "C", False) if cfg.get("C") is not None else None
    kind = cfg.get("kind", NON_HAMILTONIAN if C is not None else HAMILTONIAN)
    return LatticeModel(A, C, float(cfg.get("rho", 0.0)), kind, name=cfg.get("name", "custom"))


def load_model(path) -> LatticeModel:
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return model_from_dict(cfg)


def model_to_dict(model: LatticeModel) -> dict:
    d = {"n": model.n, "kind": model.kind, "rho": model.rho, "name": model.name,
         "A": [[f"{float(z.real)!r},{float(z.imag)!r}" for z in row] for row in model.A]}
    if model.C is not None:
        d["C"] = model.C.tolist()
    return d
