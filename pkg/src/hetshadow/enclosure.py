"""Resonant monomial calculus and numerical checks of saddle-passage enclosures.

Saddle variables are ordered ``(x-, y-, x+, y+)`` with unit rates
``+1, -1, +1, -1``. A synthetic normal-form state is the real vector
``(x-, y-, x+, y+, Re c_1, Im c_1, ..., Re c_m, Im c_m)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .integrate import integrate

SADDLE_VARS = ("x-", "y-", "x+", "y+")
RATE = {"x-": 1, "y-": -1, "x+": 1, "y+": -1}
# exponent of T-independent decay that the tube for each variable carries
TUBE_EXPONENT = {"x-": 2, "y-": 0, "x+": 1, "y+": 1}

VERY_SUITABLE = "VerySuitable"
POTENTIALLY_SUITABLE = "PotentiallySuitable"
UNSUITABLE = "Unsuitable"

BOUND_SLACK = 1 + 1e-6
DRIFT_FLOOR = 1e-8     # log-drift of |c|^2 attributable to integration error


class ResonanceError(ValueError):
    pass


class DegenerateForcingError(ValueError):
    pass


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class MonomialIndex:
    m_xm: int = 0
    m_ym: int = 0
    m_xp: int = 0
    m_yp: int = 0
    m_c: int = 0

    def __post_init__(self):
        if min(self.saddle + (self.m_c,)) < 0:
            raise ValueError("exponents must be nonnegative")

    @property
    def saddle(self) -> tuple:
        return (self.m_xm, self.m_ym, self.m_xp, self.m_yp)

    @property
    def m_s(self) -> int:
        return sum(self.saddle)

    @property
    def degree(self) -> int:
        return self.m_s + self.m_c

    @property
    def in_m1(self) -> bool:
        return self.m_s >= 3 and self.m_c == 0

    @property
    def in_m2(self) -> bool:
        return self.m_s == 1 and self.m_c >= 3

    def label(self) -> str:
        parts = []
        for name, e in zip(SADDLE_VARS + ("c",), self.saddle + (self.m_c,)):
            if e == 1:
                parts.append(name)
            elif e > 1:
                parts.append(f"{name}^{e}")
        return "*".join(parts) if parts else "1"

    def evaluate(self, z):
        """Saddle part of z^m on the first four entries of the last axis."""
        z = np.asarray(z)
        out = np.ones(z.shape[:-1])
        for i, e in enumerate(self.saddle):
            if e:
                out = out * z[..., i] ** e
        return out


@dataclass(frozen=True)
class WTubeParams:
    T: float
    sigma: float
    K: float = 1.0
    k: int = 1
    k_c: int = 0
    q_yplus: float = 1.0
    A: float = 3.0

    def __post_init__(self):
        if self.T < 1 or self.sigma <= 0 or self.K <= 0:
            raise ValueError("need T >= 1, sigma > 0, K > 0")
        if self.q_yplus < 1:
            raise ValueError("q_yplus must be >= 1")


def monomial_constants(m: MonomialIndex, k: int = 1, k_c: int = 0):
    """(lambda_m, kappa_m, theta_m, s_m) of a monomial."""
    lam = m.m_xm - m.m_ym + m.m_xp - m.m_yp
    kappa = m.m_c + 2 * m.m_xm + m.m_xp + m.m_yp
    theta = m.m_xp + m.m_ym + m.m_yp
    s = k * m.m_xm + m.m_yp + k_c * m.m_c
    return lam, kappa, theta, s


def is_resonant(m: MonomialIndex, v: str) -> bool:
    return monomial_constants(m)[0] == RATE[_var(v)]


def _var(v: str) -> str:
    if v not in RATE:
        raise ValueError(f"unknown saddle variable {v!r}")
    return v


def decay_exponent(v: str, m: MonomialIndex) -> int:
    """Exponent a(v, m) of e^{-T} carried by z^m inside the variation-of-constants integral."""
    lam, kappa, _, _ = monomial_constants(m)
    lv = RATE[_var(v)]
    return kappa - lam + lv if lam > lv else kappa


def suitability(v: str, m: MonomialIndex, params: Optional[WTubeParams] = None) -> str:
    if not is_resonant(m, v):
        raise ResonanceError(f"{m.label()} is not resonant for {v}")
    a = decay_exponent(v, m)
    d = TUBE_EXPONENT[v]
    if a > d:
        return VERY_SUITABLE
    if a == d:
        return POTENTIALLY_SUITABLE
    return UNSUITABLE


def resonant_monomials(v: str, max_degree: int):
    """All resonant monomials of class M1 or M2 for ``v`` with total degree <= max_degree."""
    out = []
    for deg in range(1, max_degree + 1):
        for mc in range(0, deg + 1):
            ms = deg - mc
            for e in _compositions(ms, 4):
                m = MonomialIndex(*e, mc)
                if (m.in_m1 or m.in_m2) and is_resonant(m, v):
                    out.append(m)
    return out


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for first in range(total, -1, -1):
        for rest in _compositions(total - first, parts - 1):
            yield (first,) + rest


@dataclass
class ClassTable:
    rows: list          # (v, label, MonomialIndex, class name, verdict)
    max_degree: int

    def count(self, verdict, v=None):
        return sum(1 for r in self.rows if r[4] == verdict and (v is None or r[0] == v))

    def potentially_suitable(self, cls="M1"):
        return sorted((r[0], r[1]) for r in self.rows if r[4] == POTENTIALLY_SUITABLE and r[3] == cls)

    def to_dict(self):
        return {"max_degree": self.max_degree,
                "rows": [{"v": v, "monomial": lab, "exponents": list(m.saddle) + [m.m_c],
                          "class": cls, "verdict": ver} for v, lab, m, cls, ver in self.rows]}


MAX_CLASSIFY_DEGREE = 9


def enumerate_and_classify(max_degree: int, v=None, params: Optional[WTubeParams] = None) -> ClassTable:
    """Classify every resonant M1/M2 monomial up to ``max_degree`` (one or all variables)."""
    if max_degree > MAX_CLASSIFY_DEGREE:
        raise ValueError(f"max_degree is capped at {MAX_CLASSIFY_DEGREE}")
    names = SADDLE_VARS if v is None else (_var(v),)
    rows = []
    for name in names:
        for m in resonant_monomials(name, max_degree):
            rows.append((name, m.label(), m, "M1" if m.in_m1 else "M2", suitability(name, m, params)))
    return ClassTable(rows, max_degree)


def enclosure_bound(lam: float, D: float, forcing_terms: Sequence = (), T: float = 1.0) -> float:
    """Coefficient c(T) with E_y(t) = t e^{lam t} c(T)."""
    if D < 0:
        raise ValueError("D must be nonnegative")
    c = D
    for lam_i, D_i in forcing_terms:
        if D_i < 0:
            raise ValueError("forcing amplitudes must be nonnegative")
        if lam_i == lam:
            raise DegenerateForcingError("forcing rate equals the linear rate")
        c += D_i if lam_i < lam else D_i * math.exp((lam_i - lam) * T)
    return c


@dataclass
class OdeEnclosureReport:
    passed: bool
    worst_ratio: float          # max |y - e^{lam t} y0| / E_y(t) over samples
    samples: int

    def to_dict(self):
        return asdict(self)


def verify_ode_enclosure(lam, D, forcing_terms, T, sample_ics, mode="plus", seed=0,
                         n_times=200) -> OdeEnclosureReport:
    """Integrate y' = lam y + forcing and compare with the enclosure.

    ``mode`` selects the forcing: "plus" (all terms at +amplitude), "zero", or
    "random" (each term multiplied by a random smooth signal with values in [-1, 1]).
    """
    c = enclosure_bound(lam, D, forcing_terms, T)
    rates = np.array([lam] + [li for li, _ in forcing_terms], dtype=float)
    amps = np.array([D] + [di for _, di in forcing_terms], dtype=float)
    rng = np.random.default_rng(seed)
    y0 = np.asarray(sample_ics, dtype=float)
    nb = y0.size
    if mode == "zero":
        amps = np.zeros_like(amps)
    freq = rng.uniform(0.5, 5.0, size=(nb, len(rates)))
    phase = rng.uniform(0, 2 * np.pi, size=(nb, len(rates)))

    def signal(t):
        if mode == "random":
            return np.cos(freq * t + phase)
        return np.ones((nb, len(rates)))

    # augmented state (t, y) keeps the field autonomous
    def field(w):
        t = w[..., 0]
        y = w[..., 1]
        f = np.sum(amps * signal(t[0]) * np.exp(rates * t[0]), axis=-1)
        out = np.empty_like(w)
        out[..., 0] = 1.0
        out[..., 1] = lam * y + f
        return out

    w0 = np.stack([np.zeros(nb), y0.ravel()], axis=-1)
    traj = integrate(field, w0, (0.0, T), rtol=1e-11, atol=1e-14, dense=True, bound=None)
    worst = 0.0
    for t in np.linspace(0, T, n_times)[1:]:
        y = traj(t)[:, 1]
        dev = np.abs(y - math.exp(lam * t) * y0.ravel())
        E = t * math.exp(lam * t) * c
        if E > 0:
            worst = max(worst, float(np.max(dev)) / E)
        elif np.max(dev) > 1e-12:
            worst = math.inf
    return OdeEnclosureReport(bool(worst <= BOUND_SLACK), float(worst), int(nb))


@dataclass
class SyntheticSystem:
    """Unit-rate saddle pair times rotating centers with resonant perturbations."""

    terms: list                  # (v, MonomialIndex, coefficient: float or callable)
    nu: np.ndarray
    rho: float
    coupling: np.ndarray         # (n_centers, 4) complex weights: g_l(z) = coupling[l] . z_saddle
    center_term: Optional[Callable] = None

    @property
    def n_centers(self):
        return len(self.nu)

    @property
    def dim(self):
        return 4 + 2 * self.n_centers

    def with_rho(self, rho):
        return SyntheticSystem(self.terms, self.nu, rho, self.coupling, self.center_term)

    def center_factor(self, w, m_c):
        # smooth scalar of degree m_c in the center variables
        if m_c == 0 or self.n_centers == 0:
            return 1.0
        return w[..., 4] ** m_c

    def g(self, w):
        if self.center_term is not None:
            return self.center_term(w)
        return w[..., :4] @ self.coupling.T

    def coefficient(self, coef, w):
        return coef(w) if callable(coef) else coef

    def __call__(self, w):
        w = np.asarray(w, dtype=float)
        out = np.empty_like(w)
        z = w[..., :4]
        out[..., 0] = z[..., 0]
        out[..., 1] = -z[..., 1]
        out[..., 2] = z[..., 2]
        out[..., 3] = -z[..., 3]
        if self.rho:
            for v, m, coef in self.terms:
                i = SADDLE_VARS.index(v)
                out[..., i] += self.rho * self.coefficient(coef, w) * m.evaluate(z) \
                    * self.center_factor(w, m.m_c)
        if self.n_centers:
            c = w[..., 4::2] + 1j * w[..., 5::2]
            rate = self.nu + self.rho * self.g(w)
            dc = 1j * c * rate
            out[..., 4::2] = dc.real
            out[..., 5::2] = dc.imag
        return out


def build_synthetic_nf_system(spec, nu=(), rho=1.0, coupling=None, center_term=None) -> SyntheticSystem:
    """Synthetic normal-form field from (v, MonomialIndex, coefficient) triples.

    Center modes rotate as c' = i c (nu + rho g(z)); by default g(z) = i x+
    for every center, which makes the modulus drift.
    """
    terms = []
    for v, m, coef in spec:
        _var(v)
        if not isinstance(m, MonomialIndex):
            m = MonomialIndex(*m)
        if not (m.in_m1 or m.in_m2):
            raise SpecError(f"{m.label()} is neither in M1 nor in M2")
        if not is_resonant(m, v):
            raise SpecError(f"{m.label()} is not resonant for {v}")
        terms.append((v, m, coef))
    nu = np.asarray(nu, dtype=float)
    if coupling is None:
        coupling = np.zeros((len(nu), 4), dtype=complex)
        coupling[:, 2] = 1j
    coupling = np.asarray(coupling, dtype=complex).reshape(len(nu), 4)
    return SyntheticSystem(terms, nu, float(rho), coupling, center_term)


def all_resonant_cubics(seed=0, signs=None):
    """Every resonant cubic for every saddle variable with coefficient +-1."""
    rng = np.random.default_rng(seed)
    spec = []
    for v in SADDLE_VARS:
        for m in resonant_monomials(v, 3):
            if m.degree == 3:
                s = float(rng.choice([-1.0, 1.0])) if signs is None else signs
                spec.append((v, m, s))
    return spec


def sample_ics(params: WTubeParams, count, n_centers=0, seed=0):
    """Initial conditions a0, eta, d0 (and center amplitudes u) placed at the edges of the tubes."""
    rng = np.random.default_rng(seed)
    T, s = params.T, params.sigma
    a0 = rng.uniform(-0.5, 0.5, count) * T ** params.k
    eta = rng.uniform(-1.5, 1.5, count) * s
    d0 = rng.uniform(-1.5, 1.5, count) * s
    u = rng.uniform(0.1, 1.0, (count, n_centers)) * T ** params.k_c \
        * np.exp(1j * rng.uniform(0, 2 * np.pi, (count, n_centers)))
    return {"a0": a0, "eta": eta, "d0": d0, "u": u}


def _initial_state(params, ics):
    T = params.T
    nb = len(ics["a0"])
    u = np.asarray(ics.get("u", np.zeros((nb, 0))))
    w = np.zeros((nb, 4 + 2 * u.shape[1]))
    w[:, 0] = ics["a0"] * math.exp(-2 * T)
    w[:, 1] = ics["eta"]
    w[:, 2] = ics["d0"] * math.exp(-T)
    w[:, 3] = 0.0
    w[:, 4::2] = (u * math.exp(-T)).real
    w[:, 5::2] = (u * math.exp(-T)).imag
    return w


def _scale(params, dim):
    T = params.T
    s = np.full(dim, math.exp(-T))
    s[0] = math.exp(-2 * T)
    s[1] = 1.0
    return s


def estimate_K(system: SyntheticSystem, params: WTubeParams, samples=1000, seed=0) -> float:
    """1.1 times the largest |coefficient| seen over random points of the tubes."""
    rng = np.random.default_rng(seed)
    T, s = params.T, params.sigma
    t = rng.uniform(0, T, samples)
    w = np.zeros((samples, system.dim))
    w[:, 0] = math.exp(-2 * T) * np.exp(t) * rng.uniform(-1, 1, samples) * T ** params.k
    w[:, 1] = np.exp(-t) * rng.uniform(-2, 2, samples) * s
    w[:, 2] = math.exp(-T) * np.exp(t) * rng.uniform(-2, 2, samples) * s
    w[:, 3] = math.exp(-T) * np.exp(-t) * rng.uniform(-1, 1, samples) * T * s
    if system.n_centers:
        w[:, 4:] = rng.uniform(-1, 1, (samples, system.dim - 4)) * T ** params.k_c * math.exp(-T)
    best = 0.0
    for _, _, coef in system.terms:
        val = np.abs(coef(w)) if callable(coef) else abs(coef)
        best = max(best, float(np.max(val)))
    return 1.1 * best if best > 0 else 1.0


@dataclass
class TubeReport:
    passed: bool
    margins: dict               # per tube: worst slack in coefficient units
    relative: dict              # per tube: worst slack / half-width
    witness: Optional[dict]
    K: float
    count: int

    def to_dict(self):
        return asdict(self)


def verify_tube_enclosure(system: SyntheticSystem, params: WTubeParams, ics=None, rho_grid=(0.0, 0.5, 1.0),
                       count=20, seed=0, n_times=300, z_radius=0.5, rtol=1e-10) -> TubeReport:
    """Integrate over [0, T] and check the four saddle tubes (and |z| <= z_radius)."""
    if ics is None:
        ics = sample_ics(params, count, system.n_centers, seed)
    T, s, A = params.T, params.sigma, params.A
    K = params.K
    w0 = _initial_state(params, ics)
    scale = _scale(params, system.dim)
    a0, eta, d0 = ics["a0"], ics["eta"], ics["d0"]
    margins = {name: math.inf for name in SADDLE_VARS}
    relative = dict(margins)
    margins["Z"] = math.inf
    witness = None
    times = np.linspace(0, T, n_times)
    for rho in rho_grid:
        f = system.with_rho(rho)
        traj = integrate(f, w0, (0.0, T), rtol=rtol, atol=1e-12, dense=True, bound=None, scale=scale)
        for t in times:
            w = traj(t)
            coeff = {
                "x-": (w[:, 0] * math.exp(2 * T - t) - a0, T ** params.k / A),
                "y-": (w[:, 1] * math.exp(t) - eta, s * K / A),
                "x+": (w[:, 2] * math.exp(T - t) - d0, s / A),
                "y+": (w[:, 3] * math.exp(T + t), K * s * t / A),
            }
            for name, (dev, half) in coeff.items():
                slack = half - np.abs(dev)
                i = int(np.argmin(slack))
                margins[name] = min(margins[name], float(slack[i]))
                if half > 0:
                    relative[name] = min(relative[name], float(slack[i] / half))
                if slack[i] < -1e-12 * max(1.0, half) and witness is None:
                    witness = {"t": float(t), "rho": float(rho), "tube": name,
                               "state": w[i].tolist()}
            zn = z_radius - np.max(np.abs(w), axis=-1)
            margins["Z"] = min(margins["Z"], float(np.min(zn)))
            if np.min(zn) < 0 and witness is None:
                witness = {"t": float(t), "rho": float(rho), "tube": "Z",
                           "state": w[int(np.argmin(zn))].tolist()}
    return TubeReport(witness is None, margins, relative, witness, K, len(a0) * len(rho_grid))


def estimate_G(system: SyntheticSystem, params: WTubeParams, samples=1000, seed=1) -> float:
    """1.1 times the largest sampled |g_l(z)| / |z| over the tube region (sum norm)."""
    if system.n_centers == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    T, s = params.T, params.sigma
    t = rng.uniform(0, T, samples)
    w = np.zeros((samples, system.dim))
    w[:, 0] = math.exp(-2 * T) * np.exp(t) * rng.uniform(-1, 1, samples) * T ** (params.k + 1)
    w[:, 1] = np.exp(-t) * rng.uniform(-2, 2, samples) * s
    w[:, 2] = math.exp(-T) * np.exp(t) * rng.uniform(-2, 2, samples) * s
    w[:, 3] = math.exp(-T) * np.exp(-t) * rng.uniform(-1, 1, samples) * T ** (params.k + 1)
    w[:, 4:] = rng.uniform(-1, 1, (samples, system.dim - 4)) * T ** params.k_c * math.exp(-T)
    c = w[:, 4::2] + 1j * w[:, 5::2]
    norm = np.sum(np.abs(w[:, :4]), axis=-1) + np.sum(np.abs(c), axis=-1)
    g = np.abs(system.g(w))
    ratio = np.max(g, axis=-1) / np.where(norm > 0, norm, 1.0)
    G = 1.1 * float(np.max(ratio))
    return G if G > 0 else 1e-12


@dataclass
class CenterReport:
    passed: bool
    G: float
    band: float                 # log-width 10 G sigma of the allowed band for |c|^2
    worst_log_drift: float      # max |log(|c(t)|^2 / |c(0)|^2)|
    count: int

    def to_dict(self):
        return asdict(self)


def verify_center_modulus(system: SyntheticSystem, params: WTubeParams, ics=None, rho_grid=(0.0, 0.5, 1.0),
                          count=20, seed=0, n_times=300, G=None, rtol=1e-10) -> CenterReport:
    if system.n_centers == 0:
        return CenterReport(True, 0.0, 0.0, 0.0, 0)
    if ics is None:
        ics = sample_ics(params, count, system.n_centers, seed)
    if G is None:
        G = estimate_G(system, params)
    band = 10 * G * params.sigma
    w0 = _initial_state(params, ics)
    scale = _scale(params, system.dim)
    c0 = np.abs(w0[:, 4::2] + 1j * w0[:, 5::2]) ** 2
    worst = 0.0
    for rho in rho_grid:
        traj = integrate(system.with_rho(rho), w0, (0.0, params.T), rtol=rtol, atol=1e-12,
                         dense=True, bound=None, scale=scale)
        for t in np.linspace(0, params.T, n_times):
            w = traj(t)
            ct = np.abs(w[:, 4::2] + 1j * w[:, 5::2]) ** 2
            ok = c0 > 0
            drift = np.abs(np.log(ct[ok] / c0[ok]))
            if drift.size:
                worst = max(worst, float(np.max(drift)))
    return CenterReport(bool(worst < max(band, DRIFT_FLOOR)), G, band, worst, len(w0) * len(rho_grid))


def write_json(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, default=_json_default)
    os.replace(tmp, path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    raise TypeError(f"cannot serialise {type(o).__name__}")
