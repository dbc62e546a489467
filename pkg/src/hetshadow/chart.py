"""Chart coordinates around the invariant circles T_j and the maps between them.

In chart ``j`` (1-based) the phase of mode ``j`` is quotiented out and its
radius recovered from the unit mass. Every other mode is one complex number
``c_k``; the two neighbours are written in saddle form ``c = w x + conj(w) y``
so that the linearisation reads ``x' = lam x``, ``y' = -lam y``.

A chart point is stored as a real vector with two slots per mode ``k != j`` in
increasing ``k`` order: ``(x, y)`` for the neighbours, ``(Re c, Im c)``
otherwise.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .model import LatticeModel, eval_field, mass

SADDLE = "Saddle"
CENTER = "Center"

DEGENERATE_TOL = 1e-12
FD_STEP = 1e-5
TOL_BLOCK = 1e-6


class DegenerateSpectrumError(ValueError):
    pass


class ClassificationError(ValueError):
    pass


class ChartSingularityError(ValueError):
    pass


class OffSphereError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NoStraightLineError(ValueError):
    pass


class TransitionSingularityError(ValueError):
    pass


@dataclass(frozen=True)
class QuadParams:
    alpha: float
    a: complex
    lambda_or_nu: float
    kind: str


def quad_params(model: LatticeModel, j: int, k: int):
    """(alpha, a) of the quadratic part of the reduced two-mode Hamiltonian."""
    if j == k:
        raise ValueError("need two distinct modes")
    A = model.A
    alpha = float(np.real(A[k - 1, k - 1] + A[j - 1, j - 1]) / 2)
    return alpha, complex(A[k - 1, j - 1])


def quad_constant(model: LatticeModel, j: int, k: int) -> float:
    A = model.A
    return float(np.real(A[k - 1, k - 1] - A[j - 1, j - 1]) / 4)


def classify_pair(alpha: float, a: complex) -> QuadParams:
    gap = abs(a) ** 2 - alpha ** 2
    if abs(gap) <= DEGENERATE_TOL:
        raise DegenerateSpectrumError(f"|a|^2 = alpha^2 for alpha={alpha}, a={a}")
    if gap > 0:
        return QuadParams(alpha, a, math.sqrt(gap), SADDLE)
    return QuadParams(alpha, a, math.sqrt(-gap), CENTER)


def _principal_sqrt(w2: complex) -> complex:
    w = cmath.sqrt(w2)
    if w.real < 0 or (w.real == 0 and w.imag < 0):
        w = -w
    return w


def conformal_omega(alpha: float, a: complex) -> complex:
    """Unit root of w^2 = i conj(a) / (lam + i alpha).

    With ``c = w x + conj(w) y`` it turns c' = -i(alpha c - conj(a) conj(c))
    into x' = lam x, y' = -lam y.
    """
    q = classify_pair(alpha, a)
    if q.kind != SADDLE:
        raise ClassificationError("conformal change needs a saddle pair")
    w = _principal_sqrt(1j * np.conj(a) / (q.lambda_or_nu + 1j * alpha))
    return w / abs(w)


def a_one(omega: complex) -> float:
    return -2.0 * (omega * omega).real


def modulus_sq(omega: complex, x, y):
    """|w x + conj(w) y|^2 = x^2 - a1 x y + y^2 with a1 = -2 Re w^2."""
    return x * x - a_one(omega) * x * y + y * y


def center_change(alpha: float, a: complex):
    """Real 2x2 area-preserving U with U^-1 B U = [[0, f], [-f, 0]].

    B is the real form of c' = -i(alpha c - conj(a) conj(c)). The first column
    of U is (positive, 0). Returns (U, f) where |f| = nu.
    """
    q = classify_pair(alpha, a)
    if q.kind != CENTER:
        raise ClassificationError("non-conformal change needs a center pair")
    B = np.array([[a.imag, alpha + a.real], [-alpha + a.real, -a.imag]])
    vals, vecs = np.linalg.eig(B)
    for idx in np.argsort(-vals.imag):
        w = vecs[:, idx]
        U = np.column_stack([w.real, w.imag])
        det = np.linalg.det(U)
        if det > 0:
            break
    # rotate w so that u = (u0, 0), u0 > 0
    psi = -cmath.phase(w[1]) if abs(w[1]) > 0 else 0.0
    w = w * cmath.exp(1j * (psi + math.pi / 2))
    if w.real[0] < 0:
        w = -w
    U = np.column_stack([w.real, w.imag])
    U = U / math.sqrt(np.linalg.det(U))
    Bc = np.linalg.solve(U, B @ U)
    return U, float(Bc[0, 1])


def chart_omega(model: LatticeModel, j: int, k: int) -> complex:
    """Saddle root for neighbour ``k`` in chart ``j`` of the lattice field.

    The lattice linearisation is c' = i a_jj c - i a_kj conj(c); its unstable
    line is spanned by w with w^2 = -i conj(a_kj) / (lam - i a_jj).
    """
    A = model.A
    ajj = float(A[j - 1, j - 1].real)
    akj = complex(A[k - 1, j - 1])
    q = classify_pair(ajj, akj)
    if q.kind != SADDLE:
        raise ClassificationError(f"modes {j},{k} do not form a saddle pair")
    w = _principal_sqrt(-1j * np.conj(akj) / (q.lambda_or_nu - 1j * ajj))
    return w / abs(w)


def saddle_rate(model: LatticeModel, j: int, k: int) -> float:
    A = model.A
    return classify_pair(float(A[j - 1, j - 1].real), complex(A[k - 1, j - 1])).lambda_or_nu


def decompose(omega: complex, c):
    """Real (x, y) with w x + conj(w) y = c (vectorised)."""
    c = np.asarray(c, dtype=complex)
    xp = c.real / omega.real
    xm = c.imag / omega.imag
    return 0.5 * (xp + xm), 0.5 * (xp - xm)


@dataclass(frozen=True)
class ChartGeometry:
    model: LatticeModel
    j: int
    modes: tuple          # 1-based modes k != j, increasing
    omegas: tuple         # per mode: complex saddle root or None for centre modes

    @property
    def n(self):
        return self.model.n

    @property
    def dim(self):
        return 2 * len(self.modes)

    def slot(self, k: int) -> int:
        return 2 * self.modes.index(k)

    @property
    def has_minus(self):
        return self.j > 1

    @property
    def has_plus(self):
        return self.j < self.n

    def names(self) -> list:
        out = []
        for k in self.modes:
            if k == self.j - 1:
                out += ["x-", "y-"]
            elif k == self.j + 1:
                out += ["x+", "y+"]
            else:
                out += [f"c{k}.re", f"c{k}.im"]
        return out

    def index(self, name: str) -> int:
        return self.names().index(name)

    def star_modes(self) -> list:
        return [k for k in self.modes if abs(k - self.j) >= 2]

    def to_complex(self, v):
        """Chart vector(s) -> complex modes (last axis over ``modes``)."""
        v = np.asarray(v, dtype=float)
        re = v[..., 0::2]
        im = v[..., 1::2]
        out = re + 1j * im
        for i, w in enumerate(self.omegas):
            if w is not None:
                out[..., i] = w * re[..., i] + np.conj(w) * im[..., i]
        return out

    def from_complex(self, c):
        c = np.asarray(c, dtype=complex)
        v = np.empty(c.shape[:-1] + (self.dim,))
        v[..., 0::2] = c.real
        v[..., 1::2] = c.imag
        for i, w in enumerate(self.omegas):
            if w is not None:
                v[..., 2 * i], v[..., 2 * i + 1] = decompose(w, c[..., i])
        return v

    def radius(self, c, strict=True):
        rad = 1.0 - np.sum((c * np.conj(c)).real, axis=-1)
        if strict and np.any(rad < 0):
            raise OffSphereError("negative radicand for the chart radius")
        return np.sqrt(np.maximum(rad, 0.0))

    def to_ambient(self, v, theta=0.0, strict=True):
        c = self.to_complex(v)
        r = self.radius(c, strict)
        b = np.empty(c.shape[:-1] + (self.n,), dtype=complex)
        b[..., self.j - 1] = r
        idx = [k - 1 for k in self.modes]
        b[..., idx] = c
        return b * np.exp(1j * np.asarray(theta))[..., None]

    def from_ambient(self, b, check=True):
        b = np.asarray(b, dtype=complex)
        bj = b[..., self.j - 1]
        if check:
            if np.any(np.abs(bj) <= 1e-8):
                raise ChartSingularityError(f"|b_{self.j}| too small for chart {self.j}")
            if np.any(np.abs(mass(b) - 1.0) > 1e-8):
                raise OffSphereError("state is not on the unit-mass sphere")
        theta = np.angle(bj)
        rot = np.exp(-1j * theta)
        idx = [k - 1 for k in self.modes]
        c = b[..., idx] * rot[..., None]
        return self.from_complex(c), np.mod(theta, 2 * np.pi)

    def field(self, v, strict=False):
        """Vector field in chart coordinates (vectorised over leading axes)."""
        c = self.to_complex(v)
        r = self.radius(c, strict)
        b = np.empty(c.shape[:-1] + (self.n,), dtype=complex)
        b[..., self.j - 1] = r
        idx = [k - 1 for k in self.modes]
        b[..., idx] = c
        f = eval_field(self.model, b, check=False)
        fj = f[..., self.j - 1]
        spin = np.imag(fj / np.where(r > 0, r, 1.0))
        dc = f[..., idx] - 1j * spin[..., None] * c
        return self.from_complex(dc)


@lru_cache(maxsize=256)
def _geometry(model: LatticeModel, j: int) -> ChartGeometry:
    n = model.n
    if not 1 <= j <= n:
        raise ValueError(f"chart index {j} outside 1..{n}")
    modes = tuple(k for k in range(1, n + 1) if k != j)
    omegas = tuple(chart_omega(model, j, k) if abs(k - j) == 1 else None for k in modes)
    return ChartGeometry(model, j, modes, omegas)


def geometry(model: LatticeModel, j: int) -> ChartGeometry:
    return _geometry(model, j)


@dataclass
class ChartState:
    j: int
    z_minus: Optional[np.ndarray]
    z_plus: Optional[np.ndarray]
    c_star: np.ndarray
    theta: float = 0.0

    def vector(self, geo: ChartGeometry) -> np.ndarray:
        v = np.zeros(geo.dim)
        stars = iter(self.c_star)
        for k in geo.modes:
            s = geo.slot(k)
            if k == self.j - 1:
                v[s:s + 2] = self.z_minus
            elif k == self.j + 1:
                v[s:s + 2] = self.z_plus
            else:
                c = next(stars)
                v[s], v[s + 1] = c.real, c.imag
        return v

    @classmethod
    def from_vector(cls, geo: ChartGeometry, v, theta=0.0):
        v = np.asarray(v, dtype=float)
        zm = v[geo.slot(geo.j - 1):geo.slot(geo.j - 1) + 2].copy() if geo.has_minus else None
        zp = v[geo.slot(geo.j + 1):geo.slot(geo.j + 1) + 2].copy() if geo.has_plus else None
        stars = np.array([v[geo.slot(k)] + 1j * v[geo.slot(k) + 1] for k in geo.star_modes()])
        return cls(geo.j, zm, zp, stars, float(theta))

    def radius(self, geo: ChartGeometry) -> float:
        return float(geo.radius(geo.to_complex(self.vector(geo))))


def to_chart(model: LatticeModel, j: int, b) -> ChartState:
    geo = geometry(model, j)
    v, theta = geo.from_ambient(b)
    return ChartState.from_vector(geo, v, theta)


def from_chart(model: LatticeModel, j: int, s: ChartState) -> np.ndarray:
    geo = geometry(model, j)
    return geo.to_ambient(s.vector(geo), s.theta)


def reduced_field(model: LatticeModel, j: int, k: int, c):
    """Two-mode field for ``c = b_k`` in chart ``j`` with all other modes zero."""
    c = np.asarray(c, dtype=complex)
    if np.any(np.abs(c) > 1 + 1e-9):
        raise DomainError("|c| > 1")
    A = model.A
    ajj, ajk, akj, akk = A[j - 1, j - 1], A[j - 1, k - 1], A[k - 1, j - 1], A[k - 1, k - 1]
    p = (c * np.conj(c)).real
    r2 = np.maximum(1.0 - p, 0.0)
    r = np.sqrt(r2)
    ej = -1j * (ajj * r2 + akj * c * c) * r
    ek = -1j * (ajk * r2 + akk * c * c) * np.conj(c)
    out_rad = 0.0
    if model.dissipative:
        C = model.C
        ej = ej + model.rho * (C[j - 1, j - 1] * r2 + C[k - 1, j - 1] * p) * r
        ek = ek + model.rho * (C[j - 1, k - 1] * r2 + C[k - 1, k - 1] * p) * c
        R = -(C[j - 1, j - 1] * r2 * r2 + (C[j - 1, k - 1] + C[k - 1, j - 1]) * r2 * p
              + C[k - 1, k - 1] * p * p)
        out_rad = model.rho * R * c
    spin = np.where(r > 0, (ej - np.conj(ej)) / (2 * np.where(r > 0, r, 1.0)), 0.0)
    return -spin * c + ek + out_rad


def reduced_hamiltonian(model: LatticeModel, j: int, k: int, c):
    """H(c) = a_kk/4 - (1 - |c|^2) H2(c) for the two-mode restriction."""
    c = np.asarray(c, dtype=complex)
    p = np.abs(c) ** 2
    A = model.A
    akk, ajj, akj = A[k - 1, k - 1].real, A[j - 1, j - 1].real, A[k - 1, j - 1]
    h2 = (akk - ajj) / 4 + (akk + ajj) / 4 * p - np.real(akj * np.conj(c) ** 2) / 2
    return akk / 4 - (1 - p) * h2


def line_directions(alpha: float, a: complex):
    """Unit directions of the real lines alpha |c|^2 = Re(a c^2) through 0."""
    if abs(a) ** 2 <= alpha ** 2:
        raise ClassificationError("straight lines need a saddle pair")
    base = math.acos(alpha / abs(a))
    out = []
    for s in (1.0, -1.0):
        phi = (s * base - cmath.phase(a)) / 2
        d = np.array([math.cos(phi), math.sin(phi)])
        if d[0] < -1e-15 or (abs(d[0]) <= 1e-15 and d[1] < 0):
            d = -d
        out.append(d)
    out.sort(key=lambda d: -d[1])
    return out


def heteroclinic_lines(model: LatticeModel, j: int):
    """Directions of the two straight heteroclinic lines between T_j and T_{j+1}."""
    A = model.A
    if abs(A[j - 1, j - 1] - A[j, j]) > 1e-12:
        raise NoStraightLineError("a_jj != a_{j+1,j+1}: heteroclinics are not straight lines")
    alpha, a = quad_params(model, j, j + 1)
    return line_directions(alpha, a)


def transition_map(model: LatticeModel, j: int, s: ChartState) -> ChartState:
    """Chart j state -> chart j+1 state for the same ambient point (up to phase)."""
    geo = geometry(model, j)
    v, theta = transition_vector(model, j, s.vector(geo), s.theta)
    return ChartState.from_vector(geometry(model, j + 1), v, theta)


def transition_vector(model: LatticeModel, j: int, v, theta=0.0):
    """Vectorised transition between chart vectors, keeping tiny coordinates exact."""
    geo = geometry(model, j)
    new = geometry(model, j + 1)
    v = np.asarray(v, dtype=float)
    c = geo.to_complex(v)
    sp = geo.slot(j + 1)
    w = geo.omegas[geo.modes.index(j + 1)]
    xp, yp = v[..., sp], v[..., sp + 1]
    cp = w * xp + np.conj(w) * yp
    mod = np.abs(cp)
    if np.any(mod <= 1e-10):
        raise TransitionSingularityError("z+ = 0: chart j+1 undefined")
    r = geo.radius(c, strict=False)
    p = np.conj(cp) / mod                       # |c_{j+1}| / c_{j+1}
    out = np.empty_like(v)
    for i, k in enumerate(new.modes):
        s_new = 2 * i
        wt = new.omegas[i]
        if k == j:
            # r p = r (conj(w) x+ + w y+) / |c|; decompose the two basis images
            ax, ay = decompose(wt, np.conj(w)) if wt is not None else (np.conj(w).real, np.conj(w).imag)
            bx, by = decompose(wt, w) if wt is not None else (w.real, w.imag)
            f = r / mod
            out[..., s_new] = f * (ax * xp + bx * yp)
            out[..., s_new + 1] = f * (ay * xp + by * yp)
            continue
        ck = c[..., geo.modes.index(k)] * p
        if wt is not None:
            out[..., s_new], out[..., s_new + 1] = decompose(wt, ck)
        else:
            out[..., s_new], out[..., s_new + 1] = ck.real, ck.imag
    new_theta = np.mod(np.asarray(theta) + np.angle(cp), 2 * np.pi)
    return out, new_theta


def jacobian(fun, v, h=FD_STEP):
    """Central finite-difference Jacobian of ``fun`` at ``v`` (batched columns)."""
    v = np.asarray(v, dtype=float)
    d = v.size
    E = np.eye(d) * h
    plus = fun(v[None, :] + E)
    minus = fun(v[None, :] - E)
    return ((plus - minus) / (2 * h)).T


def _blocks(geo: ChartGeometry):
    out = {}
    for k in geo.modes:
        if k == geo.j - 1:
            name = "z-"
        elif k == geo.j + 1:
            name = "z+"
        else:
            name = f"c{k}"
        out[name] = slice(geo.slot(k), geo.slot(k) + 2)
    return out


@dataclass
class BlockReport:
    j: int
    worst: dict            # "row|col" -> max |entry| over samples
    tol: float

    @property
    def max_violation(self) -> float:
        return max(self.worst.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_violation < self.tol


def block_diagonal_check(model: LatticeModel, j: int, samples=None, h=FD_STEP,
                         tol=TOL_BLOCK) -> BlockReport:
    """Off-diagonal Jacobian blocks of the chart field along both heteroclinics.

    Samples are points (0, y-, 0, 0, 0) on the incoming line and (0, 0, x+, 0, 0)
    on the outgoing one, for each value in ``samples``.
    """
    geo = geometry(model, j)
    if samples is None:
        samples = np.linspace(0.05, 0.6, 8)
    blocks = _blocks(geo)
    points = []
    if geo.has_minus:
        for s in samples:
            v = np.zeros(geo.dim)
            v[geo.index("y-")] = s
            points.append(v)
    if geo.has_plus:
        for s in samples:
            v = np.zeros(geo.dim)
            v[geo.index("x+")] = s
            points.append(v)
    worst = {}
    for v in points:
        J = jacobian(geo.field, v, h)
        for rn, rs in blocks.items():
            for cn, cs in blocks.items():
                if rn == cn:
                    continue
                key = f"d{rn}/d{cn}"
                worst[key] = max(worst.get(key, 0.0), float(np.max(np.abs(J[rs, cs]))))
    return BlockReport(j, worst, tol)
