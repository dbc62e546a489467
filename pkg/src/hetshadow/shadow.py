"""Covering chain along the heteroclinic chain T_1 -> ... -> T_n and orbit search.

Time is measured in units of the saddle rate: a passage "of length T" is the
flow for time T / lam, so linear saddle factors are exactly e^{+-T}.

Sizes follow three scales: macro O(1), micro poly(T) e^{-T} and nano
poly(T) e^{-2T}. The maps are integrated as variations around a reference
orbit computed at tight tolerance, which keeps nano-sized differences
resolvable in double precision.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .chart import (ChartState, geometry, heteroclinic_lines, jacobian, saddle_rate,
                    transition_vector)
from .hset import (ENTRY, EXIT, INTERIOR, BOUNDARY_ENTRY, BOUNDARY_EXIT, HSet, Link, block,
                   check_covering, contract)
from .integrate import NotFoundError, integrate
from .model import LatticeModel, mass

A_TUBE = 3.0
R_DOMAIN = 0.2
INFLATE = 1.1
T_SEARCH = (8.0, 10.0, 12.0, 14.0, 16.0, 18.0)
T_CAP = 18.0
CAL_SAFETY = 1.2       # entry radius over the measured image extent
CAL_EXIT = 1.2         # exit radius over the minimal clearing radius
CAL_FLOOR = 1e-3       # smallest entry coefficient in units of its scale
CAL_YPLUS = 0.02       # N_in y+ radius over the x+ radius (y+ is contracted to 0)
REF_RTOL = 1e-13
REF_ATOL = 1e-17
VAR_ATOL = 1e-12
ROUNDING_FLOOR = 1e-17
SWEEPS = 6
NOISE_PATIENCE = 3
STALL_ACCEPT = 1e-4    # residual (internal units) accepted when damped Newton stalls


class ChainInfeasibleError(RuntimeError):
    pass


class PreconditionError(RuntimeError):
    pass


class SearchFailedError(RuntimeError):
    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class ChainConfig:
    n: int
    sigma: float = 0.05
    T: float = 10.0
    grid: int = 5
    interior_grid: int = 3
    budget: int = 40
    rtol: float = 1e-9

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("need n >= 3")
        if not 0 < self.sigma <= 0.2:
            raise ValueError("sigma must lie in (0, 0.2]")
        if self.T < 1:
            raise ValueError("T must be >= 1")


def exponent_sequence(j: int):
    """(k_j, k_cj) of the doubling recurrence started at k_0 = 1, k_c0 = 0."""
    if j < 0:
        raise ValueError("j must be nonnegative")
    k, kc = 1, 0
    for _ in range(j):
        k, kc = 2 * k + 1, 2 * kc + 1
    return k, kc


def chain_exponents(n: int):
    """Per-chart (k, k_c) for charts 1..n used by the chain.

    Each exponent is the smallest integer strictly above every power of T it
    must absorb: the nano y+ radius (power 1) and the squared micro sizes of
    the previous exit set for (x-, y-); the previous z- size for c_p.
    """
    out = [(0, 0)]
    for _ in range(1, n):
        k, kc = out[-1]
        micro = max(k, kc)
        out.append((max(1, 2 * micro) + 1, micro + 1 if len(out) > 1 else 0))
    return out


@dataclass
class Anchor:
    j: int
    A: np.ndarray          # chart-j vector of A_j (origin for j = 1)
    B: np.ndarray          # chart-j vector of B_j (origin for j = n)
    residual: float        # tangency residual of the field to the heteroclinic lines


def anchor_points(model: LatticeModel, j: int, sigma: float):
    """A_j (y- = sigma) and B_j (x+ = sigma) in chart j, as ChartStates."""
    a = _anchor(model, j, sigma)
    geo = geometry(model, j)
    return ChartState.from_vector(geo, a.A), ChartState.from_vector(geo, a.B)


def _anchor(model, j, sigma) -> Anchor:
    geo = geometry(model, j)
    A = np.zeros(geo.dim)
    B = np.zeros(geo.dim)
    res = 0.0
    if geo.has_minus:
        heteroclinic_lines(model, j - 1)
        A[geo.index("y-")] = sigma
        f = geo.field(A)
        f[geo.index("y-")] = 0.0
        res = max(res, float(np.max(np.abs(f))))
    if geo.has_plus:
        heteroclinic_lines(model, j)
        B[geo.index("x+")] = sigma
        f = geo.field(B)
        f[geo.index("x+")] = 0.0
        res = max(res, float(np.max(np.abs(f))))
    if res > 1e-10:
        raise ChainInfeasibleError(f"chart {j}: anchors are not on straight heteroclinic lines")
    return Anchor(j, A, B, res)


def chain_rate(model: LatticeModel) -> float:
    rates = {round(saddle_rate(model, j, j + 1), 12) for j in range(1, model.n)}
    rates |= {round(saddle_rate(model, j + 1, j), 12) for j in range(1, model.n)}
    if len(rates) != 1:
        raise ChainInfeasibleError("saddle rates differ between tori")
    return rates.pop()


class VariationalFlow:
    """Chart flow for a fixed time, evaluated as reference orbit plus variation."""

    def __init__(self, geo, x0, tau, rtol=1e-11):
        self.geo = geo
        self.x0 = np.array(x0, dtype=float)
        self.tau = float(tau)
        self.rtol = rtol
        self.ref = integrate(geo.field, self.x0, (0.0, self.tau), rtol=REF_RTOL, atol=REF_ATOL,
                             dense=True, bound=None)
        self.end = self.ref.states[-1]

    def __call__(self, P, scale=None, dense=False):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        d0 = P - self.x0
        ref, geo = self.ref, self.geo

        def field(w):
            t = w[0, 0]
            X = ref(t)
            out = np.empty_like(w)
            out[:, 0] = 1.0
            out[:, 1:] = geo.field(X + w[:, 1:]) - geo.field(X)
            return out

        w0 = np.concatenate([np.zeros((len(P), 1)), d0], axis=1)
        sc, atol = None, VAR_ATOL
        if scale is not None:
            sc = np.concatenate([[1.0], np.asarray(scale, dtype=float)])
            # rounding in f(X + d) - f(X) is absolute, so it sets a floor in scaled units
            atol = np.maximum(VAR_ATOL, ROUNDING_FLOOR / sc)
        traj = integrate(field, w0, (0.0, self.tau), rtol=self.rtol, atol=atol, bound=None, scale=sc,
                         dense=dense)
        if dense:
            return traj
        return self.end + traj.states[-1][:, 1:]

    def path(self, p, scale=None, count=200):
        """Sampled chart states along the orbit of the single point ``p``."""
        traj = self(np.asarray(p, dtype=float)[None], scale, dense=True)
        ts = np.linspace(0.0, self.tau, count)
        return ts, np.array([self.ref(t) + traj(t)[0, 1:] for t in ts])


def _yminus_after(model, j, v):
    out, _ = transition_vector(model, j, v)
    return out[..., geometry(model, j + 1).index("y-")]


def travel_time(model: LatticeModel, j: int, sigma: float, horizon: float = 50.0) -> float:
    """Time from B_j to the section y- = sigma of chart j+1 along the heteroclinic."""
    geo = geometry(model, j)
    B = _anchor(model, j, sigma).B
    t, _ = _event(geo, B, lambda v: _yminus_after(model, j, v) - sigma, horizon)
    # polish so that the integrated reference lands on the section to rounding level
    g = lambda s: float(_yminus_after(model, j, _flow_end(geo, B, s))) - sigma  # noqa: E731
    t0, t1 = t, t * (1 + 1e-6)
    g0, g1 = g(t0), g(t1)
    for _ in range(8):
        if g1 == g0 or abs(g1) < 1e-17:
            break
        t0, t1, g0 = t1, t1 - g1 * (t1 - t0) / (g1 - g0), g1
        g1 = g(t1)
    return t1


def _event(geo, x0, section, horizon):
    from .integrate import event_crossing
    try:
        return event_crossing(geo.field, x0, section, direction=-1, horizon=horizon,
                              rtol=REF_RTOL, atol=REF_ATOL, bound=None)
    except NotFoundError as exc:
        raise ChainInfeasibleError(f"chart {geo.j}: section not reached") from exc


def _flow_end(geo, x0, t):
    return integrate(geo.field, x0, (0.0, t), rtol=REF_RTOL, atol=REF_ATOL, bound=None).states[-1]


class TransitionLink:
    """Map from chart j near B_j to chart j+1 near A_{j+1}: flow for t_j then change chart."""

    def __init__(self, model, j, sigma, rtol=1e-11):
        self.model = model
        self.j = j
        self.t = travel_time(model, j, sigma)
        self.flow = VariationalFlow(geometry(model, j), _anchor(model, j, sigma).B, self.t, rtol)
        # B_j flows exactly onto A_{j+1}; remove the reference orbit's integration error
        end, _ = transition_vector(model, j, self.flow.end)
        self.offset = end - _anchor(model, j + 1, sigma).A

    def __call__(self, P, scale=None):
        out, _ = transition_vector(self.model, self.j, self.flow(P, scale))
        return out - self.offset


class PassageLink:
    """Flow for time T / lam in chart j, starting near the center of the entry set."""

    def __init__(self, model, j, sigma, T, lam, rtol=1e-11):
        self.flow = VariationalFlow(geometry(model, j), _anchor(model, j, sigma).A, T / lam, rtol)

    def __call__(self, P, scale=None):
        return self.flow(P, scale)


@dataclass
class ConstantsEstimate:
    L_T: float
    l_T: float
    Lc_T: float
    lc_T: float
    D2_T: float
    G: float
    K: float
    K1: float
    Lc_phi: float
    L_ct: float
    r_T: float = R_DOMAIN
    travel_times: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _block_slices(geo):
    out = {}
    for k in geo.modes:
        s = geo.slot(k)
        if k == geo.j - 1:
            out["z-"] = slice(s, s + 2)
        elif k == geo.j + 1:
            out["z+"] = slice(s, s + 2)
        else:
            out[f"c{k}"] = slice(s, s + 2)
    return out


def _transition_blocks(model, j, J):
    """Norms of the non-trivial blocks of D T_j at B_j, split saddle / centre."""
    src, dst = geometry(model, j), geometry(model, j + 1)
    bs, bd = _block_slices(src), _block_slices(dst)
    saddle, centre = [], []
    if "z-" in bs:       # z- of chart j becomes the past mode c_{j-1}
        saddle.append(np.linalg.norm(J[bd[f"c{j - 1}"], bs["z-"]], 2))
    saddle.append(np.linalg.norm(J[bd["z-"], bs["z+"]], 2))
    if f"c{j + 2}" in bs:
        saddle.append(np.linalg.norm(np.linalg.inv(J[bd["z+"], bs[f"c{j + 2}"]]), 2))
    for name in bs:
        if name.startswith("c"):
            k = int(name[1:])
            if k < j - 1:
                centre.append(np.linalg.norm(J[bd[name], bs[name]], 2))
            elif k > j + 2:
                centre.append(np.linalg.norm(np.linalg.inv(J[bd[name], bs[name]]), 2))
    return saddle, centre


def estimate_constants(model: LatticeModel, config: ChainConfig, links=None, sample_count: int = 24,
                       seed: int = 0) -> ConstantsEstimate:
    """Lipschitz-type constants of the transition maps and the passage estimates."""
    rng = np.random.default_rng(seed)
    sigma, T = config.sigma, config.T
    if links is None:
        links = {j: TransitionLink(model, j, sigma, config.rtol) for j in range(1, model.n)}
    saddle, centre, d2 = [], [], []
    h = 1e-6
    for j, link in links.items():
        geo = geometry(model, j)
        B = _anchor(model, j, sigma).B
        J = jacobian(lambda P: link(P), B, h)
        s, c = _transition_blocks(model, j, J)
        saddle += s
        centre += c
        # second differences on the part of B(B_j, r) where the map is defined
        r = min(R_DOMAIN, sigma / 2)
        P = B + r * rng.uniform(-1, 1, (sample_count, geo.dim))
        U = rng.normal(size=(sample_count, geo.dim))
        U /= np.max(np.abs(U), axis=1)[:, None]
        hh = 1e-3
        imgs = link(np.concatenate([P + hh * U, P, P - hh * U]))
        m = sample_count
        sec = (imgs[:m] - 2 * imgs[m:2 * m] + imgs[2 * m:]) / hh ** 2
        d2.append(float(np.max(np.abs(sec))))
    if any(not np.isfinite(x) or x <= 0 for x in saddle):
        raise ChainInfeasibleError("singular expanding block in a transition map")
    l_T = max(saddle)
    lc_T = max(centre) if centre else 1.0
    G = estimate_G(model, config, seed=seed)
    K = estimate_K(model, config, seed=seed)
    Lc_phi = math.exp(10 * G * sigma)
    K1 = estimate_K1(config, K)
    Lc_T = INFLATE * lc_T
    return ConstantsEstimate(INFLATE * l_T, l_T, Lc_T, lc_T, 2 * INFLATE * max(d2), G, K, K1, Lc_phi,
                             Lc_phi * Lc_T, R_DOMAIN, [float(lk.t) for lk in links.values()])


def _tube_samples(geo, config, count, rng, exps=(1, 0)):
    """Random chart points in the passage tubes of chart j (rate-one time)."""
    T, s = config.T, config.sigma
    k, kc = exps
    t = rng.uniform(0, T, count)
    v = np.zeros((count, geo.dim))
    if geo.has_minus:
        v[:, geo.index("x-")] = math.exp(-2 * T) * np.exp(t) * T ** k * rng.uniform(-1, 1, count)
        v[:, geo.index("y-")] = np.exp(-t) * 2 * s * rng.uniform(-1, 1, count)
    if geo.has_plus:
        v[:, geo.index("x+")] = math.exp(-T) * np.exp(t) * 2 * s * rng.uniform(-1, 1, count)
        v[:, geo.index("y+")] = math.exp(-T) * np.exp(-t) * T * rng.uniform(-1, 1, count)
    for k_ in geo.star_modes():
        sl = geo.slot(k_)
        v[:, sl:sl + 2] = math.exp(-T) * max(T ** kc, 1.0) * rng.uniform(-1, 1, (count, 2))
    return v


def estimate_G(model, config, samples=400, seed=0) -> float:
    """1.1 x max |g_l(z)| / |z| where c_l' = i c_l (nu_l + g_l(z)) for centre modes."""
    rng = np.random.default_rng(seed)
    best = 0.0
    for j in range(1, model.n + 1):
        geo = geometry(model, j)
        stars = geo.star_modes()
        if not stars:
            continue
        v = _tube_samples(geo, config, samples, rng)
        for k in stars:
            sl = geo.slot(k)
            probe = v.copy()
            probe[:, sl] = 1e-7
            probe[:, sl + 1] = 0.0
            zero = np.zeros(geo.dim)
            zero[sl] = 1e-7
            nu = geo.field(zero)[sl + 1] / 1e-7
            f = geo.field(probe)
            c = probe[:, sl] + 1j * probe[:, sl + 1]
            g = (f[:, sl] + 1j * f[:, sl + 1]) / (1j * c) - nu
            norm = np.sum(np.abs(np.delete(v, [sl, sl + 1], axis=1)), axis=1)
            best = max(best, float(np.max(np.abs(g) / np.where(norm > 0, norm, 1.0))))
    return INFLATE * best if best > 0 else 1e-12


def estimate_K(model, config, samples=400, seed=0) -> float:
    """1.1 x max over tube samples of |nonlinear saddle terms| / |z|^3 (cubic coefficient bound)."""
    rng = np.random.default_rng(seed + 1)
    best = 0.0
    lam = chain_rate(model)
    for j in range(1, model.n + 1):
        geo = geometry(model, j)
        v = _tube_samples(geo, config, samples, rng)
        f = geo.field(v) / lam
        norm = np.sum(np.abs(v), axis=1)
        for name, rate in (("x-", 1), ("y-", -1), ("x+", 1), ("y+", -1)):
            if name in geo.names():
                i = geo.index(name)
                nl = np.abs(f[:, i] - rate * v[:, i])
                best = max(best, float(np.max(nl / np.maximum(norm, 1e-300) ** 3)))
    return INFLATE * best if best > 0 else 1.0


def estimate_K1(config, K, k=1):
    """Smallest constant closing the four entry inequalities of the passage covering, plus 10%."""
    T, s, A = config.T, config.sigma, A_TUBE
    need = [0.5 + 1 / A, K * s / A, (s + T ** k * math.exp(-2 * T) + s * K / A) / T ** k]
    return INFLATE * max(need)


def radii_ledger(j: int, config: ChainConfig, constants: ConstantsEstimate, exponents=None, n=None):
    """Radii of N_in, N_out (and their contractions) for 0-based chain position ``j`` (chart j + 1).

    Values are coefficients: entries tagged "micro" multiply e^{-T}, "nano"
    multiply e^{-2T}, "macro" are absolute. ``exponents`` overrides (k_j, k_cj).
    """
    T, s = config.T, config.sigma
    k, kc = exponent_sequence(j) if exponents is None else exponents
    n_last = (config.n if n is None else n) - 1
    c = constants
    base = c.L_T * c.Lc_phi * 1.5 * s
    r0 = c.L_ct ** (n_last - 1) * base if c.L_ct >= 1 else base
    r_in_cf = c.L_ct ** (-j) * r0
    return {
        "in": {"c_p": (T ** kc, "micro"), "y-": (T ** k, "nano"), "x-": (T ** k / 2, "nano"),
               "x+": (1.5 * s, "micro"), "y+": (1.5 * s, "micro"), "c_f": (r_in_cf, "micro")},
        "in~": {"y+": (0.0, "nano")},
        "out": {"z-": (c.K1 * T ** k, "micro"), "y+": (c.K1 * T, "nano"),
                "c_p": (c.Lc_phi * T ** kc, "micro"), "c_f": (r_in_cf / c.Lc_phi, "micro"),
                "x+": (s / 100, "macro")},
        "out~": {"x+": (0.0, "nano")},
        "exponents": (k, kc),
    }


def _size(entry, T):
    val, scale = entry
    return val * {"macro": 1.0, "micro": math.exp(-T), "nano": math.exp(-2 * T)}[scale]


def _chart_sets(model, j, sigma, rin, rout, led):
    """N_in^j, N_out^j and their contractions from ambient radii keyed by block name."""
    geo = geometry(model, j)
    anc = _anchor(model, j, sigma)
    bin_, bout = [], []
    for k in geo.modes:
        sl = geo.slot(k)
        if k == j - 1:
            bin_ += [block("x-", sl, rin["x-"], ENTRY), block("y-", sl + 1, rin["y-"], ENTRY)]
            bout += [block("x-", sl, rout["x-"], ENTRY), block("y-", sl + 1, rout["y-"], ENTRY)]
        elif k == j + 1:
            bin_ += [block("x+", sl, rin["x+"], EXIT), block("y+", sl + 1, rin["y+"], EXIT)]
            bout += [block("x+", sl, rout["x+"], EXIT), block("y+", sl + 1, rout["y+"], ENTRY)]
        else:
            role = ENTRY if k < j else EXIT
            bin_.append(block(f"c{k}", (sl, sl + 1), rin[f"c{k}"], role))
            bout.append(block(f"c{k}", (sl, sl + 1), rout[f"c{k}"], role))
    N_in = HSet(anc.A, bin_, f"N_in^{j}")
    N_out = HSet(anc.B, bout, f"N_out^{j}")
    sets = {"in": N_in, "out": N_out, "ledger": led}
    sets["in~"] = contract(N_in, "y+", 0.0, f"N_in~^{j}") if geo.has_plus else N_in
    sets["out~"] = contract(N_out, "x+", 0.0, f"N_out~^{j}") if geo.has_plus else N_out
    return sets


def _ambient_radii(geo, led, T):
    j = geo.j
    rin, rout = {}, {}
    for k in geo.modes:
        if k == j - 1:
            rin["x-"], rin["y-"] = _size(led["in"]["x-"], T), _size(led["in"]["y-"], T)
            rout["x-"] = rout["y-"] = _size(led["out"]["z-"], T)
        elif k == j + 1:
            rin["x+"], rin["y+"] = _size(led["in"]["x+"], T), _size(led["in"]["y+"], T)
            rout["x+"], rout["y+"] = _size(led["out"]["x+"], T), _size(led["out"]["y+"], T)
        else:
            key = "c_p" if k < j else "c_f"
            rin[f"c{k}"], rout[f"c{k}"] = _size(led["in"][key], T), _size(led["out"][key], T)
    return rin, rout


def build_hsets(model: LatticeModel, config: ChainConfig, constants: ConstantsEstimate, exponents=None):
    """Per chart j: dict with N_in, contracted N_in, N_out, contracted N_out (closed-form radii)."""
    n, T, s = model.n, config.T, config.sigma
    exps = chain_exponents(n) if exponents is None else exponents
    out = {}
    for j in range(1, n + 1):
        led = radii_ledger(j - 1, config, constants, exps[j - 1], n)
        rin, rout = _ambient_radii(geometry(model, j), led, T)
        out[j] = _chart_sets(model, j, s, rin, rout, led)
    return out


def _ball_samples(N, count, rng):
    """Internal points of N: uniform directions, radii biased towards the block spheres."""
    parts = []
    for b in N.active_blocks:
        u = rng.normal(size=(count, b.dim))
        u /= np.linalg.norm(u, axis=1)[:, None]
        r = rng.uniform(0, 1, (count, 1)) ** (1.0 / (b.dim + 1))
        r[: count // 2] = 1.0
        parts.append(u * r)
    q = np.concatenate(parts, axis=1) if parts else np.zeros((count, 0))
    return np.concatenate([np.zeros((1, q.shape[1])), q])


def _image_extent(f, N, centre, groups, count, rng, jac_step=1e-3):
    """Max distance from ``centre`` of the images of N and of its affinisation, per index group."""
    q = _ball_samples(N, count, rng)
    d = q.shape[1]
    E = np.eye(d) * jac_step
    img = f(N.point(np.concatenate([q, E, -E])))
    y = img[:len(q)]
    J = (img[len(q):len(q) + d] - img[len(q) + d:]) / (2 * jac_step)
    aff = y[0] + q @ J
    out = {}
    for name, idx in groups.items():
        dev = np.concatenate([y[:, idx], aff[:, idx]]) - centre[idx]
        out[name] = float(np.max(np.linalg.norm(dev, axis=1)))
    return out


def _entry_groups(geo, which):
    j, g = geo.j, {}
    for k in geo.modes:
        sl = geo.slot(k)
        if k == j - 1:
            g["x-"], g["y-"] = [sl], [sl + 1]
        elif k < j:
            g[f"c{k}"] = [sl, sl + 1]
        elif k == j + 1 and which == "out":
            g["y+"] = [sl + 1]
    return g


def calibrate_hsets(model: LatticeModel, config: ChainConfig, constants: ConstantsEstimate, maps,
                    samples: int = 160, seed: int = 0):
    """Chain h-sets with radii fitted to the measured maps, same blocks and scales as the ledger.

    Exit radii of the centre modes come from a backward pass over the
    transition Jacobians (the image of an exit face must clear the next exit
    radius). Entry radii come from a forward pass: each entry radius of a
    target is CAL_SAFETY times the largest deviation of the images of the
    source set (and of its affinisation) in that block.
    ``maps`` holds ``phi{j}`` and ``T{j}`` callables taking (points, scale).
    """
    rng = np.random.default_rng(seed)
    n, s, T = model.n, config.sigma, config.T
    micro, nano = math.exp(-T), math.exp(-2 * T)
    r_xp = 1.5 * s * micro
    r_yp = CAL_YPLUS * r_xp
    cf_in, cf_out = {}, {}
    for j in range(n, 0, -1):
        geo = geometry(model, j)
        futures = [k for k in geo.modes if k >= j + 2]
        if not futures:
            continue
        nxt = geometry(model, j + 1)
        B = _anchor(model, j, s).B
        J = jacobian(lambda P: maps[f"T{j}"](P), B, 1e-6)
        need = 0.0
        for k in futures:
            a, b = geo.slot(k), nxt.slot(k)
            if k == j + 2:
                target = np.array([r_xp, r_yp])
            else:
                target = np.array([cf_in[j + 1]])
            need = max(need, _clearing_radius(J[b:b + 2, a:a + 2], target))
        cf_out[j] = CAL_EXIT * need
        cf_in[j] = constants.Lc_phi * cf_out[j]
    out, prev = {}, None
    for j in range(1, n + 1):
        geo = geometry(model, j)
        rin = {"x+": r_xp, "y+": r_yp} if geo.has_plus else {}
        rout = {"x+": s / 100} if geo.has_plus else {}
        for k in geo.modes:
            if k >= j + 2:
                rin[f"c{k}"], rout[f"c{k}"] = cf_in[j], cf_out[j]
        if prev is not None:
            groups = _entry_groups(geo, "in")
            ext = _image_extent(lambda P: maps[f"T{j - 1}"](P, _scale_of(prev)), prev, _anchor(model, j, s).A,
                                groups, samples, rng)
            for name in groups:
                rin[name] = _entry_radius(ext[name], nano if name in ("x-", "y-") else micro)
        src = _chart_sets(model, j, s, rin, _placeholder(geo, rout), None)["in~"]
        groups = _entry_groups(geo, "out")
        ext = _image_extent(lambda P: maps[f"phi{j}"](P, _scale_of(src)), src, _anchor(model, j, s).B,
                            groups, samples, rng)
        for name in groups:
            rout[name] = _entry_radius(ext[name], nano if name == "y+" else micro)
            if name.startswith("c"):
                rout[name] = max(rout[name], constants.Lc_phi * rin[name])
        led = _calibrated_ledger(geo, rin, rout, T)
        out[j] = _chart_sets(model, j, s, rin, rout, led)
        prev = out[j]["out~"]
    return out


def _clearing_radius(M, target, count=720):
    """Smallest r such that M maps the circle of radius r outside the target block(s).

    ``target`` holds two 1-d radii (max norm over the two rows) or one 2-d radius.
    """
    th = np.linspace(0, 2 * np.pi, count, endpoint=False)
    img = M @ np.stack([np.cos(th), np.sin(th)])
    if len(target) == 2:
        reach = np.max(np.abs(img) / target[:, None], axis=0)
    else:
        reach = np.linalg.norm(img, axis=0) / target[0]
    return float(1.0 / np.min(reach))


def _placeholder(geo, rout):
    full = dict(rout)
    for name in _entry_groups(geo, "out"):
        full.setdefault(name, 1.0)
    for k in geo.modes:
        full.setdefault(f"c{k}", 1.0)
    full.setdefault("y+", 1.0)
    return full


def _entry_radius(extent, scale):
    return CAL_SAFETY * max(extent, CAL_FLOOR * scale)


def _calibrated_ledger(geo, rin, rout, T):
    micro, nano = math.exp(-T), math.exp(-2 * T)

    def tag(name, side):
        if name == "x+" and side == "out":
            return "macro", 1.0
        if name in ("x-", "y-"):
            return ("nano", nano) if side == "in" else ("micro", micro)
        if name == "y+" and side == "out":
            return "nano", nano
        return "micro", micro

    led = {}
    for side, radii in (("in", rin), ("out", rout)):
        led[side] = {}
        for name, r in radii.items():
            scale, val = tag(name, side)
            led[side][name] = (r / val, scale)
    led["in~"] = {"y+": (0.0, "nano")} if geo.has_plus else {}
    led["out~"] = {"x+": (0.0, "nano")} if geo.has_plus else {}
    return led


@dataclass
class ChainReport:
    model: str
    config: dict
    T: float
    passed: bool
    constants: dict
    exponents: list
    ledger: dict
    links: list
    failed: list
    anchors: dict
    suggestion: str = ""
    hsets: dict = field(default_factory=dict, repr=False)
    maps: dict = field(default_factory=dict, repr=False)

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("model", "config", "T", "passed", "constants", "exponents",
                                           "ledger", "links", "failed", "anchors", "suggestion")}
        d["hsets"] = {name: h.to_dict() for name, h in _flat_sets(self.hsets).items()}
        return d


def _flat_sets(hsets):
    out = {}
    for j, sets in hsets.items():
        for key in ("in", "in~", "out", "out~"):
            h = sets[key]
            out.setdefault(h.name, h)
    return out


def _scale_of(N):
    sc = np.empty(N.dim)
    for b in N.blocks:
        sc[list(b.indices)] = b.radius
    return sc


def chain_maps(model: LatticeModel, config: ChainConfig):
    """Passage maps ``phi{j}`` and transition maps ``T{j}``, each called as map(points, scale)."""
    n, s, T = model.n, config.sigma, config.T
    lam = chain_rate(model)
    maps = {}
    for j in range(1, n + 1):
        maps[f"phi{j}"] = PassageLink(model, j, s, T, lam, config.rtol)
        if j < n:
            maps[f"T{j}"] = TransitionLink(model, j, s, config.rtol)
    return maps


def chain_links(hsets, maps, n):
    links = []
    for j in range(1, n + 1):
        src = hsets[j]["in~"]
        links.append(Link(src, lambda P, f=maps[f"phi{j}"], sc=_scale_of(src): f(P, sc),
                          hsets[j]["out"], f"phi_T[{j}]"))
        if j < n:
            src = hsets[j]["out~"]
            links.append(Link(src, lambda P, f=maps[f"T{j}"], sc=_scale_of(src): f(P, sc),
                              hsets[j + 1]["in"], f"T[{j}->{j + 1}]"))
    return links


def verify_chain(model: LatticeModel, config: ChainConfig, exponents=None, seed=0,
                 radii: str = "calibrated") -> ChainReport:
    """Check every covering of the chain at the configured T.

    ``radii="closed-form"`` uses radii_ledger; ``"calibrated"`` fits the
    radii to the measured maps (see calibrate_hsets).
    """
    n, s, T = model.n, config.sigma, config.T
    maps = chain_maps(model, config)
    trans = {j: maps[f"T{j}"] for j in range(1, n)}
    consts = estimate_constants(model, config, trans, seed=seed)
    exps = chain_exponents(n) if exponents is None else exponents
    if radii == "closed-form":
        hsets = build_hsets(model, config, consts, exps)
    elif radii == "calibrated":
        hsets = calibrate_hsets(model, config, consts, maps, seed=seed)
    else:
        raise ValueError(f"unknown radii mode {radii!r}")
    links = chain_links(hsets, maps, n)
    verdicts, failed = [], []
    for link in links:
        v = check_covering(link.map, link.source, link.target, config.grid, config.interior_grid,
                           jac_step=1e-3, name=link.name).to_dict()
        reach = _reach(link.target)
        v["target_reach"] = reach
        if reach >= R_DOMAIN:
            v["passed"] = False
            v["message"] = (v["message"] + "; " if v["message"] else "") + "target leaves the chart domain"
        verdicts.append(v)
        if not v["passed"]:
            failed.append(link.name)
    ok = not failed
    sugg = "" if ok else "increase T (margins improve with the micro/nano separation)"
    ledger = {str(j): _ledger_json(hsets[j]["ledger"]) for j in hsets}
    anchors = {str(j): {"A": _anchor(model, j, s).A.tolist(), "B": _anchor(model, j, s).B.tolist()}
               for j in range(1, n + 1)}
    return ChainReport(model.name, asdict(config), T, ok, consts.to_dict(), [list(e) for e in exps],
                       ledger, verdicts, failed, anchors, sugg, hsets, maps)


def _reach(N):
    """Largest block radius of N, compared with the chart domain radius."""
    return float(max(np.max(b.radius) for b in N.blocks))


def _ledger_json(led):
    out = {}
    for key, val in led.items():
        if isinstance(val, dict):
            out[key] = {k: {"coefficient": v[0], "scale": v[1]} for k, v in val.items()}
        else:
            out[key] = list(val)
    return out


def find_chain(model: LatticeModel, config: ChainConfig, T_values=T_SEARCH, log=None) -> ChainReport:
    """First T in the search list (capped at 18) for which the whole chain verifies."""
    last = None
    for T in T_values:
        if T > T_CAP:
            break
        cfg = ChainConfig(config.n, config.sigma, T, config.grid, config.interior_grid, config.budget,
                          config.rtol)
        rep = verify_chain(model, cfg)
        if log:
            log(f"T={T:g}: {'pass' if rep.passed else 'fail ' + ','.join(rep.failed)}")
        last = rep
        if rep.passed:
            return rep
    return last


def write_report(path, report: ChainReport):
    _atomic_json(path, report.to_dict())


def _atomic_json(path, payload):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2, default=_default)
    os.replace(tmp, path)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


@dataclass
class ShadowResult:
    times: np.ndarray           # ambient time samples
    masses: np.ndarray          # |b_l(t)|^2, one column per mode
    charts: np.ndarray          # chart index used for each sample
    q: np.ndarray               # internal coordinates of the start in N_in~^1
    diagnostics: dict


def _stage_maps(n):
    out = []
    for j in range(1, n + 1):
        out.append((f"phi{j}", j, "in~", "out"))
        if j < n:
            out.append((f"T{j}", j, "out", "in"))
    return out


def _run_chain(report, Q, upto=None):
    """Images of Q (internal coords of N_in~^1) at every stage of the chain (first ``upto`` maps)."""
    hs, maps, n = report.hsets, report.maps, len(report.hsets)
    P = hs[1]["in~"].point(Q)
    pts = [P]
    for key, j, src, _ in _stage_maps(n)[:upto]:
        P = maps[key](P, _scale_of(hs[j][src]))
        pts.append(P)
    return pts


def _residuals(report, pts):
    """x+ = sigma after every passage but the last; y+ = 0 after every transition but the last."""
    hs, n, s = report.hsets, len(report.hsets), report.config["sigma"]
    res = []
    for i, (key, j, _, _) in enumerate(_stage_maps(n)[:len(pts) - 1]):
        P = pts[i + 1]
        if key.startswith("phi") and j < n:
            N = hs[j]["out"]
            res.append((P[:, N.get("x+").indices[0]] - s) / N.get("x+").radius[0])
        elif key.startswith("T") and j + 1 < n:
            N = hs[j + 1]["in"]
            res.append(P[:, N.get("y+").indices[0]] / N.get("y+").radius[0])
    return np.stack(res, axis=1)


def _stage_plan(report):
    """Per stage: (free coordinates of N_in~^1 it controls, residual indices, maps to run)."""
    N0 = report.hsets[1]["in~"]
    n = len(report.hsets)
    pos, slots = 0, {}
    for b in N0.active_blocks:
        slots[b.name] = list(range(pos, pos + b.dim))
        pos += b.dim
    plan = [(slots["x+"], [0], 1)]
    for k in range(2, n):
        plan.append((slots[f"c{k + 1}"], [2 * k - 3, 2 * k - 2], 2 * k - 1))
    return plan


def _newton(report, q, unknowns, rows, upto, tol, fd_step, budget, history, log):
    """Damped Newton on the selected residual rows over the selected coordinates.

    Stops at ``tol``, or at the noise floor (no halving of the best residual
    for NOISE_PATIENCE iterations) once the residual is below STALL_ACCEPT.
    """
    m = len(unknowns)
    E = np.zeros((m, len(q)))
    E[np.arange(m), unknowns] = fd_step
    best, best_q, idle = np.inf, q, 0
    for it in range(budget):
        R = _residuals(report, _run_chain(report, np.concatenate([q[None], q + E, q - E]), upto))[:, rows]
        r = R[0]
        nr = float(np.max(np.abs(r)))
        history.append(nr)
        if log:
            log(f"newton[{len(rows)} rows, {upto} maps] {it}: residual {nr:.3e}")
        if nr < 0.5 * best:
            idle = 0
        else:
            idle += 1
        if nr < best:
            best, best_q = nr, q
        if nr < tol or (idle >= NOISE_PATIENCE and best < STALL_ACCEPT):
            return best_q, best
        J = (R[1:m + 1] - R[m + 1:]).T / (2 * fd_step)
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        lam = 1.0
        while lam > 1e-4:
            trial = q.copy()
            trial[unknowns] += lam * step
            if np.max(np.abs(trial)) <= 1.0:
                try:
                    rt = _residuals(report, _run_chain(report, trial[None], upto))[0, rows]
                except (ArithmeticError, RuntimeError, ValueError):
                    rt = np.array([np.inf])
                if np.max(np.abs(rt)) < nr:
                    break
            lam /= 2
        else:
            if best < STALL_ACCEPT:
                return best_q, best
            raise SearchFailedError("damped Newton stalled", (best, best_q))
        q = trial
    if best < STALL_ACCEPT:
        return best_q, best
    raise SearchFailedError("Newton budget exhausted", (best, best_q))


def shoot_shadowing_orbit(model: LatticeModel, config: ChainConfig, chain_report: Optional[ChainReport],
                          tol: float = 1e-11, fd_step: float = 1e-6, samples: int = 120, log=None):
    """Search a start in N_in~^1 whose orbit runs through every set of the chain in order.

    The unknowns are the free exit coordinates of N_in~^1: the x+ offset and
    the seeds of the centre modes c_3, ..., c_n, giving two controls per stage.
    Conditions: x+ = sigma at each N_out^j and y+ = 0 at each N_in^{j+1}.
    Stages are solved in turn (stage k fixes the c_{k+1} seed on the chain
    truncated after N_out^k) and the sweep is repeated until every condition
    holds; the couplings back to earlier stages are weak.
    Newton steps are damped by halving until the residual decreases.
    """
    if chain_report is None or not chain_report.hsets:
        raise PreconditionError("shooting needs a chain report with h-sets")
    rep = chain_report
    q = np.zeros(rep.hsets[1]["in~"].free_dim)
    history = []
    plan = _stage_plan(rep)
    rows = sorted(i for _, r, _ in plan for i in r)
    res, best_q = np.inf, q
    for sweep in range(SWEEPS):
        for unknowns, r, upto in plan:
            q, _ = _newton(rep, q, unknowns, r, upto, tol, fd_step, config.budget, history, log)
        now = float(np.max(np.abs(_residuals(rep, _run_chain(rep, q[None], plan[-1][2]))[0, rows])))
        if log:
            log(f"sweep {sweep}: residual {now:.3e}")
        improved = now < 0.5 * res
        if now < res:
            res, best_q = now, q
        if res < tol or not improved:
            break
    q = best_q
    if res >= STALL_ACCEPT:
        raise SearchFailedError("stage sweeps did not converge", (res, q))
    pts = _run_chain(rep, q[None])
    membership = _stage_membership(rep, pts)
    times, masses, charts, dev = _mass_profile(model, rep, pts, samples)
    diag = {"residual": res, "iterations": len(history), "history": history,
            "membership": membership,
            "entered_all": all(v in (INTERIOR, BOUNDARY_EXIT) for v in membership.values()),
            "max_deviation": dev, "chain_verified": bool(rep.passed), "T": rep.T,
            "sigma": rep.config["sigma"], "peak_last_mode": float(np.max(masses[:, -1])),
            "dominance_order": dominance_order(masses)}
    return ShadowResult(times, masses, charts, q, diag)


def _stage_membership(report, pts):
    """Membership of each chain point in its (uncontracted) set, in order."""
    hs, n = report.hsets, len(report.hsets)
    out = {hs[1]["in~"].name: hs[1]["in~"].membership(pts[0][0])}
    for i, (key, j, _, dst) in enumerate(_stage_maps(n)):
        jj = j if dst == "out" else j + 1
        N = hs[jj][dst]
        out[N.name] = N.membership(pts[i + 1][0])
    return out


def _mass_profile(model, report, pts, samples):
    hs, maps, n = report.hsets, report.maps, len(report.hsets)
    t0, times, masses, charts, dev = 0.0, [], [], [], 0.0
    for i, (key, j, src, _) in enumerate(_stage_maps(n)):
        f = maps[key]
        flow = f.flow
        ts, X = flow.path(pts[i][0], _scale_of(hs[j][src]), samples)
        geo = geometry(model, j)
        dev = max(dev, float(np.max(chain_distance(geo, X))))
        c = geo.to_complex(X)
        m = np.zeros((len(ts), model.n))
        idx = [k - 1 for k in geo.modes]
        m[:, idx] = np.abs(c) ** 2
        m[:, j - 1] = 1.0 - np.sum(np.abs(c) ** 2, axis=1)
        times.append(t0 + ts)
        masses.append(m)
        charts.append(np.full(len(ts), j))
        t0 += flow.tau
    return np.concatenate(times), np.concatenate(masses), np.concatenate(charts), dev


def chain_distance(geo, X):
    """Max-norm distance in chart j from the incoming (y- axis) or outgoing (x+ axis) heteroclinic."""
    X = np.atleast_2d(X)
    best = np.full(len(X), np.inf)
    for name in ("y-", "x+"):
        if name in geo.names():
            rest = np.delete(X, geo.index(name), axis=1)
            best = np.minimum(best, np.max(np.abs(rest), axis=1))
    if not np.all(np.isfinite(best)):
        best = np.max(np.abs(X), axis=1)
    return best


def dominance_order(masses):
    """Modes (1-based) in the order in which they become the largest, without repeats."""
    order = []
    for k in np.argmax(masses, axis=1) + 1:
        if not order or order[-1] != k:
            order.append(int(k))
    return order


def write_mass_csv(path, result: ShadowResult):
    n = result.masses.shape[1]
    rows = np.column_stack([result.times, result.charts, result.masses])
    cols = ["t", "chart"] + [f"mass{k}" for k in range(1, n + 1)]
    tmp = f"{path}.tmp"
    np.savetxt(tmp, rows, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
    os.replace(tmp, path)
