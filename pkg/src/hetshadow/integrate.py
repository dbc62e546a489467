"""Adaptive Dormand-Prince 5(4) integration with dense output and events.

Fields are plain callables ``y -> dy``. States may be real or complex arrays of
any shape, so a batch of initial conditions integrates with one shared step.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import LatticeModel, energy, eval_field, mass

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
UNDERFLOW = 1e-14
EVENT_TOL = 1e-10

_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_B4 = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4
# continuous extension of order 4 (Shampine)
_P = np.array([
    [1, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0, 0, 0, 0],
    [0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])


class StiffnessError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


class NotFoundError(RuntimeError):
    pass


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("HETSHADOW_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    stats: dict = field(default_factory=dict)
    _segments: list = field(default_factory=list, repr=False)

    def __call__(self, t):
        """Dense-output state at time ``t`` (within the integrated span)."""
        if not self._segments:
            raise ValueError("trajectory was integrated without dense output")
        t0s = self.times[:-1]
        sgn = 1.0 if self.times[-1] >= self.times[0] else -1.0
        i = int(np.searchsorted(sgn * t0s, sgn * t, side="right")) - 1
        i = min(max(i, 0), len(self._segments) - 1)
        return _interp(self._segments[i], t)


def _interp(seg, t):
    t0, h, y0, K = seg
    th = (t - t0) / h
    q = _P @ np.array([th, th ** 2, th ** 3, th ** 4])
    return y0 + h * np.tensordot(q, K, axes=(0, 0))


def _rk_step(fun, t, y, f0, h):
    K = np.empty((7,) + y.shape, dtype=np.result_type(y, f0))
    K[0] = f0
    for s in range(1, 7):
        dy = np.tensordot(np.array(_A[s]), K[:s], axes=(0, 0))
        K[s] = fun(y + h * dy)
    y_new = y + h * np.tensordot(_B5[:6], K[:6], axes=(0, 0))
    K[6] = fun(y_new)
    err = h * np.tensordot(_E, K, axes=(0, 0))
    return y_new, err, K


def _initial_step(fun, t0, y0, f0, direction, rtol, atol, span):
    scale = atol + np.abs(y0) * rtol
    d0 = np.sqrt(np.mean(np.abs(y0 / scale) ** 2))
    d1 = np.sqrt(np.mean(np.abs(f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span / 10)
    y1 = y0 + direction * h0 * f0
    f1 = fun(y1)
    d2 = np.sqrt(np.mean(np.abs((f1 - f0) / scale) ** 2)) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, span / 10)


def integrate(fun: Callable, state0, t_span, rtol: float = 1e-10, atol: float = 1e-12,
              dense: bool = False, bound: Optional[float] = 10.0, scale=None,
              monitor: Optional[Callable] = None, max_steps: int = 10_000_000,
              events: Optional[Callable] = None) -> Trajectory:
    """Integrate ``y' = fun(y)`` over ``t_span = (t0, t1)``.

    ``bound`` is the divergence threshold on max |y| (None disables it).
    ``scale`` integrates the exactly rescaled variable ``y / scale``.
    ``atol`` may be an array matching the (scaled) state.
    ``monitor(y)`` returns a dict of scalars whose drift from the start is tracked.
    ``events(y_old, y_new)`` may return True to stop after the current step.
    """
    if rtol <= 0 or np.any(np.asarray(atol) <= 0):
        raise ValueError("tolerances must be positive")
    t0, t1 = float(t_span[0]), float(t_span[1])
    y = np.array(state0, dtype=np.result_type(np.asarray(state0).dtype, float))
    if scale is not None:
        s = np.asarray(scale, dtype=float)
        raw = fun
        fun = lambda w: raw(w * s) / s  # noqa: E731
        y = y / s
    span = abs(t1 - t0)
    direction = 1.0 if t1 >= t0 else -1.0
    times, states, segments = [t0], [y.copy()], []
    stats = {"steps": 0, "rejected": 0, "fev": 0, "scaled": scale is not None}
    if monitor is not None:
        ref = monitor(y * s if scale is not None else y)
        drift = {k: 0.0 for k in ref}
    if span == 0:
        return _finish(times, states, segments, stats, scale)
    calls = [0]

    def f(w):
        calls[0] += 1
        return fun(w)

    f0 = f(y)
    h = _initial_step(f, t0, y, f0, direction, rtol, atol, span)
    h_max = span / 10
    t = t0
    while direction * (t1 - t) > 0:
        if stats["steps"] >= max_steps:
            raise StiffnessError("step budget exhausted")
        if h < UNDERFLOW * span:
            raise StiffnessError(f"step size underflow at t={t:.6g}")
        h = min(h, h_max, abs(t1 - t))
        y_new, err, K = _rk_step(f, t, y, f0, direction * h)
        sc = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        en = float(np.sqrt(np.mean(np.abs(err / sc) ** 2)))
        if not np.isfinite(en):
            en = np.inf
        if en <= 1.0:
            t_new = t + direction * h
            if abs(t1 - t_new) < 1e-14 * max(1.0, abs(t1)):
                t_new = t1
            if dense:
                segments.append((t, direction * h, y.copy(), K.copy()))
            y_phys = y_new * s if scale is not None else y_new
            if bound is not None and np.max(np.abs(y_phys)) > bound:
                raise DivergenceError(f"state left the safety ball at t={t_new:.6g}")
            if monitor is not None:
                vals = monitor(y_phys)
                for k, v in vals.items():
                    drift[k] = max(drift[k], float(np.max(np.abs(v - ref[k]))))
            stop = events is not None and events(y * s if scale is not None else y, y_phys)
            t, y, f0 = t_new, y_new, K[6]
            times.append(t)
            states.append(y.copy())
            stats["steps"] += 1
            fac = MAX_FACTOR if en == 0 else min(MAX_FACTOR, SAFETY * en ** -0.2)
            h = h * fac
            if stop:
                break
        else:
            stats["rejected"] += 1
            h = h * max(MIN_FACTOR, SAFETY * en ** -0.2)
    stats["fev"] = calls[0]
    if monitor is not None:
        stats.update({f"max_{k}_drift": v for k, v in drift.items()})
    return _finish(times, states, segments, stats, scale)


def _finish(times, states, segments, stats, scale):
    st = np.array(states)
    if scale is not None:
        s = np.asarray(scale, dtype=float)
        st = st * s
        segments = [(t0, h, y0 * s, K * s) for (t0, h, y0, K) in segments]
    return Trajectory(np.array(times), st, stats, segments)


def flow_map(fun, state0, T, tol=1e-10, **kw):
    """Endpoint of the flow after time ``T`` (negative ``T`` runs backwards)."""
    kw.setdefault("atol", tol * 1e-2)
    if T == 0:
        return np.array(state0, copy=True)
    traj = integrate(fun, state0, (0.0, T), rtol=tol, **kw)
    return traj.states[-1]


def event_crossing(fun, state0, section, direction: int = 0, horizon: float = 100.0,
                   rtol: float = 1e-11, atol: float = 1e-13, t0: float = 0.0, **kw):
    """First time the scalar ``section(y)`` crosses zero.

    ``section`` may also be a pair ``(index, value)`` meaning ``y[index] - value``.
    ``direction`` > 0 keeps upward crossings only, < 0 downward, 0 both.
    Returns ``(t_star, y_star)`` located by bisection on the dense output.
    """
    if isinstance(section, tuple):
        idx, val = section
        g = lambda y: float(np.real(y[idx]) - val)  # noqa: E731
    else:
        g = section

    def crossed(a, b):
        ga, gb = g(a), g(b)
        if direction > 0:
            return ga < 0 <= gb
        if direction < 0:
            return ga > 0 >= gb
        return (ga < 0 <= gb) or (ga > 0 >= gb)

    traj = integrate(fun, state0, (t0, t0 + horizon), rtol=rtol, atol=atol, dense=True,
                     events=crossed, **kw)
    ys = traj.states
    if len(ys) < 2 or not crossed(ys[-2], ys[-1]):
        raise NotFoundError("section not reached within the horizon")
    seg = traj._segments[-1]
    lo, hi = traj.times[-2], traj.times[-1]
    glo = g(ys[-2])
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        y_mid = _interp(seg, mid)
        gm = g(y_mid)
        if abs(gm) < EVENT_TOL * 1e-2 or hi - lo < 1e-16 * max(1.0, abs(hi)):
            break
        if (gm < 0) == (glo < 0):
            lo, glo = mid, gm
        else:
            hi = mid
    return mid, y_mid


def model_field(model: LatticeModel):
    return lambda b: eval_field(model, b, check=False)


def integrate_model(model: LatticeModel, b0, t_span, rtol=1e-10, atol=1e-12, **kw) -> Trajectory:
    """Ambient integration that tracks mass and (Hamiltonian case) energy drift."""
    ham = not model.dissipative and model.extra is None

    def monitor(b):
        out = {"mass": mass(b)}
        if ham:
            out["energy"] = energy(model, b)
        return out

    return integrate(model_field(model), b0, t_span, rtol=rtol, atol=atol, monitor=monitor, **kw)


def write_trajectory_csv(path, model: LatticeModel, traj: Trajectory):
    n = model.n
    cols = ["t"]
    for k in range(1, n + 1):
        cols += [f"re_b{k}", f"im_b{k}"]
    cols += ["M", "H"]
    b = traj.states
    rows = np.empty((len(traj.times), 2 * n + 3))
    rows[:, 0] = traj.times
    rows[:, 1:2 * n + 1:2] = b.real
    rows[:, 2:2 * n + 1:2] = b.imag
    rows[:, -2] = mass(b)
    rows[:, -1] = energy(model, b)
    _atomic_savetxt(path, rows, cols)


def _atomic_savetxt(path, rows, cols):
    tmp = f"{path}.tmp"
    np.savetxt(tmp, rows, delimiter=",", header=",".join(cols), comments="", fmt="%.17g")
    os.replace(tmp, path)
