"""Self-contained SVG output: line charts and two-mode phase portraits."""

from __future__ import annotations

import os
from xml.sax.saxutils import escape

import numpy as np

from .chart import ClassificationError, NoStraightLineError, line_directions, quad_params, reduced_field
from .integrate import integrate
from .model import LatticeModel

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")
KIND_COLOR = {"saddle": "#d62728", "attractor": "#2ca02c", "repeller": "#ff7f0e", "center": "#1f77b4",
              "degenerate": "#7f7f7f"}


def _atomic_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _polyline(pts, color, width=1.0, opacity=1.0):
    coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
    return (f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="{width}" '
            f'stroke-opacity="{opacity}"/>')


def _text(x, y, s, size=12, anchor="start"):
    return f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" text-anchor="{anchor}">{escape(s)}</text>'


def _document(width, height, body):
    return (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">\n'
            f'<rect width="{width}" height="{height}" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n")


def line_chart_svg(x, ys, labels, title="", xlabel="", ylabel="", width=720, height=420) -> str:
    """Several series over a shared x axis, with a legend."""
    x = np.asarray(x, dtype=float)
    ys = [np.asarray(y, dtype=float) for y in ys]
    left, right, top, bottom = 60, 130, 40, 50
    pw, ph = width - left - right, height - top - bottom
    x0, x1 = float(x.min()), float(x.max())
    lo = min(float(y.min()) for y in ys)
    hi = max(float(y.max()) for y in ys)
    if hi == lo:
        hi = lo + 1.0
    if x1 == x0:
        x1 = x0 + 1.0

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (hi - v) / (hi - lo) * ph

    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
            _text(width / 2, 24, title, 14, "middle"),
            _text(left + pw / 2, height - 12, xlabel, 12, "middle"),
            f'<text x="16" y="{top + ph / 2:.1f}" font-size="12" text-anchor="middle" '
            f'transform="rotate(-90 16 {top + ph / 2:.1f})">{escape(ylabel)}</text>']
    for v in np.linspace(lo, hi, 5):
        body.append(_text(left - 6, sy(v) + 4, f"{v:.2g}", 10, "end"))
    for v in np.linspace(x0, x1, 6):
        body.append(_text(sx(v), top + ph + 16, f"{v:.3g}", 10, "middle"))
    for i, (y, lab) in enumerate(zip(ys, labels)):
        color = PALETTE[i % len(PALETTE)]
        body.append(_polyline(zip(sx(x), sy(y)), color, 1.6))
        ly = top + 16 + 18 * i
        body.append(_polyline([(left + pw + 12, ly - 4), (left + pw + 36, ly - 4)], color, 2.5))
        body.append(_text(left + pw + 42, ly, lab, 12))
    return _document(width, height, body)


def write_line_chart(path, x, ys, labels, **kw):
    _atomic_text(path, line_chart_svg(x, ys, labels, **kw))


def mass_cascade_svg(path, times, masses, title="mode masses |b_l(t)|^2"):
    labels = [f"|b{k}|^2" for k in range(1, masses.shape[1] + 1)]
    write_line_chart(path, times, masses.T, labels, title=title, xlabel="t", ylabel="mass")


# -- phase portraits of the two-mode restriction ------------------------------------------

def _clipped_field(model, j, k):
    def f(c):
        a = np.abs(c)
        return reduced_field(model, j, k, np.where(a > 1, c / np.where(a > 0, a, 1), c))
    return f


def _real_jacobian(f, c, h=1e-7):
    cols = []
    for d in (h, 1j * h):
        g = (f(c + d) - f(c - d)) / (2 * h)
        cols.append([g.real, g.imag])
    return np.array(cols).T


def classify_equilibrium(J, tol=1e-7) -> str:
    ev = np.linalg.eigvals(J)
    re = ev.real
    if np.all(np.abs(re) <= tol):
        return "center" if np.any(np.abs(ev.imag) > tol) else "degenerate"
    if re.min() < -tol and re.max() > tol:
        return "saddle"
    if re.max() < -tol:
        return "attractor"
    if re.min() > tol:
        return "repeller"
    return "degenerate"


def reduced_equilibria(model: LatticeModel, j: int, k: int, grid: int = 21, tol: float = 1e-12):
    """Equilibria of the two-mode field in the closed unit disk, by Newton from a seed grid."""
    f = _clipped_field(model, j, k)
    g = np.linspace(-0.98, 0.98, grid)
    seeds = (g[:, None] + 1j * g[None, :]).ravel()
    seeds = seeds[np.abs(seeds) < 0.99]
    found = []
    for c in seeds:
        for _ in range(60):
            v = f(c)
            if abs(v) < tol:
                break
            J = _real_jacobian(f, c)
            try:
                dx = np.linalg.solve(J, [-v.real, -v.imag])
            except np.linalg.LinAlgError:
                break
            c = c + dx[0] + 1j * dx[1]
            if abs(c) > 1:
                c = c / abs(c)
        if abs(f(c)) < 1e-10 and abs(c) < 1 - 1e-6:
            if all(abs(c - e) > 1e-6 for e in found):
                found.append(complex(c))
    # a ring of non-isolated equilibria shows up as many hits at one modulus
    rings = {}
    for c in found:
        rings.setdefault(round(abs(c), 6), []).append(c)
    out = []
    for rad, group in sorted(rings.items()):
        if len(group) > 8:
            out.append({"c": None, "radius": rad, "kind": "ring"})
            continue
        for c in sorted(group, key=np.angle):
            out.append({"c": c, "kind": classify_equilibrium(_real_jacobian(f, c))})
    return out + boundary_equilibria(model, j, k)


def boundary_equilibria(model: LatticeModel, j: int, k: int, count: int = 720, gap: float = 1e-8):
    """Limit equilibria on the unit circle, where mode j vanishes.

    The chart is singular on |c| = 1, so these are located as the angles at
    which the field just inside the circle vanishes.  They are the ends of
    the heteroclinic connections and are saddles of the full two-mode flow.
    """
    r = 1.0 - gap
    th = np.linspace(0, 2 * np.pi, count, endpoint=False)
    size = np.abs(reduced_field(model, j, k, r * np.exp(1j * th)))
    step = th[1] - th[0]
    out = []
    for i in np.flatnonzero((size <= np.roll(size, 1)) & (size <= np.roll(size, -1))):
        lo, hi = th[i] - step, th[i] + step
        for _ in range(60):
            m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
            f1, f2 = (abs(reduced_field(model, j, k, np.array([r * np.exp(1j * t)]))[0]) for t in (m1, m2))
            lo, hi = (lo, m2) if f1 < f2 else (m1, hi)
        t = 0.5 * (lo + hi)
        if abs(reduced_field(model, j, k, np.array([r * np.exp(1j * t)]))[0]) < 1e3 * gap:
            out.append({"c": complex(np.exp(1j * t)), "kind": "saddle", "boundary": True})
    return out


def streamlines(model: LatticeModel, j: int, k: int, seeds, duration: float = 6.0):
    """Forward and backward traces (arrays of complex points) from each seed."""
    f = _clipped_field(model, j, k)
    seeds = np.asarray(seeds, dtype=complex)
    traces = []
    for sgn in (1.0, -1.0):
        traj = integrate(lambda c: sgn * f(c), seeds, (0.0, duration), rtol=1e-7, atol=1e-10, bound=None)
        st = traj.states
        for i in range(len(seeds)):
            traces.append(st[:, i])
    return traces


def portrait(model: LatticeModel, j: int, k: int, grid: int = 9, seed: int = 0, duration: float = 6.0):
    """Data for the phase portrait of c = b_k in chart j (other modes zero)."""
    rng = np.random.default_rng(seed)
    g = np.linspace(-0.9, 0.9, grid)
    seeds = (g[:, None] + 1j * g[None, :]).ravel()
    seeds = seeds[np.abs(seeds) < 0.95]
    seeds = seeds + 1e-3 * (rng.uniform(-1, 1, seeds.shape) + 1j * rng.uniform(-1, 1, seeds.shape))
    lines = []
    if abs(j - k) == 1:
        try:
            alpha, a = quad_params(model, j, k)
            lines = [complex(d[0], d[1]) for d in line_directions(alpha, a)]
        except (ClassificationError, NoStraightLineError):
            lines = []
    xs = np.linspace(-1, 1, 2 * grid + 1)
    pts = (xs[:, None] + 1j * xs[None, :]).ravel()
    pts = pts[np.abs(pts) <= 1]
    return {"j": j, "k": k, "equilibria": reduced_equilibria(model, j, k),
            "lines": lines, "traces": streamlines(model, j, k, seeds, duration),
            "samples": pts, "field": reduced_field(model, j, k, pts)}


def portrait_svg(data, size=520) -> str:
    m = 30
    r = (size - 2 * m) / 2
    cx = cy = size / 2

    def p(c):
        c = np.asarray(c)
        return np.column_stack([cx + r * c.real, cy - r * c.imag])

    body = [f'<circle cx="{cx}" cy="{cy}" r="{r}" fill="none" stroke="black"/>',
            _text(cx, 20, f"two-mode portrait: chart {data['j']}, c = b{data['k']}", 14, "middle")]
    for tr in data["traces"]:
        body.append(_polyline(p(tr), "#4a6fa5", 0.8, 0.7))
    for d in data["lines"]:
        body.append(_polyline(p(np.array([-d, d])), "#000000", 1.8))
    for e in data["equilibria"]:
        if e["kind"] == "ring":
            body.append(f'<circle cx="{cx}" cy="{cy}" r="{r * e["radius"]:.2f}" fill="none" '
                        f'stroke="{KIND_COLOR["center"]}" stroke-width="2" stroke-dasharray="4 3"/>')
            continue
        x, y = p(e["c"])[0]
        body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="4" fill="{KIND_COLOR[e["kind"]]}"/>')
    for i, (kind, color) in enumerate(KIND_COLOR.items()):
        body.append(f'<circle cx="{size - 100}" cy="{size - 80 + 14 * i}" r="4" fill="{color}"/>')
        body.append(_text(size - 90, size - 76 + 14 * i, kind, 11))
    return _document(size, size, body)


def write_portrait(svg_path, csv_path, data):
    _atomic_text(svg_path, portrait_svg(data))
    rows = np.column_stack([data["samples"].real, data["samples"].imag,
                            data["field"].real, data["field"].imag])
    tmp = f"{csv_path}.tmp"
    np.savetxt(tmp, rows, delimiter=",", header="re_c,im_c,re_dc,im_dc", comments="", fmt="%.17g")
    os.replace(tmp, csv_path)
