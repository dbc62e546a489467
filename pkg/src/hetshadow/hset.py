"""h-sets with product structure and sampled checks of covering relations.

An h-set is a product of balls, one per named block, each block being either
an exit (expanding) or an entry (contracting) direction. Internal coordinates
rescale every block to the unit ball; the set norm is the max over blocks.
Verification is grid sampling with strict margins, which is evidence and
not a proof.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

EXIT = "exit"
ENTRY = "entry"

INTERIOR = "Interior"
BOUNDARY_EXIT = "Boundary(exit)"
BOUNDARY_ENTRY = "Boundary(entry)"
OUTSIDE = "Outside"

BOUNDARY_TOL = 1e-12
MARGIN_MIN = 1e-9
HOMOTOPY_STEPS = (0.25, 0.5, 0.75, 1.0)
JAC_STEP = 1e-4


class DimensionError(ValueError):
    pass


class ContractEntryError(ValueError):
    pass


class OutOfBallError(ValueError):
    pass


class DegreeUndefinedError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Block:
    name: str
    indices: tuple           # ambient coordinate indices
    radius: np.ndarray       # one positive radius per index
    role: str

    @property
    def dim(self):
        return len(self.indices)

    def to_dict(self):
        return {"name": self.name, "indices": list(self.indices),
                "radius": [float(r) for r in self.radius], "role": self.role}


def block(name, indices, radius, role) -> Block:
    if role not in (EXIT, ENTRY):
        raise ValueError(f"unknown block role {role!r}")
    idx = tuple(int(i) for i in np.atleast_1d(indices))
    rad = np.broadcast_to(np.asarray(radius, dtype=float), (len(idx),)).copy()
    if np.any(rad <= 0) or not np.all(np.isfinite(rad)):
        raise ValueError(f"block {name}: radii must be positive and finite")
    return Block(name, idx, rad, role)


class HSet:
    """Product h-set in an ambient real space of dimension ``dim``."""

    def __init__(self, center, blocks: Sequence[Block], name: str = ""):
        self.center = np.array(center, dtype=float)
        self.name = name
        self.blocks = list(blocks)
        used = sorted(i for b in self.blocks for i in b.indices)
        if used != list(range(self.center.size)):
            raise DimensionError("blocks must partition the coordinates")
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError("block names must be unique")

    # shared interface with ContractedHSet
    @property
    def dim(self):
        return self.center.size

    @property
    def fixed(self) -> dict:
        return {}

    @property
    def active_blocks(self):
        return self.blocks

    @property
    def root(self):
        return self

    def get(self, name) -> Block:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    @property
    def exit_blocks(self):
        return [b for b in self.active_blocks if b.role == EXIT]

    @property
    def entry_blocks(self):
        return [b for b in self.active_blocks if b.role == ENTRY]

    @property
    def u(self):
        return sum(b.dim for b in self.exit_blocks)

    @property
    def s(self):
        return sum(b.dim for b in self.entry_blocks)

    def internal(self, p):
        """Internal coordinates of ambient point(s) in the root frame."""
        p = np.asarray(p, dtype=float)
        if p.shape[-1] != self.dim:
            raise DimensionError(f"expected {self.dim} coordinates, got {p.shape[-1]}")
        root = self.root
        q = np.empty_like(p)
        for b in root.blocks:
            q[..., list(b.indices)] = (p[..., list(b.indices)] - root.center[list(b.indices)]) / b.radius
        return q

    def point(self, q):
        """Ambient point(s) from internal coordinates of the active blocks (in block order)."""
        q = np.asarray(q, dtype=float)
        root = self.root
        full = np.zeros(q.shape[:-1] + (self.dim,))
        pos = 0
        for b in self.active_blocks:
            full[..., list(b.indices)] = q[..., pos:pos + b.dim]
            pos += b.dim
        for name, v in self.fixed.items():
            full[..., list(root.get(name).indices)] = v
        p = np.empty_like(full)
        for b in root.blocks:
            idx = list(b.indices)
            p[..., idx] = root.center[idx] + b.radius * full[..., idx]
        return p

    @property
    def free_dim(self):
        return sum(b.dim for b in self.active_blocks)

    def block_norms(self, q, blocks=None):
        blocks = self.active_blocks if blocks is None else blocks
        return {b.name: np.linalg.norm(q[..., list(b.indices)], axis=-1) for b in blocks}

    def slice_residual(self, q):
        res = np.zeros(q.shape[:-1])
        for name, v in self.fixed.items():
            idx = list(self.root.get(name).indices)
            res = np.maximum(res, np.max(np.abs(q[..., idx] - v), axis=-1))
        return res

    def membership(self, p, tol=BOUNDARY_TOL):
        p = np.asarray(p, dtype=float)
        q = self.internal(p)
        if np.any(self.slice_residual(q) > tol):
            return OUTSIDE
        norms = self.block_norms(q)
        if any(n > 1 + tol for n in norms.values()):
            return OUTSIDE
        if any(abs(norms[b.name] - 1) <= tol for b in self.exit_blocks):
            return BOUNDARY_EXIT
        if any(abs(norms[b.name] - 1) <= tol for b in self.entry_blocks):
            return BOUNDARY_ENTRY
        return INTERIOR

    def contains(self, p, tol=BOUNDARY_TOL):
        return self.membership(p, tol) != OUTSIDE

    def max_norm(self, p):
        q = self.internal(p)
        norms = self.block_norms(q)
        return np.max(np.stack(list(norms.values())), axis=0)

    def to_dict(self):
        return {"name": self.name, "center": self.center.tolist(),
                "blocks": [b.to_dict() for b in self.blocks], "u": self.u, "s": self.s}


class ContractedHSet(HSet):
    """Slice of ``parent`` where exit block ``dropped`` is frozen at internal value ``value``."""

    def __init__(self, parent: HSet, dropped: str, value, name: str = ""):
        b = parent.get(dropped) if dropped in [x.name for x in parent.active_blocks] else None
        if b is None:
            raise KeyError(f"{dropped} is not an active block of the parent")
        if b.role != EXIT:
            raise ContractEntryError(f"{dropped} is an entry block and cannot be contracted")
        v = np.broadcast_to(np.asarray(value, dtype=float), (b.dim,)).copy()
        if np.linalg.norm(v) > 1 + BOUNDARY_TOL:
            raise OutOfBallError("contraction value lies outside the unit ball")
        self.parent = parent
        self.dropped = dropped
        self.value = v
        self.name = name or f"R[{dropped}]({parent.name})"

    @property
    def center(self):
        return self.parent.center

    @property
    def blocks(self):
        return self.parent.blocks

    @property
    def root(self):
        return self.parent.root

    @property
    def fixed(self):
        out = dict(self.parent.fixed)
        out[self.dropped] = self.value
        return out

    @property
    def active_blocks(self):
        return [b for b in self.parent.active_blocks if b.name != self.dropped]

    def get(self, name):
        return self.parent.get(name)

    def to_dict(self):
        d = self.parent.to_dict()
        d.update({"name": self.name, "contracted": {"block": self.dropped, "value": self.value.tolist()},
                  "u": self.u, "s": self.s})
        return d


def contract(h: HSet, block_name: str, value, name: str = "") -> ContractedHSet:
    return ContractedHSet(h, block_name, value, name)


def _ball_grid(dim, g):
    """Points of the unit ball: a cube grid with outer points pushed onto the sphere."""
    if dim == 1:
        return np.linspace(-1, 1, g)[:, None]
    pts = np.array(list(itertools.product(np.linspace(-1, 1, g), repeat=dim)))
    nrm = np.linalg.norm(pts, axis=1)
    big = nrm > 1
    pts[big] /= nrm[big, None]
    return np.unique(np.round(pts, 14), axis=0)


def _sphere_grid(dim, g):
    if dim == 1:
        return np.array([[-1.0], [1.0]])
    pts = np.array(list(itertools.product(np.linspace(-1, 1, g), repeat=dim)))
    pts = pts[np.max(np.abs(pts), axis=1) == 1]
    pts /= np.linalg.norm(pts, axis=1)[:, None]
    return np.unique(np.round(pts, 14), axis=0)


def _product(parts):
    grids = np.meshgrid(*[np.arange(len(p)) for p in parts], indexing="ij")
    out = [p[gi.ravel()] for p, gi in zip(parts, grids)]
    return np.concatenate(out, axis=1) if out else np.zeros((1, 0))


def support_grid(h: HSet, g=3):
    return _product([_ball_grid(b.dim, g) for b in h.active_blocks])


def exit_face_grid(h: HSet, g=5):
    """Grid on N^- : for each exit block, that block on its sphere, the rest in the ball."""
    pieces = []
    for e in h.exit_blocks:
        parts = [(_sphere_grid(b.dim, g) if b is e else _ball_grid(b.dim, g)) for b in h.active_blocks]
        pieces.append(_product(parts))
    if not pieces:
        return np.zeros((0, h.free_dim))
    return np.concatenate(pieces)


def _free_slices(h: HSet):
    out, pos = {}, 0
    for b in h.active_blocks:
        out[b.name] = slice(pos, pos + b.dim)
        pos += b.dim
    return out


@dataclass
class CoveringVerdict:
    passed: bool
    entry_margin: float                     # min over samples and homotopy of 1 - max entry norm
    exit_margin: float                      # min over exit-face samples of max exit norm - 1
    exit_block_margins: dict                # per target exit block, min of (norm - 1) on the faces
    w: int
    homotopy: dict                          # t -> (entry_margin, exit_margin)
    dimension_mismatch: bool
    samples: int
    name: str = ""
    message: str = ""

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def check_covering(f: Callable, N: HSet, M: HSet, grid_per_dim: int = 5, interior_grid: int = 3,
                   margin_min: float = MARGIN_MIN, jac_step: float = JAC_STEP,
                   homotopy_steps=HOMOTOPY_STEPS, name: str = "") -> CoveringVerdict:
    """Sampled covering check of N by M under ``f`` (ambient -> ambient, vectorised).

    Entry: every sample of N maps strictly inside M's entry blocks. Exit: every
    sample of N's exit faces maps outside M through an exit block. Both are
    repeated along the straight homotopy from f to its affinization at the
    centre of N. The degree is the sign of the exit Jacobian determinant.
    """
    if N.u != M.u:
        raise ShapeError(f"exit dimensions differ: u(N)={N.u}, u(M)={M.u}")
    mismatch = N.s != M.s
    d = N.free_dim

    def F(q):
        return M.internal(f(N.point(q)))

    q_in = support_grid(N, interior_grid)
    q_face = exit_face_grid(N, grid_per_dim)
    q_all = np.concatenate([np.zeros((1, d)), q_in, q_face])
    E = np.eye(d) * jac_step
    probe = np.concatenate([q_all, E, -E])
    img = F(probe)
    y_all = img[:len(q_all)]
    c0 = y_all[0]
    J = ((img[len(q_all):len(q_all) + d] - img[len(q_all) + d:]) / (2 * jac_step)).T
    # degree from the exit rows / exit columns of the affinisation
    cols = np.concatenate([np.arange(d)[s] for n, s in _free_slices(N).items()
                           if n in [b.name for b in N.exit_blocks]]) if N.u else np.zeros(0, int)
    rows = np.concatenate([list(b.indices) for b in M.exit_blocks]) if M.u else np.zeros(0, int)
    if N.u:
        Ju = J[np.ix_(rows, cols)]
        det = float(np.linalg.det(Ju))
        scale = float(np.prod(np.linalg.norm(Ju, axis=1))) or 1.0
        if abs(det) <= 1e-12 * scale:
            raise DegreeUndefinedError("exit Jacobian block is singular")
        w = 1 if det > 0 else -1
    else:
        w = 1
    affine = c0 + q_all @ J.T
    n_face = len(q_face)
    n_in = len(q_all) - n_face
    hom = {}
    entry_margin, exit_margin = np.inf, np.inf
    block_margins = {b.name: np.inf for b in M.exit_blocks}
    for t in (0.0,) + tuple(homotopy_steps):
        y = (1 - t) * y_all + t * affine
        em = 1.0 - _max_norm(M, y, M.entry_blocks)
        xm = _max_norm(M, y[n_in:], M.exit_blocks) - 1.0 if n_face else np.array([np.inf])
        e_min = float(np.min(em)) if em.size else np.inf
        x_min = float(np.min(xm)) if xm.size else np.inf
        hom[float(t)] = (e_min, x_min)
        entry_margin = min(entry_margin, e_min)
        exit_margin = min(exit_margin, x_min)
        if t == 0.0 and n_face:
            for b in M.exit_blocks:
                bn = np.linalg.norm(y[n_in:, list(b.indices)], axis=-1) - 1.0
                block_margins[b.name] = float(np.min(bn))
    passed = entry_margin > margin_min and exit_margin > margin_min
    msg = "" if passed else ("entry" if entry_margin <= margin_min else "exit") + " condition fails"
    return CoveringVerdict(bool(passed), float(entry_margin), float(exit_margin), block_margins, w,
                           hom, bool(mismatch), int(len(q_all)), name, msg)


def _max_norm(M, q, blocks):
    if not blocks:
        return np.full(q.shape[0], -np.inf) if q.ndim > 1 else np.array([-np.inf])
    return np.max(np.stack([np.linalg.norm(q[..., list(b.indices)], axis=-1) for b in blocks]), axis=0)


@dataclass
class Link:
    source: HSet
    map: Callable
    target: HSet
    name: str = ""


@dataclass
class ChainVerdict:
    passed: bool
    verdicts: list = field(default_factory=list)
    failed: list = field(default_factory=list)

    def to_dict(self):
        return {"passed": self.passed, "failed": self.failed,
                "links": [v.to_dict() for v in self.verdicts]}


def _descends(h: HSet, target: HSet) -> bool:
    while True:
        if h is target:
            return True
        if not isinstance(h, ContractedHSet):
            return False
        h = h.parent


def check_chain(links: Sequence[Link], **kw) -> ChainVerdict:
    """Verify every link; consecutive links must share the set, possibly contracted."""
    for a, b in zip(links, links[1:]):
        if not _descends(b.source, a.target):
            raise ShapeError(f"link {b.name or '?'} does not start from the previous target")
    verdicts, failed = [], []
    for i, link in enumerate(links):
        v = check_covering(link.map, link.source, link.target, name=link.name or f"link{i}", **kw)
        verdicts.append(v)
        if not v.passed:
            failed.append(v.name)
    return ChainVerdict(not failed, verdicts, failed)


def to_json(obj) -> str:
    return json.dumps(obj.to_dict(), indent=2, default=_default)


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(type(o).__name__)
