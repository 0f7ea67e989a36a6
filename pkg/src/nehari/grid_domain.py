"""Discrete geometry of multi-chamber domains.

Node-centred finite differences on a uniform grid.  Arrays are indexed
``[iy, ix]`` in two dimensions (rows are y), and every quantity is
dimension-generic so that one-dimensional oracles can be run through the
same code path.  Integrals are nodal sums times ``h**ndim``; the squared
gradient norm is ``f @ A @ f`` with the stiffness matrix ``A`` built from
grid edges (Dirichlet data enter as zero ghost values).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .errors import (
    CutoffOverlapError,
    EstimationError,
    GeometryError,
    PreconditionError,
    ResolutionError,
)

POWER_MAX_ITER = 10_000
POWER_TOL = 1e-10
ASCENT_TOL = 1e-13


@dataclass(frozen=True)
class Channel:
    """A channel box in node indices, oriented along array axis ``axis``."""

    lo: tuple
    hi: tuple
    axis: int
    ends: tuple  # (chamber at the low end, chamber at the high end)

    @property
    def length_cells(self):
        return self.hi[self.axis] - self.lo[self.axis]


@dataclass(eq=False)
class GridDomain:
    h: float
    interior: np.ndarray
    label: np.ndarray
    n_chambers: int
    origin: tuple = (0.0, 0.0)
    chamber_boxes: tuple = ()
    channels: tuple = ()
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.interior = np.asarray(self.interior, dtype=bool)
        self.label = np.asarray(self.label, dtype=int)
        self.interior.flags.writeable = False
        self.label.flags.writeable = False
        if self.h <= 0:
            raise ResolutionError(f"grid spacing must be positive, got {self.h}")
        self._validate()

    @classmethod
    def from_mask(cls, interior, h, label=None, n_chambers=1, origin=None):
        """Domain from an explicit interior mask; every interior node is chamber 1
        unless ``label`` is given."""
        interior = np.asarray(interior, dtype=bool)
        if label is None:
            label = np.where(interior, 1, -1)
        if origin is None:
            origin = (0.0,) * interior.ndim
        return cls(float(h), interior, label, n_chambers, tuple(origin))

    # -- shape helpers --------------------------------------------------
    @property
    def shape(self):
        return self.interior.shape

    @property
    def ndim(self):
        return self.interior.ndim

    @property
    def nx(self):
        return self.shape[-1]

    @property
    def ny(self):
        return self.shape[0] if self.ndim > 1 else 1

    @property
    def cell_volume(self):
        return self.h ** self.ndim

    @cached_property
    def idx(self):
        return np.flatnonzero(self.interior)

    @property
    def n_unknowns(self):
        return self.idx.size

    def restrict(self, f):
        """Interior values of a grid (or stack of grids) as a flat array."""
        f = np.asarray(f, dtype=float)
        lead = f.shape[: f.ndim - self.ndim]
        return f.reshape(lead + (-1,))[..., self.idx]

    def extend(self, v):
        """Inverse of :meth:`restrict`; non-interior nodes are zero."""
        v = np.asarray(v)
        lead = v.shape[:-1]
        out = np.zeros(lead + (int(np.prod(self.shape)),), dtype=v.dtype)
        out[..., self.idx] = v
        return out.reshape(lead + self.shape)

    # -- operators ------------------------------------------------------
    @cached_property
    def stiffness(self):
        """Stiffness matrix on interior unknowns, ``a(f, g) = f @ A @ g``."""
        return _edge_stiffness(np.ones(self.shape, dtype=bool), self.interior, self.h)

    @cached_property
    def _lu(self):
        return spla.splu(self.stiffness.tocsc())

    def solve(self, rhs):
        """Solve ``A x = rhs`` for one or several right-hand sides (leading axes)."""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.ndim == 1:
            return self._lu.solve(rhs)
        flat = rhs.reshape(-1, rhs.shape[-1])
        out = self._lu.solve(np.ascontiguousarray(flat.T)).T
        return out.reshape(rhs.shape)

    def closure(self, l):
        """Nodes of the closed chamber ``l`` (its open nodes plus the boundary ring)."""
        if self.chamber_boxes:
            lo, hi = self.chamber_boxes[l - 1]
            mask = np.zeros(self.shape, dtype=bool)
            mask[tuple(slice(a, b + 1) for a, b in zip(lo, hi))] = True
            return mask
        struct = ndimage.generate_binary_structure(self.ndim, self.ndim)
        return ndimage.binary_dilation(self.label == l, structure=struct)

    def local_energy(self, f, mask):
        """``∫|∇f|²`` over grid edges with both endpoints in ``mask``."""
        f = np.asarray(f, dtype=float)
        total = 0.0
        for ax in range(self.ndim):
            a = [slice(None)] * self.ndim
            b = [slice(None)] * self.ndim
            a[ax] = slice(0, -1)
            b[ax] = slice(1, None)
            a, b = tuple(a), tuple(b)
            both = mask[a] & mask[b]
            diff = f[a] - f[b]
            total += float(np.sum(diff[both] ** 2))
        return total * self.h ** (self.ndim - 2)

    # -- validation -----------------------------------------------------
    def _validate(self):
        if self.interior.shape != self.label.shape:
            raise GeometryError("interior and label grids differ in shape")
        if not self.interior.any():
            raise GeometryError("domain has no interior nodes")
        border = np.ones(self.shape, dtype=bool)
        border[tuple(slice(1, -1) for _ in range(self.ndim))] = False
        if np.any(self.interior & border):
            raise GeometryError("interior nodes on the array border")
        if np.any((self.label >= 0) != self.interior):
            raise GeometryError("labels must be >= 0 exactly on interior nodes")
        struct = ndimage.generate_binary_structure(self.ndim, 1)
        _, ncomp = ndimage.label(self.interior, structure=struct)
        if ncomp != 1:
            raise GeometryError(f"interior is not connected ({ncomp} components)")
        for ax in range(self.ndim):
            a = [slice(None)] * self.ndim
            b = [slice(None)] * self.ndim
            a[ax] = slice(0, -1)
            b[ax] = slice(1, None)
            la, lb = self.label[tuple(a)], self.label[tuple(b)]
            if np.any((la >= 1) & (lb >= 1) & (la != lb)):
                raise GeometryError("distinct chambers are grid neighbours")


def _edge_stiffness(closed, active, h, order=None):
    """Graph stiffness over edges with both ends in ``closed``; inactive nodes are 0.

    Returns the matrix on the active nodes (in flat order, or ``order`` if given).
    """
    ndim = closed.ndim
    flat_active = np.flatnonzero(active) if order is None else order
    pos = -np.ones(closed.size, dtype=np.int64)
    pos[flat_active] = np.arange(flat_active.size)
    pos = pos.reshape(closed.shape)
    n = flat_active.size
    rows, cols, vals = [], [], []
    diag = np.zeros(n)
    for ax in range(ndim):
        a = [slice(None)] * ndim
        b = [slice(None)] * ndim
        a[ax] = slice(0, -1)
        b[ax] = slice(1, None)
        a, b = tuple(a), tuple(b)
        edge = closed[a] & closed[b]
        pa, pb = pos[a][edge], pos[b][edge]
        np.add.at(diag, pa[pa >= 0], 1.0)
        np.add.at(diag, pb[pb >= 0], 1.0)
        both = (pa >= 0) & (pb >= 0)
        rows += [pa[both], pb[both]]
        cols += [pb[both], pa[both]]
        vals += [-np.ones(both.sum())] * 2
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return (mat * h ** (ndim - 2)).tocsr()


# ---------------------------------------------------------------------------
# construction


def _to_cells(value, h, what, snap):
    q = Fraction(value).limit_denominator(10**9) / Fraction(h).limit_denominator(10**9)
    if q.denominator == 1:
        return int(q)
    if snap:
        return math.floor(q + Fraction(1, 2))
    raise ResolutionError(f"{what} coordinate {value} is not a multiple of h={h}")


def build_dumbbell(chamber_rects: Sequence, channel_rects: Sequence, h) -> GridDomain:
    """Grid for a union of axis-aligned chambers joined by channels.

    Rectangles are ``(x0, y0, x1, y1)``.  Chamber edges must be multiples of
    ``h``; channel edges are snapped to the nearest grid line, so a channel of
    width 0.1 at ``h = 1/32`` is represented by four cells.
    """
    if not chamber_rects:
        raise GeometryError("at least one chamber is required")
    hf = float(h)
    xs = [r[0] for r in list(chamber_rects) + list(channel_rects)]
    ys = [r[1] for r in list(chamber_rects) + list(channel_rects)]
    x0, y0 = min(xs), min(ys)

    def cells(rect, what, snap):
        r = [_to_cells(rect[0] - x0, h, what, snap), _to_cells(rect[1] - y0, h, what, snap),
             _to_cells(rect[2] - x0, h, what, snap), _to_cells(rect[3] - y0, h, what, snap)]
        if r[2] <= r[0] or r[3] <= r[1]:
            raise ResolutionError(f"{what} {tuple(rect)} has no cell at h={h}")
        return r

    chambers = [cells(r, "chamber", snap=False) for r in chamber_rects]
    channels = [cells(r, "channel", snap=True) for r in channel_rects]
    for a in range(len(chambers)):
        for b in range(a + 1, len(chambers)):
            ra, rb = chambers[a], chambers[b]
            if ra[0] <= rb[2] and rb[0] <= ra[2] and ra[1] <= rb[3] and rb[1] <= ra[3]:
                raise GeometryError(f"chambers {a + 1} and {b + 1} overlap or touch")

    ncx = max(r[2] for r in chambers + channels)
    ncy = max(r[3] for r in chambers + channels)
    covered = np.zeros((ncy, ncx), dtype=bool)
    for r in chambers + channels:
        covered[r[1]:r[3], r[0]:r[2]] = True
    padded = np.pad(covered, 1)
    # a node is interior iff its four incident cells are covered
    interior = padded[:-1, :-1] & padded[1:, :-1] & padded[:-1, 1:] & padded[1:, 1:]

    label = np.where(interior, 0, -1)
    boxes = []
    for l, r in enumerate(chambers, start=1):
        label[r[1] + 1:r[3], r[0] + 1:r[2]] = l
        boxes.append(((r[1], r[0]), (r[3], r[2])))

    chans = []
    for r in channels:
        chans.append(_orient_channel(r, chambers))

    return GridDomain(hf, interior, label, len(chambers), (float(x0), float(y0)),
                      tuple(boxes), tuple(chans))


def _orient_channel(r, chambers):
    # try the x axis (array axis 1), then y (array axis 0)
    for arr_axis, (lo_i, hi_i, clo, chi) in ((1, (0, 2, 1, 3)), (0, (1, 3, 0, 2))):
        low = high = None
        for l, c in enumerate(chambers, start=1):
            cross_overlap = c[clo] <= r[clo] and r[chi] <= c[chi]
            if not cross_overlap:
                continue
            if c[hi_i] == r[lo_i]:
                low = l
            if c[lo_i] == r[hi_i]:
                high = l
        if low is not None and high is not None:
            return Channel((r[1], r[0]), (r[3], r[2]), arr_axis, (low, high))
    raise GeometryError(f"channel {r} does not join two chambers end to end")


# ---------------------------------------------------------------------------
# Laplacian


def apply_laplacian(dom: GridDomain, f) -> np.ndarray:
    """Five-point ``-Δf`` at interior nodes (zero elsewhere); exterior values count as 0."""
    v = dom.restrict(f)
    return dom.extend((dom.stiffness @ v.T).T / dom.cell_volume)


# ---------------------------------------------------------------------------
# cutoffs


@dataclass(frozen=True, eq=False)
class CutoffFamily:
    eta: np.ndarray      # (n, *shape)
    grad_sq: np.ndarray  # (n, *shape)


def build_cutoffs(dom: GridDomain, ramp_width: float) -> CutoffFamily:
    """``η_l = 1`` on the closed chamber ``l``, cosine ramp ``cos²(πd/2w)`` into
    each attached channel, 0 beyond distance ``w``."""
    if ramp_width <= 0:
        raise PreconditionError("ramp_width must be positive")
    n = dom.n_chambers
    eta = np.zeros((n,) + dom.shape)
    for l in range(1, n + 1):
        eta[l - 1][dom.closure(l)] = 1.0
    for ch in dom.channels:
        length = ch.length_cells * dom.h
        if not ramp_width < length / 2:
            raise CutoffOverlapError(
                f"ramp width {ramp_width} is not below half the channel length {length}")
        box = tuple(slice(a, b + 1) for a, b in zip(ch.lo, ch.hi))
        steps = np.arange(ch.hi[ch.axis] - ch.lo[ch.axis] + 1) * dom.h
        shape = [1] * dom.ndim
        shape[ch.axis] = -1
        for l, dist in ((ch.ends[0], steps), (ch.ends[1], steps[::-1])):
            ramp = np.where(dist < ramp_width, np.cos(np.pi * dist / (2 * ramp_width)) ** 2, 0.0)
            view = eta[l - 1][box]
            np.maximum(view, ramp.reshape(shape), out=view)
    grad_sq = np.zeros_like(eta)
    for ax in range(dom.ndim):
        d = np.diff(eta, axis=ax + 1) / dom.h
        pad = [(0, 0)] * (dom.ndim + 1)
        pad[ax + 1] = (0, 1)
        grad_sq += np.pad(d, pad) ** 2
    # fields vanish off the interior, so jumps along the exterior ring carry no weight
    grad_sq *= dom.interior
    cuts = CutoffFamily(eta, grad_sq)
    prod = eta[:, None] * eta[None, :]
    off = ~np.eye(n, dtype=bool)
    if np.any(prod[off] != 0):
        raise CutoffOverlapError("cutoff supports intersect")
    return cuts


# ---------------------------------------------------------------------------
# constants


def estimate_c_eta(dom: GridDomain, cuts: CutoffFamily, max_iter=POWER_MAX_ITER,
                   tol=POWER_TOL) -> float:
    """Largest ``∫w_l φ² / ∫|∇φ|²`` over ``l``, with ``w_l = |∇η_l|²``.

    Power iteration on ``A⁻¹ W``, started from the constant vector (the top
    eigenvector is positive, so the start is never deficient).
    """
    best = 0.0
    vol = dom.cell_volume
    A = dom.stiffness
    for l in range(cuts.grad_sq.shape[0]):
        w = vol * dom.restrict(cuts.grad_sq[l])
        if not np.any(w):
            continue
        phi = np.ones(dom.n_unknowns)
        q_old = None
        for _ in range(max_iter):
            y = dom.solve(w * phi)
            q = float(y @ (w * y)) / float(y @ (A @ y))
            phi = y / np.sqrt(y @ (A @ y))
            if q_old is not None and abs(q - q_old) <= tol * q:
                break
            q_old = q
        else:
            raise EstimationError("C_eta power iteration did not converge",
                                  dom.extend(phi), q)
        best = max(best, q)
    return best


def chamber_faces(dom: GridDomain, l: int):
    """Faces ``(axis, side)`` of chamber ``l``, split into (free, dirichlet).

    A face is free when it meets a channel (some face node is interior)."""
    lo, hi = dom.chamber_boxes[l - 1] if dom.chamber_boxes else _bbox(dom.closure(l))
    free, dirichlet = set(), set()
    box = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    for ax in range(dom.ndim):
        for side, coord in ((0, lo[ax]), (1, hi[ax])):
            sel = list(box)
            sel[ax] = coord
            if np.any(dom.interior[tuple(sel)]):
                free.add((ax, side))
            else:
                dirichlet.add((ax, side))
    return free, dirichlet


def _bbox(mask):
    where = np.nonzero(mask)
    return tuple(int(w.min()) for w in where), tuple(int(w.max()) for w in where)


def _region_masks(dom, region, dirichlet_faces):
    if region == "omega":
        struct = ndimage.generate_binary_structure(dom.ndim, dom.ndim)
        closed = ndimage.binary_dilation(dom.interior, structure=struct)
        return closed, dom.interior.copy()
    if region == "B":
        closed = np.ones(dom.shape, dtype=bool)
        active = np.zeros(dom.shape, dtype=bool)
        active[tuple(slice(1, -1) for _ in range(dom.ndim))] = True
        return closed, active
    l = int(region)
    if not 1 <= l <= dom.n_chambers:
        raise PreconditionError(f"unknown region {region!r}")
    closed = dom.closure(l)
    if dirichlet_faces is None:
        dirichlet_faces = chamber_faces(dom, l)[1]
    if not dirichlet_faces:
        raise PreconditionError("at least one Dirichlet face is required")
    lo, hi = _bbox(closed)
    active = closed.copy()
    for ax, side in dirichlet_faces:
        sel = [slice(None)] * dom.ndim
        sel[ax] = lo[ax] if side == 0 else hi[ax]
        active[tuple(sel)] = False
    return closed, active


def estimate_sobolev(dom: GridDomain, region, dirichlet_faces=None, p=4.0, seed=0,
                     max_iter=POWER_MAX_ITER, tol=ASCENT_TOL) -> float:
    """Estimate ``sup ‖φ‖_p / ‖∇φ‖₂`` over discrete ``φ`` living in ``region``.

    ``region`` is a chamber index (mixed boundary: zero only on
    ``dirichlet_faces``, by default the faces away from channels), ``"omega"``
    (the whole domain) or ``"B"`` (the grid bounding box).  Uses the monotone
    ascent ``φ ← A⁻¹ φ^{p-1}`` (normalised) from a seeded positive random start.
    """
    if not p > 2:
        raise PreconditionError("p must exceed 2")
    faces = None if dirichlet_faces is None else frozenset(dirichlet_faces)
    key = ("sobolev", region, faces, float(p), seed)
    if key in dom._cache:
        return dom._cache[key]
    closed, active = _region_masks(dom, region, faces)
    if not active.any():
        raise PreconditionError("region has no free nodes")
    A = _edge_stiffness(closed, active, dom.h)
    lu = spla.splu(A.tocsc())
    vol = dom.cell_volume
    rng = np.random.default_rng(seed)
    phi = np.abs(rng.standard_normal(int(active.sum()))) + 0.1
    phi /= np.sqrt(phi @ (A @ phi))
    q_old = (vol * np.sum(phi ** p)) ** (1 / p)
    for _ in range(max_iter):
        y = lu.solve(phi ** (p - 1))
        phi = y / np.sqrt(y @ (A @ y))
        q = (vol * np.sum(phi ** p)) ** (1 / p)
        if abs(q - q_old) <= tol * q:
            break
        q_old = q
    else:
        raise EstimationError("Sobolev ascent stagnated before tolerance", phi, q)
    dom._cache[key] = q
    return q


def bump_threshold(c_f: float, c_s: float, p: float) -> float:
    """``r = ((p/2) C_F C_S^p)^(-1/(p-2))``."""
    return ((p / 2) * c_f * c_s ** p) ** (-1.0 / (p - 2))


@dataclass
class DomainConstants:
    c_eta: float
    c_sob: dict
    d_measure: float
    r: tuple
    R: float
    p: float
    c_f: float
    delta: float
    g_norm_sq: float
    g_energy: float

    def to_record(self) -> str:
        from .records import fmt

        lines = [f"c_eta = {fmt(self.c_eta)}", f"d_measure = {fmt(self.d_measure)}"]
        for (region, p), val in sorted(self.c_sob.items(), key=lambda kv: str(kv[0])):
            lines.append(f"c_sob[{region},{fmt(p)}] = {fmt(val)}")
        for l, r in enumerate(self.r, start=1):
            lines.append(f"r[{l}] = {fmt(r)}")
        lines += [f"R = {fmt(self.R)}", f"p = {fmt(self.p)}", f"c_f = {fmt(self.c_f)}",
                  f"delta = {fmt(self.delta)}", f"g_norm_sq = {fmt(self.g_norm_sq)}",
                  f"g_energy = {fmt(self.g_energy)}"]
        return "\n".join(lines) + "\n"


def compute_constants(dom: GridDomain, cuts: Optional[CutoffFamily], pot, g, seed=0,
                      c_eta: Optional[float] = None) -> DomainConstants:
    """All domain constants for the multi-bump construction with initializer ``g``."""
    from .energy import energy

    g = np.asarray(g, dtype=float)
    G = dom.restrict(g)
    norm_sq = float(np.einsum("im,im->", G, (dom.stiffness @ G.T).T))
    if not norm_sq > 0:
        raise PreconditionError("initializer g must be nontrivial")
    p = pot.p
    if c_eta is None:
        c_eta = estimate_c_eta(dom, cuts) if cuts is not None else 0.0
    c_sob = {}
    for l in range(1, dom.n_chambers + 1):
        c_sob[(l, p)] = estimate_sobolev(dom, l, None, p, seed)
    c_sob[("omega", p)] = estimate_sobolev(dom, "omega", None, p, seed)
    c_sob[("B", p)] = estimate_sobolev(dom, "B", None, p, seed)
    r = tuple(bump_threshold(pot.c_f, c_sob[(l, p)], p) for l in range(1, dom.n_chambers + 1))
    j_g = energy(dom, pot, g)
    d = pot.delta
    R = math.sqrt(max(norm_sq, (4 + 2 * d) / d * j_g) + 1.0)
    d_measure = int(np.count_nonzero(dom.label == 0)) * dom.cell_volume
    return DomainConstants(c_eta, c_sob, d_measure, r, R, p, pot.c_f, d, norm_sq, j_g)
