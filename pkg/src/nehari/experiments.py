"""Subdomain ground states, the multi-bump initializer and the multiplicity sweep."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .constraint import (
    ConstraintSpec,
    bump_sizes,
    coercivity_check,
    signature_matrix,
)
from .energy import Potential, check_assumptions
from .errors import NehariError, PreconditionError, SolveError
from .grid_domain import (
    GridDomain,
    build_cutoffs,
    compute_constants,
    estimate_c_eta,
)
from .solver import CONVERGED, SolverConfig, lower_bound_check, minimize

log = logging.getLogger(__name__)

DISTINCT_TOL = 1e-3
RETRY_PERTURBATION = 1e-2


def chamber_domain(dom: GridDomain, l: int) -> GridDomain:
    """The open chamber ``l`` as a standalone Dirichlet domain on the same array."""
    inside = dom.label == l
    return GridDomain.from_mask(inside, dom.h, np.where(inside, 1, -1), 1, dom.origin)


def initial_guess(dom: GridDomain, k: int) -> np.ndarray:
    """Positive start: the torsion function, tilted differently per component so
    that competing components are never proportional."""
    tau = dom.extend(dom.solve(np.ones(dom.n_unknowns)))
    if k == 1:
        return tau[None]
    coords = np.indices(dom.shape).astype(float)
    out = np.empty((k,) + dom.shape)
    pts = coords[:, dom.interior]
    centred = []
    for ax in range(dom.ndim):
        lo, hi = pts[ax].min(), pts[ax].max()
        span = max(hi - lo, 1.0)
        centred.append((coords[ax] - 0.5 * (lo + hi)) / (0.5 * span))
    x = centred[-1]
    y = centred[0] if dom.ndim > 1 else np.zeros_like(x)
    for j in range(k):
        theta = 2 * np.pi * j / k
        out[j] = tau * (1.0 + 0.8 * (np.cos(theta) * x + np.sin(theta) * y))
    return np.clip(out, 0.0, None)


def subdomain_ground_state(dom: GridDomain, pot: Potential, l: int, I, cfg=None):
    """Ground state of the reduced system on chamber ``l`` for components ``I``
    (1-based), extended by zero to the whole domain."""
    I = sorted(int(i) for i in I)
    if not I:
        raise PreconditionError("component set I must be nonempty")
    sub = chamber_domain(dom, l)
    red = pot.restrict([i - 1 for i in I])
    spec = ConstraintSpec.ground_state(len(I))
    u, rep = minimize(sub, red, spec, None, initial_guess(sub, len(I)), cfg)
    if rep.status != CONVERGED:
        raise SolveError(f"ground state on chamber {l} for I={I}: {rep.status}", rep)
    full = np.zeros((pot.k,) + dom.shape)
    for j, i in enumerate(I):
        full[i - 1] = u[j]
    return full


def build_initializer(dom: GridDomain, pot: Potential, L, cfg=None, cache=None):
    """Sum over chambers of the ground states for ``{i : l ∈ L_i}``."""
    for Li in L:
        if not Li:
            raise PreconditionError("every L_i must be nonempty")
    g = np.zeros((pot.k,) + dom.shape)
    for l in range(1, dom.n_chambers + 1):
        I = tuple(i + 1 for i, Li in enumerate(L) if l in Li)
        if not I:
            continue
        key = (l, I)
        if cache is not None and key in cache:
            part = cache[key]
        else:
            part = subdomain_ground_state(dom, pot, l, I, cfg)
            if cache is not None:
                cache[key] = part
        g += part
    return g


def bump_signature(dom, consts, u) -> np.ndarray:
    return bump_sizes(dom, u) > (np.asarray(consts.r) ** 2)[None, :]


def localization_report(dom, consts, u, target=None) -> dict:
    """Bump sizes against ``r_l²`` and the gap between the small and large ones."""
    bumps = bump_sizes(dom, u)
    r2 = np.asarray(consts.r) ** 2
    ratio = bumps / r2[None, :]
    large = ratio > 1
    out = {
        "bumps": bumps,
        "r2": r2,
        "ratio": ratio,
        "large": large,
        "min_large_ratio": float(ratio[large].min()) if large.any() else None,
        "max_small_ratio": float(ratio[~large].max()) if (~large).any() else None,
        "max_small_bump": float(bumps[~large].max()) if (~large).any() else None,
        "min_large_bump": float(bumps[large].min()) if large.any() else None,
    }
    out["separated"] = (out["max_small_ratio"] is None or out["min_large_ratio"] is None
                        or out["max_small_ratio"] < out["min_large_ratio"])
    if target is not None:
        out["matches_target"] = bool(np.array_equal(large, np.asarray(target)))
    return out


def all_choices(n: int, k: int):
    """Every ``(L_1, …, L_k)`` with nonempty ``L_i ⊂ {1..n}``, in a fixed order."""
    subsets = [frozenset(c) for size in range(1, n + 1)
               for c in itertools.combinations(range(1, n + 1), size)]
    return list(itertools.product(subsets, repeat=k))


@dataclass
class Entry:
    L: tuple
    status: str
    energy: float
    signature: Optional[np.ndarray]
    target: np.ndarray
    matches: bool
    positive: bool
    retried: bool
    u: Optional[np.ndarray] = None
    report: object = None
    consts: object = None
    localization: Optional[dict] = None
    coercivity: Optional[dict] = None
    lower_bound: Optional[dict] = None
    message: str = ""

    @property
    def key(self):
        return ";".join("".join(str(l) for l in sorted(Li)) for Li in self.L)

    @property
    def counted(self):
        return self.status == CONVERGED and self.matches


@dataclass
class MultiplicityResult:
    entries: list
    count: int
    expected: int
    distances: np.ndarray
    c_eta: float
    surrogate: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def summary(self):
        gaps = [e.localization for e in self.entries if e.counted and e.localization]
        small = [g["max_small_ratio"] for g in gaps if g["max_small_ratio"] is not None]
        large = [g["min_large_ratio"] for g in gaps if g["min_large_ratio"] is not None]
        small_b = [g["max_small_bump"] for g in gaps if g["max_small_bump"] is not None]
        return {
            "count": self.count,
            "expected": self.expected,
            "attempted": len(self.entries),
            "converged": sum(e.status == CONVERGED for e in self.entries),
            "matching": sum(e.counted for e in self.entries),
            "c_eta": self.c_eta,
            "max_small_ratio": max(small) if small else None,
            "min_large_ratio": min(large) if large else None,
            "max_small_bump": max(small_b) if small_b else None,
            "gap_nonempty": bool(small and large and max(small) < min(large))
                            or bool(large and not small),
        }


def _l2(dom, a, b=None):
    x = dom.restrict(a if b is None else a - b)
    return float(np.sqrt(dom.cell_volume * np.sum(x * x)))


def _run_entry(dom, pot, cuts, L, g, consts, cfg, seed, index):
    target = signature_matrix(L, dom.n_chambers)
    spec = ConstraintSpec.multi_bump(dom, L, cuts)
    retried = False
    start = g
    for attempt in range(2):
        try:
            u, rep = minimize(dom, pot, spec, consts, start, cfg)
        except NehariError as exc:  # degenerate generators and similar
            u, rep = None, None
            msg = f"{type(exc).__name__}: {exc}"
        else:
            msg = rep.message
        ok = rep is not None and rep.status == CONVERGED
        sig = bump_signature(dom, consts, u) if u is not None else None
        if ok and np.array_equal(sig, target):
            break
        if attempt == 0:
            retried = True
            rng = np.random.default_rng([seed, index])
            start = np.clip(g * (1 + RETRY_PERTURBATION * rng.standard_normal(g.shape)), 0, None)
    status = rep.status if rep is not None else "Error"
    entry = Entry(tuple(L), status, rep.energy if rep is not None else float("nan"), sig,
                  target, bool(sig is not None and np.array_equal(sig, target)),
                  False, retried, u, rep, consts, message=msg)
    if u is not None:
        U = dom.restrict(u)
        entry.positive = bool(np.all(U > 0))
        entry.localization = localization_report(dom, consts, u, target)
        if rep.status == CONVERGED:
            entry.coercivity = coercivity_check(dom, pot, spec, u, trials=50, seed=seed)
            entry.lower_bound = lower_bound_check(dom, pot, u, consts.c_sob[("omega", pot.p)])
    return entry


def run_multiplicity(dom: GridDomain, pot: Potential, cfg: Optional[SolverConfig] = None,
                     ramp_width: Optional[float] = None, cuts=None,
                     distinct_tol=DISTINCT_TOL, seed=0, workers=1,
                     choices=None) -> MultiplicityResult:
    """Solve the multi-bump problem for every admissible ``(L_1, …, L_k)``."""
    cfg = cfg or SolverConfig(seed=seed)
    if cuts is None:
        if ramp_width is None:
            raise PreconditionError("either cuts or ramp_width is required")
        cuts = build_cutoffs(dom, ramp_width)
    c_eta = estimate_c_eta(dom, cuts)
    choices = all_choices(dom.n_chambers, pot.k) if choices is None else choices
    cache = {}
    prepared = []
    for idx, L in enumerate(choices):
        try:
            g = build_initializer(dom, pot, L, cfg, cache)
            consts = compute_constants(dom, cuts, pot, g, seed, c_eta=c_eta)
            prepared.append((idx, L, g, consts, None))
        except NehariError as exc:
            prepared.append((idx, L, None, None, f"{type(exc).__name__}: {exc}"))

    def work(item):
        idx, L, g, consts, err = item
        if err is not None:
            return Entry(tuple(L), "InitFailed", float("nan"), None,
                         signature_matrix(L, dom.n_chambers), False, False, False, message=err)
        return _run_entry(dom, pot, cuts, L, g, consts, cfg, seed, idx)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(work, prepared))
    else:
        entries = [work(item) for item in prepared]

    n = len(entries)
    dist = np.full((n, n), np.nan)
    for a in range(n):
        for b in range(n):
            ua, ub = entries[a].u, entries[b].u
            if ua is None or ub is None:
                continue
            scale = max(_l2(dom, ua), _l2(dom, ub))
            dist[a, b] = _l2(dom, ua, ub) / scale if scale > 0 else 0.0
    reps = []
    for a, e in enumerate(entries):
        if not e.counted:
            continue
        if all(not np.array_equal(e.signature, entries[b].signature) or dist[a, b] > distinct_tol
               for b in reps):
            reps.append(a)
    expected = (2 ** dom.n_chambers - 1) ** pot.k
    surrogate = None
    if pot.k > 1:
        beta_bar = float(pot.beta[~np.eye(pot.k, dtype=bool)].max())
        if beta_bar > 0 and entries and entries[0].consts is not None:
            c0 = entries[0].consts
            surrogate = check_assumptions(pot, samples=1000, seed=seed,
                                          c_sob_b=c0.c_sob[("B", pot.p)], R=c0.R).surrogate
    return MultiplicityResult(entries, len(reps), expected, dist, c_eta, surrogate)
