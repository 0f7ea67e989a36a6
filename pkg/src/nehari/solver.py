"""Constrained minimisation of J on the Nehari-type set, with PS diagnostics.

The free gradient is the Riesz representative ``r`` of ``J'(u)`` in the
stiffness inner product.  Each step removes the least-squares multiplier
combination of the constraint gradients, backtracks along the result, clamps
to nonnegative values and rescales back onto the constraint.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

from .constraint import (
    GROUND,
    ConstraintSpec,
    admissible_check,
    injectivity_estimate,
    linearize,
    scale_to_nehari,
)
from .energy import Potential, _energy_difference_r, _energy_r
from .errors import DegenerateGeneratorError, PreconditionError, RetractionError
from .grid_domain import estimate_sobolev

log = logging.getLogger(__name__)

CONVERGED = "Converged"
MAX_ITERS = "MaxIters"
RETRACT_FAIL = "RetractFail"
LEFT_ADMISSIBLE = "LeftAdmissible"
STALLED = "Stalled"


@dataclass
class SolverConfig:
    step0: float = 1.0
    armijo_c: float = 1e-4
    armijo_shrink: float = 0.5
    grad_tol: float = 1e-7
    constraint_tol: float = 1e-9
    max_iters: int = 5000
    seed: int = 0
    max_backtracks: int = 40

    def __post_init__(self):
        if not self.step0 > 0:
            raise PreconditionError("step0 must be positive")
        if not 0 < self.armijo_c < 1 or not 0 < self.armijo_shrink < 1:
            raise PreconditionError("Armijo constants must lie in (0, 1)")
        if not self.grad_tol > 0 or not self.constraint_tol > 0:
            raise PreconditionError("tolerances must be positive")
        if not self.max_iters > 0:
            raise PreconditionError("max_iters must be positive")


@dataclass
class IterRecord:
    it: int
    energy: float
    grad_norm: float
    proj_norm: float
    constraint_res: float
    lam_inf: float
    step: float
    accepted: bool


@dataclass
class SolverReport:
    status: str
    trace: list = field(default_factory=list)
    energy: float = float("nan")
    grad_norm: float = float("nan")
    proj_norm: float = float("nan")
    constraint_res: float = float("nan")
    lam: Optional[np.ndarray] = None
    iterations: int = 0
    left_admissible: list = field(default_factory=list)
    rho: Optional[float] = None
    rho_prime: Optional[float] = None
    message: str = ""

    @property
    def converged(self):
        return self.status == CONVERGED

    def records(self, **extra):
        from .records import record

        out = [record("iter", **extra, **asdict(t)) for t in self.trace]
        out.append(record("final", **extra, status=self.status, energy=self.energy,
                          grad_norm=self.grad_norm, proj_norm=self.proj_norm,
                          constraint_res=self.constraint_res,
                          lam_inf=float(np.max(np.abs(self.lam))) if self.lam is not None
                          and self.lam.size else 0.0,
                          iterations=self.iterations, rho=self.rho, rho_prime=self.rho_prime,
                          left_admissible=len(self.left_admissible)))
        return out


def _constraint_max(lin, spec):
    return float(np.max(np.abs(lin.finite))) if lin.finite.size else 0.0


def minimize(dom, pot: Potential, spec: ConstraintSpec, consts, u0, cfg: Optional[SolverConfig] = None):
    """Minimise ``J`` on the constraint set starting from ``u0``.

    Returns ``(u, report)``.  Retraction failures end the run with status
    ``RetractFail``; leaving the admissible set is recorded but not fatal.
    """
    cfg = cfg or SolverConfig()
    report = SolverReport(MAX_ITERS)
    U0 = np.maximum(dom.restrict(u0), 0.0)
    try:
        U = dom.restrict(scale_to_nehari(dom, pot, spec, dom.extend(U0)))
    except RetractionError as exc:
        report.status = RETRACT_FAIL
        report.message = str(exc)
        last = exc.last_iterate if exc.last_iterate is not None else dom.extend(U0)
        return last, report

    def admissible(V):
        if spec.variant == GROUND:
            return bool(np.all(np.any(V != 0, axis=1)))
        return admissible_check(dom, pot, spec, consts, dom.extend(V)).inside if consts else True

    J = _energy_r(dom, pot, U)
    step = 0.0
    accepted = True
    for it in range(cfg.max_iters + 1):
        lin = linearize(dom, pot, spec, U)
        cres = _constraint_max(lin, spec)
        rec = IterRecord(it, J, lin.free_norm, lin.proj_norm, cres,
                         float(np.max(np.abs(lin.lam))) if lin.lam.size else 0.0, step, accepted)
        report.trace.append(rec)
        if lin.free_norm < cfg.grad_tol and cres < cfg.constraint_tol:
            report.status = CONVERGED
            break
        if it == cfg.max_iters:
            break
        d = -lin.e
        slope = lin.proj_norm ** 2
        t = cfg.step0
        accepted = False
        for _ in range(cfg.max_backtracks):
            trial = np.maximum(U + t * d, 0.0)
            try:
                V = dom.restrict(scale_to_nehari(dom, pot, spec, dom.extend(trial)))
            except (RetractionError, PreconditionError):
                t *= cfg.armijo_shrink
                continue
            dJ = _energy_difference_r(dom, pot, U, V)
            if dJ < 0 and dJ <= -cfg.armijo_c * t * slope:
                U, J, accepted, step = V, J + dJ, True, t
                break
            t *= cfg.armijo_shrink
        if not accepted:
            report.status = STALLED
            report.message = "no Armijo step found"
            break
        if not admissible(U):
            report.left_admissible.append(it + 1)

    report.iterations = len(report.trace) - 1
    report.energy = _energy_r(dom, pot, U)
    last = report.trace[-1]
    report.grad_norm, report.proj_norm, report.constraint_res = (
        last.grad_norm, last.proj_norm, last.constraint_res)
    report.lam = lin.lam
    if report.status == CONVERGED:
        if not admissible(U):
            report.status = LEFT_ADMISSIBLE
        try:
            report.rho, report.rho_prime = injectivity_estimate(
                dom, pot, spec, dom.extend(U), seed=cfg.seed)
        except DegenerateGeneratorError:
            pass
    return dom.extend(U), report


@dataclass
class Verdict:
    verdict: str  # holds | violated | vacuous
    index: Optional[int] = None
    factor: Optional[float] = None


def ps_diagnostic(report: SolverReport, tail_fraction=0.5, slack=1e-8) -> Verdict:
    """Check that the free gradient is controlled by the projected one on the tail.

    On the constraint set ``‖r‖ ≤ (1 + ρ′/ρ) ‖r − Σλρ_a‖``; with ``ρ, ρ′``
    measured at the last iterate, every tail iterate must obey the bound
    against the running supremum of later projected residuals.
    """
    trace = report.trace
    if not trace:
        return Verdict("vacuous")
    if report.rho is None or report.rho_prime is None or report.rho <= 0:
        return Verdict("vacuous")
    K = 1.0 + report.rho_prime / report.rho
    start = int(len(trace) * (1 - tail_fraction))
    tail = trace[start:]
    proj = np.array([t.proj_norm for t in tail])
    free = np.array([t.grad_norm for t in tail])
    sup_later = np.maximum.accumulate(proj[::-1])[::-1]
    for j in range(len(tail)):
        if free[j] > K * sup_later[j] * (1 + slack) + slack * 1e-12:
            return Verdict("violated", start + j, K)
    return Verdict("holds", None, K)


def lower_bound_check(dom, pot: Potential, u, c_sob=None, seed=0) -> dict:
    """Margins of ``J(u) ≥ δ/(4+2δ)‖u‖²`` and of the per-component norm floor
    ``‖u_i‖ ≥ (C_F C_S^p)^{-1/(p-2)}`` (zero components are exempt)."""
    U = dom.restrict(u)
    A = dom.stiffness
    comp = np.einsum("im,im->i", U, (A @ U.T).T)
    d = pot.delta
    J = _energy_r(dom, pot, U)
    energy_margin = J - d / (4 + 2 * d) * float(comp.sum())
    if c_sob is None:
        c_sob = estimate_sobolev(dom, "omega", None, pot.p, seed)
    floor = (pot.c_f * c_sob ** pot.p) ** (-1.0 / (pot.p - 2))
    norms = np.sqrt(comp)
    margins = np.where(np.any(U != 0, axis=1), norms - floor, np.inf)
    return {
        "energy_margin": energy_margin,
        "norm_floor": floor,
        "component_norms": norms,
        "component_margins": margins,
        "passed": bool(energy_margin >= -1e-9 and np.all(margins >= -1e-6)),
    }
