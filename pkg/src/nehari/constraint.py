"""Generalized Nehari constraints, scaling retractions and multiplier diagnostics.

Both variants share one representation: each finite generator is
``ξ_a(u) = w_a · u_{i_a} e_{i_a}`` for a fixed nodal weight ``w_a`` (``1`` for
ground states, the cutoff ``η_l`` for multi-bump states), so that
``ξ_a'(u)[v] = w_a v_{i_a} e_{i_a}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from .energy import Potential, dual_gradient, energy, hess_dual, f_grad
from .errors import DegenerateGeneratorError, PreconditionError, RetractionError
from .grid_domain import CutoffFamily, GridDomain

GROUND = "ground"
MULTIBUMP = "multibump"

BISECT_RTOL = 1e-12
BRACKET_RANGE = (1e-8, 1e8)
GS_MAX_SWEEPS = 100
GS_TOL = 1e-10
NEWTON_MAX_ITER = 50
NEWTON_TOL = 1e-10


@dataclass(eq=False)
class ConstraintSpec:
    variant: str
    k: int
    L: tuple = ()
    cuts: Optional[CutoffFamily] = None
    vplus_mask: Optional[np.ndarray] = None
    _weights: list = field(default_factory=list, repr=False)
    _vplus: list = field(default_factory=list, repr=False)

    @classmethod
    def ground_state(cls, k: int) -> "ConstraintSpec":
        return cls(GROUND, k)

    @classmethod
    def multi_bump(cls, dom: GridDomain, L, cuts: CutoffFamily) -> "ConstraintSpec":
        L = tuple(frozenset(int(l) for l in Li) for Li in L)
        for Li in L:
            if not Li or not Li <= set(range(1, dom.n_chambers + 1)):
                raise PreconditionError(f"invalid chamber set {sorted(Li)}")
        k = len(L)
        mask = np.zeros((k,) + dom.shape, dtype=bool)
        spec = cls(MULTIBUMP, k, L, cuts)
        for i, Li in enumerate(L):
            closed = np.zeros(dom.shape, dtype=bool)
            for l in Li:
                closed |= dom.closure(l)
            mask[i] = dom.interior & ~closed
            sub = np.flatnonzero(mask[i].ravel()[dom.idx])
            lu = None
            if sub.size:
                A = dom.stiffness[sub][:, sub]
                lu = spla.splu(A.tocsc())
            spec._vplus.append((sub, lu))
            for l in sorted(Li):
                spec._weights.append((i, l, dom.restrict(cuts.eta[l - 1])))
        spec.vplus_mask = mask
        return spec

    def labels(self):
        """Generator labels: ``i`` (ground) or ``(i, l)`` (multi-bump), 1-based."""
        if self.variant == GROUND:
            return [i + 1 for i in range(self.k)]
        return [(i + 1, l) for i, l, _ in self._weights]

    def generators(self, dom):
        """List of ``(component, weight)`` with ``weight=None`` meaning 1."""
        if self.variant == GROUND:
            return [(i, None) for i in range(self.k)]
        return [(i, w) for i, _, w in self._weights]


@dataclass
class ConstraintResiduals:
    finite: np.ndarray
    vplus_norm: float = 0.0

    @property
    def max(self):
        return max(float(np.max(np.abs(self.finite))) if self.finite.size else 0.0,
                   self.vplus_norm)


@dataclass
class MultiplierEstimate:
    lam: np.ndarray
    residual_norm: float


# ---------------------------------------------------------------------------
# reduced-array kernels


def _xi(dom, spec, U):
    gens = spec.generators(dom)
    Xi = np.zeros((len(gens),) + U.shape)
    for a, (i, w) in enumerate(gens):
        Xi[a, i] = U[i] if w is None else w * U[i]
    return Xi


def _finite_residuals(dom, pot, spec, U, gJ=None):
    if gJ is None:
        gJ = dual_gradient(dom, pot, U)
    out = []
    for i, w in spec.generators(dom):
        out.append(float(gJ[i] @ (U[i] if w is None else w * U[i])))
    return np.asarray(out)


def _dual_G_prime(dom, pot, spec, U, gJ, Xi):
    """Dual vectors ``q_a`` with ``G_a'(u)[w] = Σ q_a·W``."""
    Q = np.empty_like(Xi)
    for a, (i, w) in enumerate(spec.generators(dom)):
        Q[a] = hess_dual(dom, pot, U, Xi[a])
        Q[a, i] += gJ[i] if w is None else w * gJ[i]
    return Q


def _vplus_norm(spec, gJ):
    if spec.variant != MULTIBUMP:
        return 0.0
    total = 0.0
    for i, (sub, lu) in enumerate(spec._vplus):
        if lu is None:
            continue
        rhs = gJ[i, sub]
        total += float(rhs @ lu.solve(rhs))
    return float(np.sqrt(max(total, 0.0)))


@dataclass
class Linearization:
    """Everything the solver needs at one iterate (reduced arrays)."""

    gJ: np.ndarray
    r: np.ndarray
    Xi: np.ndarray
    Q: np.ndarray
    Rho: np.ndarray
    P: np.ndarray
    lam: np.ndarray
    e: np.ndarray
    free_norm: float
    proj_norm: float
    finite: np.ndarray


def linearize(dom, pot, spec, U) -> Linearization:
    gJ = dual_gradient(dom, pot, U)
    r = dom.solve(gJ)
    Xi = _xi(dom, spec, U)
    Q = _dual_G_prime(dom, pot, spec, U, gJ, Xi)
    Rho = dom.solve(Q)
    P = np.einsum("akm,bkm->ab", Q, Rho)
    P = 0.5 * (P + P.T)
    b = np.einsum("akm,km->a", Q, r)
    try:
        c = np.linalg.cholesky(P)
        lam = np.linalg.solve(c.T, np.linalg.solve(c, b))
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeneratorError("generator gradients are linearly dependent") from exc
    if np.linalg.cond(P) > 1e14:
        raise DegenerateGeneratorError("generator gradients are nearly dependent")
    e = r - np.einsum("a,akm->km", lam, Rho)
    free = float(np.sqrt(max(np.einsum("km,km->", gJ, r), 0.0)))
    Ae = (dom.stiffness @ e.T).T
    proj = float(np.sqrt(max(np.einsum("km,km->", e, Ae), 0.0)))
    finite = np.einsum("akm,km->a", Xi, gJ)
    return Linearization(gJ, r, Xi, Q, Rho, P, lam, e, free, proj, finite)


# ---------------------------------------------------------------------------
# public operations


def residuals(dom, pot: Potential, spec: ConstraintSpec, u) -> ConstraintResiduals:
    U = dom.restrict(u)
    gJ = dual_gradient(dom, pot, U)
    return ConstraintResiduals(_finite_residuals(dom, pot, spec, U, gJ), _vplus_norm(spec, gJ))


def multiplier(dom, pot: Potential, spec: ConstraintSpec, u) -> MultiplierEstimate:
    """Least-squares multipliers of ``∇J ≈ Σ λ_a ∇G_a`` in the stiffness metric."""
    lin = linearize(dom, pot, spec, dom.restrict(u))
    return MultiplierEstimate(lin.lam, lin.proj_norm)


def scale_to_nehari(dom, pot: Potential, spec: ConstraintSpec, u):
    """Retract ``u`` onto the finite constraints by rescaling its components."""
    U = dom.restrict(u)
    if spec.variant == GROUND:
        try:
            U = _retract_ground(dom, pot, U)
        except RetractionError:
            if U.shape[0] == 1:
                raise
            # sweeps diverge when positive coupling dominates; solve jointly
        # Newton polish takes the sweep result from relative to absolute accuracy
        U = _retract_newton(dom, pot, spec, U)
    else:
        U = _retract_newton(dom, pot, spec, U)
    return dom.extend(U)


def _component_residual(dom, pot, U, i, lam, a_i):
    V = U.copy()
    V[i] = lam * U[i]
    return lam * lam * a_i - dom.cell_volume * float(f_grad(pot, V)[i] @ V[i])


def _root(fun, lo_lim=BRACKET_RANGE[0], hi_lim=BRACKET_RANGE[1]):
    """Positive root of ``fun``, positive for small and negative for large arguments."""
    g1 = fun(1.0)
    if g1 == 0:
        return 1.0
    lo, hi, glo, ghi = 1.0, 1.0, g1, g1
    if g1 > 0:
        while ghi > 0:
            lo, glo = hi, ghi
            hi *= 2.0
            if hi > hi_lim:
                raise RetractionError("no sign change below the upper bracket limit")
            ghi = fun(hi)
    else:
        while glo < 0:
            hi, ghi = lo, glo
            lo *= 0.5
            if lo < lo_lim:
                raise RetractionError("no sign change above the lower bracket limit")
            glo = fun(lo)
    # Brent's method keeps the bisection bracket but converges superlinearly
    return brentq(fun, lo, hi, xtol=1e-300, rtol=BISECT_RTOL)


def _retract_ground(dom, pot, U):
    A = dom.stiffness
    U = U.copy()
    a = np.einsum("im,im->i", U, (A @ U.T).T)
    if np.any(a <= 0):
        raise PreconditionError("every component must be nontrivial to rescale")
    for _ in range(GS_MAX_SWEEPS):
        for i in range(U.shape[0]):
            a_i = float(U[i] @ (A @ U[i]))
            lam = _root(lambda t: _component_residual(dom, pot, U, i, t, a_i))
            U[i] *= lam
        a = np.einsum("im,im->i", U, (A @ U.T).T)
        res = np.array([_component_residual(dom, pot, U, i, 1.0, a[i]) for i in range(U.shape[0])])
        if np.all(np.abs(res) <= GS_TOL * (1.0 + a)):
            return U
    raise RetractionError("coupled rescaling did not settle", dom.extend(U))


def _newton_tol(dom, gens, U):
    # rounding in J'(u)[ξ] grows with ‖ξ‖²; never ask for less than that
    size = max(float(U[i] @ (dom.stiffness @ (w * U[i]))) for i, w in gens)
    return max(NEWTON_TOL, 64 * np.finfo(float).eps * size)


def _retract_newton(dom, pot, spec, U):
    gens = [(i, 1.0 if w is None else w) for i, w in spec.generators(dom)]
    for i, w in gens:
        if not float(U[i] @ (dom.stiffness @ (w * U[i]))) > 0:
            raise PreconditionError("every generator must be nontrivial to rescale")
    U = U.copy()
    G = _finite_residuals(dom, pot, spec, U)
    tol = _newton_tol(dom, gens, U)
    for _ in range(NEWTON_MAX_ITER):
        if np.max(np.abs(G)) <= tol:
            return U
        gJ = dual_gradient(dom, pot, U)
        Xi = _xi(dom, spec, U)
        Q = _dual_G_prime(dom, pot, spec, U, gJ, Xi)
        M = np.einsum("akm,bkm->ab", Q, Xi)
        try:
            s = -np.linalg.solve(M, G)
        except np.linalg.LinAlgError as exc:
            raise RetractionError("singular retraction Jacobian", dom.extend(U)) from exc
        alpha = 1.0
        norm0 = np.linalg.norm(G)
        while True:
            step = alpha * s
            if np.all(1.0 + step >= 0.05):
                V = U.copy()
                factor = np.ones_like(U)
                for a, (i, w) in enumerate(gens):
                    factor[i] += step[a] * w
                V = factor * U
                Gv = _finite_residuals(dom, pot, spec, V)
                if np.linalg.norm(Gv) < norm0:
                    U, G = V, Gv
                    break
            alpha *= 0.5
            if alpha < 1e-6:
                raise RetractionError("damped Newton made no progress", dom.extend(U))
    if np.max(np.abs(G)) <= tol:
        return U
    raise RetractionError("Newton retraction did not converge", dom.extend(U))


# ---------------------------------------------------------------------------
# diagnostics


def coercivity_check(dom, pot: Potential, spec: ConstraintSpec, u, trials=50, seed=0) -> dict:
    """Sampled ``J''[v,v]/‖v‖²`` on the moving part ``V⁻_u`` (should be negative)
    and, for multi-bump constraints, on the fixed part ``V⁺`` (should be positive)."""
    rng = np.random.default_rng(seed)
    U = dom.restrict(u)
    Xi = _xi(dom, spec, U)
    A = dom.stiffness

    def quotient(V):
        num = float(np.einsum("km,km->", V, hess_dual(dom, pot, U, V)))
        den = float(np.einsum("km,km->", V, (A @ V.T).T))
        return num / den

    vminus = max(quotient(np.einsum("a,akm->km", rng.standard_normal(len(Xi)), Xi))
                 for _ in range(trials))
    vplus = None
    if spec.variant == MULTIBUMP:
        masks = dom.restrict(spec.vplus_mask.astype(float))
        vals = []
        for _ in range(trials):
            V = rng.standard_normal(U.shape) * masks
            if np.any(V):
                vals.append(quotient(V))
        vplus = min(vals) if vals else None
    passed = vminus < 0 and (vplus is None or vplus > 0)
    return {"vminus_max": vminus, "vplus_min": vplus, "passed": passed}


def injectivity_estimate(dom, pot: Potential, spec: ConstraintSpec, u, seed=0,
                         max_iter=200, tol=1e-12):
    """``(ρ, ρ′)``: lower bound of ``|G'(u)[v]|/‖v‖`` on the generator span and
    the operator norm of ``G'(u)`` over the whole space."""
    U = dom.restrict(u)
    lin = linearize(dom, pot, spec, U)
    M = np.einsum("akm,bkm->ab", lin.Q, lin.Xi)
    gram = np.einsum("akm,bkm->ab", lin.Xi, (dom.stiffness @ lin.Xi.reshape(-1, U.shape[-1]).T)
                     .T.reshape(lin.Xi.shape))
    try:
        c = np.linalg.cholesky(0.5 * (gram + gram.T))
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeneratorError("degenerate generator Gram matrix") from exc
    rho = float(np.linalg.svd(np.linalg.solve(c, M.T).T, compute_uv=False).min())

    # power iteration on w -> Σ_a ρ_a <q_a, w>, whose top eigenvalue is ρ'²
    rng = np.random.default_rng(seed)
    W = rng.standard_normal(U.shape)
    A = dom.stiffness

    def anorm(V):
        return float(np.sqrt(np.einsum("km,km->", V, (A @ V.T).T)))

    W /= anorm(W)
    val = 0.0
    for _ in range(max_iter):
        coef = np.einsum("akm,km->a", lin.Q, W)
        W2 = np.einsum("a,akm->km", coef, lin.Rho)
        new = anorm(W2)
        if new == 0:
            break
        W = W2 / new
        if abs(new - val) <= tol * new:
            val = new
            break
        val = new
    return rho, float(np.sqrt(val))


@dataclass
class AdmissibleReport:
    norm: float
    R: Optional[float]
    bumps: np.ndarray
    r2: Optional[np.ndarray]
    target: Optional[np.ndarray]
    nontrivial: bool
    gap_C: Optional[float]
    gap_eps2: Optional[float]

    @property
    def in_ball(self):
        return self.R is None or self.norm < self.R

    @property
    def signature_ok(self):
        if self.target is None:
            return True
        large = self.bumps > self.r2[None, :]
        small = self.bumps < self.r2[None, :]
        return bool(np.all(np.where(self.target, large, small)))

    @property
    def inside(self):
        return self.nontrivial and self.in_ball and self.signature_ok


def bump_sizes(dom, u):
    """``∫_{Ω_l}|∇u_i|²`` for every component and chamber, shape ``(k, n)``."""
    u = np.asarray(u, dtype=float)
    out = np.zeros((u.shape[0], dom.n_chambers))
    for l in range(1, dom.n_chambers + 1):
        mask = dom.closure(l)
        for i in range(u.shape[0]):
            out[i, l - 1] = dom.local_energy(u[i], mask)
    return out


def admissible_check(dom, pot, spec, consts, u) -> AdmissibleReport:
    u = np.asarray(u, dtype=float)
    U = dom.restrict(u)
    norm = float(np.sqrt(np.einsum("im,im->", U, (dom.stiffness @ U.T).T)))
    bumps = bump_sizes(dom, u)
    nontrivial = bool(np.all(np.any(U != 0, axis=1)))
    if spec.variant == GROUND or consts is None:
        return AdmissibleReport(norm, None, bumps, None, None, nontrivial, None, None)
    r2 = np.asarray(consts.r) ** 2
    target = signature_matrix(spec.L, dom.n_chambers)
    ratio = bumps / r2[None, :]
    above = ratio[ratio > 1]
    below = bumps[ratio < 1]
    gap_C = float(above.min() - 1) if above.size else None
    gap_eps2 = float(below.max()) if below.size else None
    return AdmissibleReport(norm, consts.R, bumps, r2, target, nontrivial, gap_C, gap_eps2)


def signature_matrix(L, n):
    sig = np.zeros((len(L), n), dtype=bool)
    for i, Li in enumerate(L):
        for l in Li:
            sig[i, l - 1] = True
    return sig


def perturbed_nehari_identity(dom, pot, u, cuts: CutoffFamily):
    """Both sides of ``∫|∇(η_l u_i)|² = ∫∂_iF(u) η_l² u_i + ∫|∇η_l|² u_i²``.

    The last term is taken edge-wise, ``Σ_edges (Δη)² u_a u_b``, which is the
    form for which the discrete product rule is exact.  Returns an array of
    shape ``(k, n, 2)`` holding (left, right).
    """
    u = np.asarray(u, dtype=float)
    U = dom.restrict(u)
    gF = f_grad(pot, U)
    vol = dom.cell_volume
    k, n = U.shape[0], cuts.eta.shape[0]
    out = np.zeros((k, n, 2))
    for l in range(n):
        eta = cuts.eta[l]
        e = dom.restrict(eta)
        for i in range(k):
            eu = e * U[i]
            lhs = float(eu @ (dom.stiffness @ eu))
            cross = 0.0
            for ax in range(dom.ndim):
                a = [slice(None)] * dom.ndim
                b = [slice(None)] * dom.ndim
                a[ax] = slice(0, -1)
                b[ax] = slice(1, None)
                a, b = tuple(a), tuple(b)
                cross += float(np.sum((eta[a] - eta[b]) ** 2 * u[i][a] * u[i][b]))
            cross *= dom.h ** (dom.ndim - 2)
            rhs = vol * float(gF[i] @ (e * e * U[i])) + cross
            out[i, l] = (lhs, rhs)
    return out


def decompose_in_bundle(dom, spec, u, v):
    """Split ``v`` as ``v⁺ + Σ c_a ξ_a(u)`` and return ``(c, remainder)``.

    ``remainder`` is the part of ``v`` not representable in ``V_u``; it is zero
    exactly when ``v ∈ V_u``.
    """
    U, Vr = dom.restrict(u), dom.restrict(v)
    Xi = _xi(dom, spec, U)
    if spec.variant == GROUND:
        A = dom.stiffness
        c = np.array([float(Vr[i] @ (A @ U[i])) / float(U[i] @ (A @ U[i]))
                      for i in range(U.shape[0])])
        rem = Vr - np.einsum("a,akm->km", c, Xi)
        return c, dom.extend(rem)
    labels = spec.labels()
    c = np.zeros(len(labels))
    for a, (i, l) in enumerate(labels):
        sel = dom.restrict((dom.label == l).astype(float)) > 0
        ui = U[i - 1, sel]
        c[a] = float(Vr[i - 1, sel] @ ui) / float(ui @ ui)
    rest = Vr - np.einsum("a,akm->km", c, Xi)
    outside = dom.restrict((~spec.vplus_mask).astype(float)) > 0
    return c, dom.extend(np.where(outside, rest, 0.0))
