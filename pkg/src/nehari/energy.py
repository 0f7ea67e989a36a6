"""Nonlinearity F, energy J and derivatives, and checks of (F1)-(F4).

Fields are arrays of shape ``(k, *grid_shape)``, zero off the interior.
Pointwise functions accept ``y`` of shape ``(k, ...)`` and broadcast over
the trailing axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import PreconditionError

CUBIC = "cubic"
PURE_POWER = "pure_power"

# Gauss-Legendre nodes on [0, 1] for the stable energy difference; exact for
# the quartic family and accurate to O(|δ|^9) otherwise.
_GL_X, _GL_W = np.polynomial.legendre.leggauss(4)
_GL_X = 0.5 * (_GL_X + 1.0)
_GL_W = 0.5 * _GL_W


@dataclass(frozen=True, eq=False)
class Potential:
    kind: str
    mu: np.ndarray
    beta: np.ndarray
    p: float
    c_f: float
    delta: float
    u_bar: np.ndarray

    @property
    def k(self):
        return self.mu.size

    @classmethod
    def cubic(cls, mu, beta=None, c_f=None, u_bar=None):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        k = mu.size
        beta = np.zeros((k, k)) if beta is None else np.asarray(beta, dtype=float).reshape(k, k)
        if not np.allclose(beta, beta.T, rtol=0, atol=0):
            raise PreconditionError("beta must be symmetric")
        if np.any(np.diag(beta) != 0):
            raise PreconditionError("beta must have zero diagonal")
        if np.any(mu <= 0):
            raise PreconditionError("mu must be positive")
        if c_f is None:
            c_f = cubic_c_f(mu, beta)
        u_bar = np.ones(k) if u_bar is None else np.asarray(u_bar, dtype=float)
        return cls(CUBIC, mu, beta, 4.0, float(c_f), 2.0, u_bar)

    @classmethod
    def pure_power(cls, mu, p, c_f=None, u_bar=None):
        mu = np.atleast_1d(np.asarray(mu, dtype=float))
        k = mu.size
        if not p > 2:
            raise PreconditionError("p must exceed 2")
        if np.any(mu <= 0):
            raise PreconditionError("mu must be positive")
        if c_f is None:
            # Hessian bound is the binding one; sum of |u_i|^(p-2) needs a k factor below p=4
            c_f = (p - 1) * mu.max() * k ** max(0.0, 1 - (p - 2) / 2)
        u_bar = np.ones(k) if u_bar is None else np.asarray(u_bar, dtype=float)
        return cls(PURE_POWER, mu, np.zeros((k, k)), float(p), float(c_f), float(p - 2), u_bar)

    def restrict(self, comps):
        """Reduced potential ``F̃(ũ) = F(Σ ũ_j e_{σ(j)})`` on the components ``comps``."""
        comps = sorted(comps)
        if not comps:
            raise PreconditionError("component set must be nonempty")
        sel = np.asarray(comps)
        return replace(self, mu=self.mu[sel], beta=self.beta[np.ix_(sel, sel)],
                       u_bar=self.u_bar[sel])


def cubic_c_f(mu, beta):
    """Constant making all three (F1) bounds hold for the cubic family (Euclidean norm)."""
    b = np.abs(beta).sum(axis=0).max() if beta.size else 0.0
    return 3.0 * (mu.max() + b)


def _bcast(a, y):
    return np.asarray(a, dtype=y.dtype).reshape(a.shape + (1,) * (y.ndim - 1))


def f_value(pot: Potential, y):
    y = np.asarray(y)
    if pot.kind == CUBIC:
        q = y * y
        mu = _bcast(pot.mu, y)
        bq = np.tensordot(pot.beta.astype(y.dtype), q, axes=(1, 0))
        return 0.25 * np.sum(mu * q * q + q * bq, axis=0)
    mu = _bcast(pot.mu, y)
    return np.sum(mu * np.abs(y) ** pot.p, axis=0) / pot.p


def f_grad(pot: Potential, y):
    y = np.asarray(y)
    if pot.kind == CUBIC:
        q = y * y
        mu = _bcast(pot.mu, y)
        bq = np.tensordot(pot.beta.astype(y.dtype), q, axes=(1, 0))
        return y * (mu * q + bq)
    mu = _bcast(pot.mu, y)
    return mu * np.abs(y) ** (pot.p - 2) * y


def f_hess(pot: Potential, y):
    """Pointwise Hessian, shape ``(k, k, ...)``."""
    y = np.asarray(y)
    k = pot.k
    mu = _bcast(pot.mu, y)
    if pot.kind == CUBIC:
        q = y * y
        beta = pot.beta.astype(y.dtype)
        bq = np.tensordot(beta, q, axes=(1, 0))
        H = 2.0 * beta.reshape((k, k) + (1,) * (y.ndim - 1)) * (y[:, None] * y[None, :])
        diag = 3.0 * mu * q + bq
    else:
        H = np.zeros((k, k) + y.shape[1:], dtype=y.dtype)
        diag = (pot.p - 1) * mu * np.abs(y) ** (pot.p - 2)
    ii = np.arange(k)
    H[ii, ii] = diag
    return H


def hess_apply(pot: Potential, y, w):
    """``D²F(y) w`` pointwise without forming the full Hessian for large k."""
    return np.einsum("ij...,j...->i...", f_hess(pot, y), w)


# ---------------------------------------------------------------------------
# energy functional


def _stiff(dom, V):
    return (dom.stiffness @ V.T).T


def energy(dom, pot: Potential, u) -> float:
    """``½∫|∇u|² − ∫F(u)``."""
    U = dom.restrict(u)
    return _energy_r(dom, pot, U)


def _energy_r(dom, pot, U):
    return 0.5 * float(np.einsum("im,im->", U, _stiff(dom, U))) - dom.cell_volume * float(
        np.sum(f_value(pot, U)))


def norm_sq(dom, u) -> float:
    U = dom.restrict(u)
    return float(np.einsum("im,im->", U, _stiff(dom, U)))


def d_energy(dom, pot: Potential, u, v) -> float:
    """``J'(u)[v]``."""
    U, V = dom.restrict(u), dom.restrict(v)
    return float(np.einsum("im,im->", V, dual_gradient(dom, pot, U)))


def d2_energy(dom, pot: Potential, u, v, w) -> float:
    """``J''(u)[v, w]``."""
    U, V, W = dom.restrict(u), dom.restrict(v), dom.restrict(w)
    return float(np.einsum("im,im->", V, hess_dual(dom, pot, U, W)))


def dual_gradient(dom, pot, U):
    """Reduced dual vector ``g`` with ``J'(u)[v] = Σ g·V``."""
    return _stiff(dom, U) - dom.cell_volume * f_grad(pot, U)


def hess_dual(dom, pot, U, W):
    """Reduced dual vector of ``J''(u)[·, w]``."""
    return _stiff(dom, W) - dom.cell_volume * hess_apply(pot, U, W)


def energy_difference(dom, pot: Potential, u, v) -> float:
    """``J(v) − J(u)`` evaluated from the increment so it keeps relative accuracy
    when ``v`` is close to ``u``."""
    return _energy_difference_r(dom, pot, dom.restrict(u), dom.restrict(v))


def _energy_difference_r(dom, pot, U, V):
    D = V - U
    quad = 0.5 * float(np.einsum("im,im->", D, _stiff(dom, V + U)))
    nonlin = 0.0
    for x, wt in zip(_GL_X, _GL_W):
        nonlin += wt * float(np.einsum("im,im->", f_grad(pot, U + x * D), D))
    return quad - dom.cell_volume * nonlin


# ---------------------------------------------------------------------------
# assumption checks


@dataclass
class Check:
    name: str
    worst_margin: float
    argmin: tuple
    passed: bool


@dataclass
class AssumptionReport:
    checks: dict = field(default_factory=dict)
    surrogate: Optional[dict] = None

    @property
    def passed(self):
        return all(c.passed for c in self.checks.values())

    def __getitem__(self, name):
        return self.checks[name]

    def records(self):
        from .records import record

        out = [record("assumption", name=c.name, worst_margin=c.worst_margin,
                      argmin=c.argmin, passed=c.passed) for c in self.checks.values()]
        if self.surrogate is not None:
            out.append(record("surrogate", **self.surrogate))
        return out


def check_assumptions(pot: Potential, samples=10_000, seed=0, radius=10.0,
                      rel_tol=1e-12, c_sob_b=None, R=None) -> AssumptionReport:
    """Sample (F1)-(F4), the Ambrosetti-Rabinowitz inequality and the ratio
    monotonicity at random points of the ball ``|u| <= radius``.

    Inequalities are evaluated in extended precision; a check passes when its
    worst margin is above ``-rel_tol`` times the size of the compared terms.
    """
    rng = np.random.default_rng(seed)
    k = pot.k
    ld = np.longdouble
    dirs = rng.standard_normal((k, samples))
    dirs /= np.linalg.norm(dirs, axis=0)
    u = (dirs * radius * rng.uniform(0, 1, samples)).astype(ld)
    lam = rng.standard_normal((k, samples)).astype(ld)
    pot_ld = replace(pot, mu=pot.mu.astype(ld), beta=pot.beta.astype(ld))
    p, cf, d = ld(pot.p), ld(pot.c_f), ld(pot.delta)
    nrm = np.sqrt(np.sum(u * u, axis=0))

    F = f_value(pot_ld, u)
    gF = f_grad(pot_ld, u)
    H = f_hess(pot_ld, u)
    rep = AssumptionReport()

    def add(name, margin, scale, points):
        margin = np.asarray(margin)
        j = int(np.argmin(margin))
        worst = float(margin[j])
        tol = rel_tol * float(np.max(scale)) if np.size(scale) else 0.0
        rep.checks[name] = Check(name, worst, tuple(float(x) for x in points[:, j]),
                                 worst >= -tol)

    # (F1): three bounds, scaled so the margins are comparable
    m_h = cf * nrm ** (p - 2) - np.sum(np.abs(H), axis=(0, 1))
    m_g = cf * nrm ** (p - 1) - np.sum(np.abs(gF), axis=0)
    m_f = cf * nrm ** p - np.abs(F)
    m1 = np.minimum(np.minimum(m_h * nrm ** 2, m_g * nrm), m_f)
    add("F1", m1, cf * nrm ** p, u)

    # (F2)
    lu = lam * u
    quad = np.einsum("ijs,is,js->s", H, lu, lu)
    lin = np.sum(gF * lam * lam * u, axis=0)
    add("F2", quad - (1 + d) * lin, np.abs(quad) + np.abs((1 + d) * lin), np.vstack([u, lam]))

    # (F3): worst over components
    m3 = []
    for i in range(k):
        ui = np.zeros_like(u)
        ui[i] = u[i]
        m3.append(f_grad(pot_ld, ui)[i] * u[i] - gF[i] * u[i])
    m3 = np.min(np.asarray(m3), axis=0)
    add("F3", m3, np.abs(gF * u).sum(axis=0), u)

    # (F4): one value per component at its witness
    vals = []
    for i in range(k):
        e = np.zeros((k, 1), dtype=ld)
        e[i, 0] = pot.u_bar[i]
        vals.append(f_grad(pot_ld, e)[i, 0])
    vals = np.asarray(vals)
    j = int(np.argmin(vals))
    rep.checks["F4"] = Check("F4", float(vals[j]), (j + 1, float(pot.u_bar[j])),
                             bool(np.all(vals > 0)))

    # Ambrosetti-Rabinowitz
    dot = np.sum(gF * u, axis=0)
    add("AR", dot - (2 + d) * F, np.abs(dot) + np.abs((2 + d) * F), u)

    # ratio t -> dF_i(t e_i) t / t^(2+δ) nondecreasing, and the bound it implies
    t = np.sort(rng.uniform(1e-3, radius, (2, samples)).astype(ld), axis=0)
    mono, bound, scale_m, scale_b = [], [], [], []
    for i in range(k):
        def ratio(s):
            e = np.zeros((k, s.size), dtype=ld)
            e[i] = s
            return f_grad(pot_ld, e)[i] * s / s ** (2 + d)
        r0, r1 = ratio(t[0]), ratio(t[1])
        mono.append(r1 - r0)
        scale_m.append(np.abs(r1) + np.abs(r0))
        ub = ld(pot.u_bar[i])
        s = ub + t[1]
        rb = ratio(np.array([ub], dtype=ld))[0]
        lhs = ratio(s) * s ** (2 + d)
        rhs = rb * s ** (2 + d)
        bound.append(lhs - rhs)
        scale_b.append(np.abs(lhs) + np.abs(rhs))
    add("ratio_monotone", np.min(mono, axis=0), np.max(scale_m, axis=0), t)
    add("ratio_bound", np.min(bound, axis=0), np.max(scale_b, axis=0), t)

    if pot.kind == CUBIC and k > 1:
        off = pot.beta[~np.eye(k, dtype=bool)]
        beta_bar = float(off.max())
        if beta_bar > 0:
            sur = {"beta_bar": beta_bar}
            if c_sob_b is not None and R is not None:
                sur["bound"] = beta_bar * c_sob_b ** 4 * R ** 4
            rep.surrogate = sur
    return rep
