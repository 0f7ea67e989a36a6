import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nehari import Potential, PreconditionError, check_assumptions, d_energy, energy, norm_sq
from nehari.energy import d2_energy, energy_difference, f_grad, f_hess, f_value
from nehari.grid_domain import GridDomain

COUPLED = Potential.cubic([1.0, 1.0], [[0.0, -1.0], [-1.0, 0.0]])


def grid32():
    mask = np.zeros((34, 34), dtype=bool)
    mask[1:-1, 1:-1] = True
    return GridDomain.from_mask(mask, 1 / 33)


def smooth_field(dom, rng, k, amp):
    """Random combination of low sine modes, zero on the boundary."""
    iy, ix = np.indices(dom.shape) * dom.h
    out = np.zeros((k,) + dom.shape)
    for i in range(k):
        for a in range(1, 4):
            for b in range(1, 4):
                out[i] += rng.standard_normal() * np.sin(a * np.pi * ix) * np.sin(b * np.pi * iy)
    return amp * out * dom.interior


# -- pointwise F -------------------------------------------------------------

def test_cubic_value_and_gradient():
    y = np.array([1.0, 2.0])
    assert f_value(COUPLED, y) == pytest.approx(2.25, abs=1e-15)
    assert f_grad(COUPLED, y) == pytest.approx([-3.0, 6.0], abs=1e-15)


def test_cubic_formula_matches_definition():
    y = np.random.default_rng(0).standard_normal((2, 50))
    mu, b = COUPLED.mu, COUPLED.beta[0, 1]
    direct = mu[0] / 4 * y[0] ** 4 + mu[1] / 4 * y[1] ** 4 + 2 * b / 4 * y[0] ** 2 * y[1] ** 2
    scale = (mu[0] * y[0] ** 4 + mu[1] * y[1] ** 4) / 4
    assert np.all(np.abs(f_value(COUPLED, y) - direct) <= 1e-14 * scale)


@pytest.mark.parametrize("pot", [COUPLED, Potential.pure_power([1.0, 2.0], 3.0)])
def test_zero_is_flat(pot):
    y = np.zeros(2)
    assert f_value(pot, y) == 0
    assert np.all(f_grad(pot, y) == 0)
    assert np.all(f_hess(pot, y) == 0)


@pytest.mark.parametrize("pot", [COUPLED, Potential.cubic([1.0, 2.0, 0.5],
                                                          [[0, 0.3, -1], [0.3, 0, 2], [-1, 2, 0]]),
                                 Potential.pure_power([1.0, 2.0], 3.5)])
def test_hessian_matches_gradient_jacobian(pot):
    rng = np.random.default_rng(1)
    t = 1e-6
    for _ in range(10):
        y = rng.standard_normal(pot.k) * 2
        H = f_hess(pot, y)
        assert np.array_equal(H, H.T)
        fd = np.empty_like(H)
        for j in range(pot.k):
            e = np.zeros(pot.k)
            e[j] = t
            fd[:, j] = (f_grad(pot, y + e) - f_grad(pot, y - e)) / (2 * t)
        assert np.max(np.abs(fd - H)) <= 1e-6 * np.max(np.abs(H))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=2, max_size=2), st.integers(0, 1))
def test_even_in_each_component(y, i):
    y = np.array(y)
    flipped = y.copy()
    flipped[i] = -flipped[i]
    for pot in (COUPLED, Potential.pure_power([1.0, 3.0], 3.0)):
        assert f_value(pot, flipped) == f_value(pot, y)


def test_potential_invariants_enforced():
    with pytest.raises(PreconditionError):
        Potential.cubic([1, 1], [[0, 1], [2, 0]])
    with pytest.raises(PreconditionError):
        Potential.pure_power([1.0], 2.0)
    with pytest.raises(PreconditionError):
        Potential.cubic([1, -1])


# -- energy functional -------------------------------------------------------

def test_energy_of_zero(point_dom):
    assert energy(point_dom, Potential.cubic([1.0]), np.zeros((1, 3))) == 0


def test_energy_point_oracle(point_dom):
    u = np.array([[0.0, 1.0, 0.0]])
    assert energy(point_dom, Potential.cubic([1.0]), u) == pytest.approx(1.875, abs=1e-15)


def test_decoupled_energy_homogeneity(square16):
    pot = Potential.cubic([1.0, 2.0])
    u = smooth_field(square16, np.random.default_rng(2), 2, 1.0)
    A = 0.5 * norm_sq(square16, u)
    B = A - energy(square16, pot, u)
    for t in (0.1, 0.5, 1.3, 2.0, 7.0):
        assert energy(square16, pot, t * u) == pytest.approx(t ** 2 * A - t ** 4 * B, rel=1e-10)


def test_first_derivative_of_zero_direction(square16):
    u = smooth_field(square16, np.random.default_rng(3), 2, 1.0)
    assert d_energy(square16, COUPLED, u, np.zeros_like(u)) == 0


def test_second_derivative_at_origin_is_inner_product(square16):
    rng = np.random.default_rng(4)
    v, w = (smooth_field(square16, rng, 2, 1.0) for _ in range(2))
    V, W = square16.restrict(v), square16.restrict(w)
    A = square16.stiffness
    inner = sum(float(V[i] @ (A @ W[i])) for i in range(2))
    assert d2_energy(square16, COUPLED, np.zeros_like(v), v, w) == pytest.approx(inner, rel=1e-14)


def test_second_derivative_symmetric(square16):
    rng = np.random.default_rng(5)
    for _ in range(10):
        u, v, w = (rng.standard_normal((2,) + square16.shape) * square16.interior
                   for _ in range(3))
        a = d2_energy(square16, COUPLED, u, v, w)
        b = d2_energy(square16, COUPLED, u, w, v)
        assert abs(a - b) < 1e-12 * max(1.0, abs(a))


def _fd_errors(dom, pot, u, v, w, t):
    d1 = d_energy(dom, pot, u, v)
    fd1 = (energy(dom, pot, u + t * v) - energy(dom, pot, u - t * v)) / (2 * t)
    d2 = d2_energy(dom, pot, u, v, w)
    fd2 = (d_energy(dom, pot, u + t * w, v) - d_energy(dom, pot, u - t * w, v)) / (2 * t)
    return abs(fd1 - d1) / abs(d1), abs(fd2 - d2) / abs(d2)


def test_derivatives_match_central_differences():
    # directions are large next to u so that truncation, not rounding,
    # dominates at the smaller step and the second-order signature is visible
    dom = grid32()
    rng = np.random.default_rng(6)
    for _ in range(20):
        u = smooth_field(dom, rng, 2, 1.0)
        v = smooth_field(dom, rng, 2, 10.0)
        w = smooth_field(dom, rng, 2, 10.0)
        e4 = _fd_errors(dom, COUPLED, u, v, w, 1e-4)
        e5 = _fd_errors(dom, COUPLED, u, v, w, 1e-5)
        for a, b in zip(e4, e5):
            assert b < 1e-6
            assert 50 <= a / b <= 200


def test_energy_difference_is_stable(square16):
    u = smooth_field(square16, np.random.default_rng(7), 2, 1.0)
    v = u * (1 + 1e-9)
    exact = energy(square16, COUPLED, v) - energy(square16, COUPLED, u)
    diff = energy_difference(square16, COUPLED, u, v)
    assert diff == pytest.approx(exact, rel=1e-4)
    assert energy_difference(square16, COUPLED, u, u) == 0


# -- assumption checks -------------------------------------------------------

def test_decoupled_cubic_ar_margin_vanishes():
    rep = check_assumptions(Potential.cubic([1.0, 2.0]), samples=10_000)
    assert abs(rep["AR"].worst_margin) < 1e-12
    assert rep.passed


def test_negative_coupling_passes_everything():
    rep = check_assumptions(COUPLED, samples=10_000)
    for name in ("F1", "F2", "F3", "F4", "AR", "ratio_monotone", "ratio_bound"):
        assert rep[name].passed, name
    assert rep.surrogate is None


def test_positive_coupling_breaks_f3():
    pot = Potential.cubic([1.0, 1.0], [[0, 1.0], [1.0, 0]])
    u = np.array([1.0, 1.0])
    assert f_grad(pot, u)[0] * u[0] == 2.0
    assert f_grad(pot, np.array([1.0, 0.0]))[0] * u[0] == 1.0
    rep = check_assumptions(pot, samples=10_000)
    f3 = rep["F3"]
    assert not f3.passed
    witness = np.array(f3.argmin)
    assert f3.worst_margin < 0 and np.all(witness != 0)
    assert rep.surrogate["beta_bar"] == 1.0


def test_surrogate_bound_reported():
    pot = Potential.cubic([1.0, 1.0], [[0, 0.5], [0.5, 0]])
    rep = check_assumptions(pot, samples=100, c_sob_b=0.3, R=10.0)
    assert rep.surrogate["bound"] == pytest.approx(0.5 * 0.3 ** 4 * 10 ** 4, rel=1e-15)


@pytest.mark.parametrize("p", [2.5, 3.0, 4.0, 6.0])
def test_pure_power_assumptions(p):
    pot = Potential.pure_power([1.0, 2.0], p)
    assert pot.delta == p - 2
    rep = check_assumptions(pot, samples=2000)
    assert rep.passed
    assert abs(rep["AR"].worst_margin) < 1e-9


def test_ar_follows_f2_on_same_samples():
    for pot in (COUPLED, Potential.cubic([2.0, 1.0], [[0, -3], [-3, 0]]),
                Potential.pure_power([1.0], 3.0)):
        rep = check_assumptions(pot, samples=5000, seed=11)
        if rep["F2"].passed:
            assert rep["AR"].worst_margin >= -1e-12


def test_records_are_line_per_check():
    rep = check_assumptions(COUPLED, samples=100)
    lines = rep.records()
    assert len(lines) == len(rep.checks)
    assert all(line.startswith("record=assumption,name=") for line in lines)
