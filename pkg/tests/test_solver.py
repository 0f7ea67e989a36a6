import copy
import dataclasses

import numpy as np
import pytest

from nehari import (
    ConstraintSpec,
    Potential,
    PreconditionError,
    SolverConfig,
    build_dumbbell,
    build_initializer,
    compute_constants,
    energy,
    lower_bound_check,
    minimize,
    norm_sq,
    ps_diagnostic,
)
from nehari.records import parse_record
from nehari.experiments import initial_guess
from nehari.solver import (
    CONVERGED,
    LEFT_ADMISSIBLE,
    MAX_ITERS,
    STALLED,
    IterRecord,
    SolverReport,
)

GROUND1 = ConstraintSpec.ground_state(1)


@pytest.fixture(scope="module")
def square32():
    return build_dumbbell([(0, 0, 1, 1)], [], 1 / 32)


@pytest.fixture(scope="module")
def scalar_run(square32, cubic1):
    return minimize(square32, cubic1, GROUND1, None, initial_guess(square32, 1))


def _nodal_sum(dom, f):
    return dom.cell_volume * float(np.sum(dom.restrict(f)))


def test_scalar_ground_state(square32, cubic1, scalar_run):
    u, rep = scalar_run
    assert rep.status == CONVERGED
    grad = norm_sq(square32, u)
    quartic = _nodal_sum(square32, u[0] ** 4)
    assert abs(grad - quartic) / grad < 1e-8
    assert abs(energy(square32, cubic1, u) - grad / 4) / rep.energy < 1e-9
    assert np.all(square32.restrict(u) > 0)
    assert rep.grad_norm < SolverConfig().grad_tol
    assert np.max(np.abs(rep.lam)) < 10 * SolverConfig().grad_tol


def test_energy_trace_decreases(scalar_run):
    _, rep = scalar_run
    energies = [t.energy for t in rep.trace]
    assert all(b < a for a, b, t in zip(energies, energies[1:], rep.trace[1:]) if t.accepted)


def test_restart_from_solution_is_fixed(square32, cubic1, scalar_run):
    u, rep = scalar_run
    u2, rep2 = minimize(square32, cubic1, GROUND1, None, u)
    assert rep2.status == CONVERGED and rep2.iterations <= 1
    assert rep2.energy == pytest.approx(rep.energy, rel=1e-12)


def test_reports_are_deterministic(square16, cubic1):
    a = minimize(square16, cubic1, GROUND1, None, initial_guess(square16, 1))[1]
    b = minimize(square16, cubic1, GROUND1, None, initial_guess(square16, 1))[1]
    assert a.records(seed=0) == b.records(seed=0)


def test_records_parse(scalar_run):
    _, rep = scalar_run
    lines = rep.records(seed=4)
    final = parse_record(lines[-1])
    assert final["record"] == "final" and final["status"] == CONVERGED
    assert float(final["energy"]) == rep.energy
    assert len(lines) == len(rep.trace) + 1


def test_zero_start_is_rejected(square16, cubic1):
    with pytest.raises(PreconditionError):
        minimize(square16, cubic1, GROUND1, None, np.zeros((1,) + square16.shape))


def test_iteration_cap(square16, cubic1):
    _, rep = minimize(square16, cubic1, GROUND1, None, initial_guess(square16, 1),
                      SolverConfig(max_iters=2))
    assert rep.status == MAX_ITERS and rep.iterations == 2


def test_stall_without_armijo_step(square16, cubic1):
    _, rep = minimize(square16, cubic1, GROUND1, None, initial_guess(square16, 1),
                      SolverConfig(step0=1e6, max_backtracks=1))
    assert rep.status == STALLED


def test_leaving_admissible_set_is_reported(dumbbell, dumbbell_cuts, cubic1):
    L = (frozenset({1}),)
    g = build_initializer(dumbbell, cubic1, L)
    consts = compute_constants(dumbbell, dumbbell_cuts, cubic1, g)
    tight = dataclasses.replace(consts, R=1.0)
    spec = ConstraintSpec.multi_bump(dumbbell, L, dumbbell_cuts)
    _, rep = minimize(dumbbell, cubic1, spec, tight, g)
    assert rep.status == LEFT_ADMISSIBLE
    assert rep.left_admissible and rep.left_admissible[0] == 1


@pytest.mark.parametrize("field,value", [("step0", 0.0), ("armijo_c", 1.0),
                                         ("armijo_shrink", 0.0), ("grad_tol", -1.0),
                                         ("max_iters", 0)])
def test_config_bounds(field, value):
    with pytest.raises(PreconditionError):
        SolverConfig(**{field: value})


def test_mesh_refinement_second_order(cubic1):
    energies = []
    for m in (8, 16, 32):
        dom = build_dumbbell([(0, 0, 1, 1)], [], 1 / m)
        _, rep = minimize(dom, cubic1, GROUND1, None, initial_guess(dom, 1))
        assert rep.status == CONVERGED
        energies.append(rep.energy)
    ratio = (energies[1] - energies[0]) / (energies[2] - energies[1])
    assert 2.5 <= ratio <= 6


# -- PS diagnostic -----------------------------------------------------------

def test_ps_holds_on_converged_run(scalar_run):
    _, rep = scalar_run
    verdict = ps_diagnostic(rep)
    assert verdict.verdict == "holds"
    assert verdict.factor == pytest.approx(1 + rep.rho_prime / rep.rho)


def test_ps_detects_frozen_multiplier(scalar_run):
    # with λ frozen at a nonzero value the projected residual can vanish while
    # the free gradient stays at |λ|·‖ρ‖
    _, rep = scalar_run
    frozen = copy.deepcopy(rep)
    floor = 0.5 * rep.rho_prime
    frozen.trace = [IterRecord(n, 1.0, floor, 2.0 ** -n, 0.0, 0.5, 1.0, True)
                    for n in range(40)]
    verdict = ps_diagnostic(frozen)
    assert verdict.verdict == "violated"
    assert verdict.index is not None and verdict.index >= 20


def test_ps_empty_trace_is_vacuous():
    assert ps_diagnostic(SolverReport(MAX_ITERS)).verdict == "vacuous"


# -- lower-bound lemma -------------------------------------------------------

def test_lower_bound_equality_for_cubic(square32, cubic1, scalar_run):
    u, _ = scalar_run
    rep = lower_bound_check(square32, cubic1, u)
    assert rep["passed"]
    assert abs(rep["energy_margin"]) < 1e-10


def test_lower_bound_flags_small_component(square32, cubic1, scalar_run):
    u, _ = scalar_run
    rep = lower_bound_check(square32, cubic1, 1e-3 * u)
    assert not rep["passed"]
    assert rep["component_margins"][0] < 0


def test_lower_bound_equality_for_pure_power(square32):
    pot = Potential.pure_power([1.0], 3.0)
    u, rep = minimize(square32, pot, GROUND1, None, initial_guess(square32, 1))
    assert rep.status == CONVERGED
    nsq = norm_sq(square32, u)
    assert rep.energy == pytest.approx(nsq / 6, rel=1e-9)
    check = lower_bound_check(square32, pot, u)
    assert check["passed"] and abs(check["energy_margin"]) < 1e-9 * nsq
