"""Acceptance criteria 1-10. Each test prints one PASS/FAIL line."""

import time
from pathlib import Path

import numpy as np
import pytest

from nehari import (
    ConstraintSpec,
    Potential,
    build_cutoffs,
    build_dumbbell,
    check_assumptions,
    coercivity_check,
    energy,
    estimate_c_eta,
    lower_bound_check,
    minimize,
    norm_sq,
    run_multiplicity,
    scale_to_nehari,
)
from nehari.cli import main
from nehari.constraint import injectivity_estimate
from nehari.experiments import initial_guess
from nehari.grid_domain import CutoffFamily, estimate_sobolev
from nehari.records import parse_record, read_grid

from conftest import CHAMBERS, THIN, THINNER, point_domain
from test_energy import COUPLED, _fd_errors, grid32, smooth_field

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
GROUND1 = ConstraintSpec.ground_state(1)


def verdict(capsys, n, checks, start, limit=None):
    """Print one line for criterion ``n`` and fail the test if any check failed."""
    elapsed = time.perf_counter() - start
    failed = [name for name, ok in checks.items() if not ok]
    if limit is not None and elapsed >= limit:
        failed.append(f"runtime {elapsed:.1f}s >= {limit}s")
    line = f"criterion {n:2d}: {'PASS' if not failed else 'FAIL'} ({elapsed:.1f}s)"
    if failed:
        line += " failed: " + "; ".join(failed)
    with capsys.disabled():
        print("\n" + line)
    assert not failed, line


@pytest.fixture(scope="module")
def ground64():
    dom = build_dumbbell([(0, 0, 1, 1)], [], 1 / 64)
    pot = Potential.cubic([1.0])
    t0 = time.perf_counter()
    u, rep = minimize(dom, pot, GROUND1, None, initial_guess(dom, 1))
    return dom, pot, u, rep, time.perf_counter() - t0


def test_criterion_01_derivatives(capsys):
    t0 = time.perf_counter()
    dom = grid32()
    rng = np.random.default_rng(6)
    worst, ratios = 0.0, []
    for _ in range(20):
        u = smooth_field(dom, rng, 2, 1.0)
        v = smooth_field(dom, rng, 2, 10.0)
        w = smooth_field(dom, rng, 2, 10.0)
        e4 = _fd_errors(dom, COUPLED, u, v, w, 1e-4)
        e5 = _fd_errors(dom, COUPLED, u, v, w, 1e-5)
        worst = max(worst, *e5)
        ratios += [a / b for a, b in zip(e4, e5)]
    verdict(capsys, 1, {"rel err < 1e-6": worst < 1e-6,
                        "ratio in [50, 200]": 50 <= min(ratios) and max(ratios) <= 200},
            t0, limit=10)


def test_criterion_02_assumptions(capsys):
    t0 = time.perf_counter()
    ar = check_assumptions(Potential.cubic([1.0, 1.0]), samples=10_000)["AR"]
    neg = check_assumptions(COUPLED, samples=10_000)
    pos = check_assumptions(Potential.cubic([1.0, 1.0], [[0, 1], [1, 0]]), samples=10_000)
    f3 = pos["F3"]
    verdict(capsys, 2, {
        "beta=0 AR margin < 1e-12": abs(ar.worst_margin) < 1e-12,
        "beta=-1 passes F1-F4": all(neg[f].passed for f in ("F1", "F2", "F3", "F4")),
        "beta=+1 fails F3 with witness": not f3.passed and f3.argmin is not None,
    }, t0, limit=5)


def test_criterion_03_ground_state(capsys, ground64):
    t0 = time.perf_counter()
    dom, pot, u, rep, elapsed = ground64
    t0 -= elapsed
    grad = norm_sq(dom, u)
    quartic = dom.cell_volume * float(np.sum(dom.restrict(u) ** 4))
    J = energy(dom, pot, u)
    verdict(capsys, 3, {
        "Converged": rep.status == "Converged",
        "Nehari identity < 1e-8": abs(grad - quartic) / grad < 1e-8,
        "J = ||u||^2/4 < 1e-9": abs(J - grad / 4) / J < 1e-9,
        "|lambda| < 1e-6": float(np.max(np.abs(rep.lam))) < 1e-6,
        "PDE residual < 1e-7": rep.grad_norm < 1e-7,
        "positive": bool(np.all(dom.restrict(u) > 0)),
    }, t0, limit=60)


def test_criterion_04_natural_constraint(capsys, ground64, dumbbell, cubic1, sweep_k1):
    t0 = time.perf_counter()
    dom, pot, u, rep, _ = ground64
    coer = coercivity_check(dom, pot, GROUND1, u)
    rho, _ = injectivity_estimate(dom, pot, GROUND1, u)
    plus = [e.coercivity["vplus_min"] for e in sweep_k1.entries]
    rhos = [e.report.rho for e in sweep_k1.entries]
    verdict(capsys, 4, {
        "ground V- quotient <= -1.9": coer["vminus_max"] <= -1.9,
        "multibump V+ quotient > 0": all(p is not None and p > 0 for p in plus),
        "rho > 0": rho > 0 and all(r > 0 for r in rhos),
    }, t0)


def test_criterion_05_point_oracles(capsys):
    t0 = time.perf_counter()
    dom = point_domain()
    u = scale_to_nehari(dom, Potential.cubic([1.0]), GROUND1, np.array([[0.0, 1.0, 0.0]]))
    c = estimate_c_eta(dom, CutoffFamily(np.ones((1, 3)), np.ones((1, 3))))
    s = estimate_sobolev(dom, "omega")
    verdict(capsys, 5, {
        "root sqrt(8)": abs(u[0, 1] - np.sqrt(8)) < 1e-10,
        "C_eta 0.125": abs(c - 0.125) < 1e-12,
        "Sobolev 0.4204": abs(s - 0.4204) < 1e-3,
    }, t0, limit=1)


def test_criterion_06_multiplicity_k1(capsys, tmp_path):
    t0 = time.perf_counter()
    out = tmp_path / "k1"
    rc = main(["multibump", "--config", str(CONFIGS / "dumbbell_k1.ini"), "--out", str(out)])
    recs = [parse_record(l) for l in (out / "entries.txt").read_text().splitlines()]
    entries = [r for r in recs if r["record"] == "entry"]
    summary = next(r for r in recs if r["record"] == "summary")
    sides = True
    for line in (out / "bumps.csv").read_text().splitlines()[1:]:
        key, _, l, bump, r2 = line.split(",")
        sides &= (float(bump) > float(r2)) == (l in key)
    verdict(capsys, 6, {
        "exit 0": rc == 0,
        "count 3": summary["count"] == "3" and len(entries) == 3,
        "signatures match": all(e["matches"] == "true" for e in entries),
        "bumps on correct side": sides,
        "gap nonempty": summary["gap_nonempty"] == "true",
    }, t0, limit=600)


def test_criterion_07_multiplicity_k2(capsys):
    t0 = time.perf_counter()
    dom = build_dumbbell(CHAMBERS, THIN, 1 / 32)
    res = run_multiplicity(dom, COUPLED, ramp_width=0.125)
    tried = f"h=1/32: {res.count}/{len(res.entries)}"
    if res.count < 9:
        dom = build_dumbbell(CHAMBERS, THINNER, 1 / 48)
        res = run_multiplicity(dom, COUPLED, ramp_width=0.125)
        tried += f", h=1/48 thinner: {res.count}/{len(res.entries)}"
    with capsys.disabled():
        print(f"\n  criterion 7 sweep {tried}")
    verdict(capsys, 7, {
        "9 attempted": len(res.entries) == 9,
        ">= 9 converged and matching": res.count >= 9,
    }, t0, limit=3600)


def test_criterion_08_channel_monotone(capsys, dumbbell, cubic1, sweep_k1):
    t0 = time.perf_counter()
    thin = build_dumbbell(CHAMBERS, THINNER, 1 / 32)
    res_thin = run_multiplicity(thin, cubic1, ramp_width=0.125)
    wide_eta = estimate_c_eta(dumbbell, build_cutoffs(dumbbell, 0.125))
    thin_eta = estimate_c_eta(thin, build_cutoffs(thin, 0.125))
    eps_wide = sweep_k1.summary()["max_small_bump"]
    eps_thin = res_thin.summary()["max_small_bump"]
    with capsys.disabled():
        print(f"\n  C_eta {wide_eta:.6g} -> {thin_eta:.6g}; "
              f"small bump {eps_wide:.6g} -> {eps_thin:.6g}")
    verdict(capsys, 8, {
        "C_eta not larger": thin_eta <= wide_eta,
        "small bump not larger": eps_thin <= eps_wide,
    }, t0)


def test_criterion_09_lower_bound(capsys, ground64, sweep_k1):
    t0 = time.perf_counter()
    dom, pot, u, rep, _ = ground64
    ground = lower_bound_check(dom, pot, u)
    verdict(capsys, 9, {
        "ground state": rep.status == "Converged" and ground["passed"],
        "multibump states": all(e.lower_bound["passed"] for e in sweep_k1.entries
                                if e.status == "Converged"),
    }, t0)


def test_criterion_10_determinism(capsys, tmp_path):
    t0 = time.perf_counter()
    cfg = CONFIGS / "square_ground.ini"
    runs = []
    for name in ("a", "b"):
        assert main(["ground", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        runs.append(tmp_path / name)
    same = all((runs[0] / f).read_bytes() == (runs[1] / f).read_bytes()
               for f in ("report.txt", "u_1.csv"))
    dom = build_dumbbell([(0, 0, 1, 1)], [], 1 / 32)
    pot = Potential.cubic([1.0])
    u = read_grid(runs[0] / "u_1.csv")[None]
    final = next(parse_record(l) for l in (runs[0] / "report.txt").read_text().splitlines()
                 if l.startswith("record=final"))
    E = float(final["energy"])
    verdict(capsys, 10, {
        "byte-identical records": same,
        "CSV energy to 1e-15": abs(energy(dom, pot, u) - E) / E <= 1e-15,
    }, t0)
