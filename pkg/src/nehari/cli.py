"""Batch front-end: ``nehari {check,constants,ground,multibump} --config run.ini``."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import logging
import sys
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np

from .constraint import ConstraintSpec, coercivity_check, multiplier
from .energy import Potential, check_assumptions, energy
from .errors import ConfigError, NehariError
from .experiments import all_choices, build_initializer, initial_guess, run_multiplicity
from .grid_domain import build_cutoffs, build_dumbbell, compute_constants
from .records import record, write_grid
from .solver import CONVERGED, SolverConfig, lower_bound_check, minimize, ps_diagnostic

log = logging.getLogger("nehari")

SECTIONS = ("geometry", "potential", "constraint", "solver", "experiment")


@dataclass
class RunConfig:
    chambers: list
    channels: list
    h: float
    ramp_width: Optional[float]
    kind: str = "cubic"
    mu: list = field(default_factory=lambda: [1.0])
    beta: Optional[np.ndarray] = None
    p: float = 4.0
    c_f: Optional[float] = None
    u_bar: Optional[list] = None
    variant: str = "ground"
    L: Optional[list] = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    driver: str = "ground"
    output: str = "out"
    seed: int = 0
    distinct_tol: float = 1e-3
    samples: int = 10_000
    init: str = "torsion"
    config_hash: str = ""

    @property
    def k(self):
        return len(self.mu)


def _line_of(text, section, key):
    current = None
    for n, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip().lower()
        elif current == section and s.split("=", 1)[0].strip().lower() == key:
            return n
    return None


def _number(s):
    s = s.strip()
    if "/" in s:
        return float(Fraction(s))
    return float(s)


def _vector(s):
    return [_number(x) for x in s.replace(",", " ").split()]


def _rects(s):
    out = []
    for part in s.split(";"):
        if not part.strip():
            continue
        v = _vector(part)
        if len(v) != 4:
            raise ValueError(f"rectangle needs 4 numbers, got {len(v)}")
        out.append(tuple(v))
    return out


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    return parse_config(text)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}] (line {_line_of(text, sec, '')})")

    def get(sec, key, conv, default=None, required=False):
        if not cp.has_option(sec, key):
            if required:
                raise ConfigError(f"[{sec}] {key}: missing required field")
            return default
        raw = cp.get(sec, key)
        try:
            return conv(raw)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(
                f"[{sec}] {key} (line {_line_of(text, sec, key)}): {exc}") from exc

    cfg = RunConfig(
        chambers=get("geometry", "chambers", _rects, required=True),
        channels=get("geometry", "channels", _rects, []),
        h=get("geometry", "h", _number, required=True),
        ramp_width=get("geometry", "ramp_width", _number),
    )
    cfg.kind = get("potential", "kind", lambda s: s.strip().lower(), "cubic")
    if cfg.kind not in ("cubic", "pure_power"):
        raise ConfigError(f"[potential] kind (line {_line_of(text, 'potential', 'kind')}): "
                          f"expected cubic or pure_power, got {cfg.kind!r}")
    cfg.mu = get("potential", "mu", _vector, [1.0])
    cfg.beta = get("potential", "beta",
                   lambda s: np.array([_vector(r) for r in s.split(";") if r.strip()]))
    cfg.p = get("potential", "p", _number, 4.0)
    cfg.c_f = get("potential", "c_f", _number)
    cfg.u_bar = get("potential", "u_bar", _vector)
    cfg.variant = get("constraint", "variant", lambda s: s.strip().lower(), "ground")
    cfg.L = get("constraint", "L",
                lambda s: [frozenset(int(x) for x in r.replace(",", " ").split())
                           for r in s.split(";") if r.strip()])
    sc = {}
    for f in fields(SolverConfig):
        conv = int if f.type in ("int", int) else _number
        val = get("solver", f.name, conv)
        if val is not None:
            sc[f.name] = val
    try:
        cfg.solver = SolverConfig(**sc)
    except NehariError as exc:
        raise ConfigError(f"[solver]: {exc}") from exc
    cfg.driver = get("experiment", "driver", lambda s: s.strip().lower(), "ground")
    cfg.output = get("experiment", "output", str.strip, "out")
    cfg.seed = get("experiment", "seed", int, 0)
    cfg.distinct_tol = get("experiment", "distinct_tol", _number, 1e-3)
    cfg.samples = get("experiment", "samples", int, 10_000)
    cfg.init = get("experiment", "init", lambda s: s.strip().lower(), "torsion")
    if cfg.beta is not None and cfg.beta.shape != (cfg.k, cfg.k):
        raise ConfigError(f"[potential] beta (line {_line_of(text, 'potential', 'beta')}): "
                          f"expected {cfg.k}x{cfg.k} matrix, got {cfg.beta.shape}")
    if cfg.L is not None and len(cfg.L) != cfg.k:
        raise ConfigError(f"[constraint] L (line {_line_of(text, 'constraint', 'l')}): "
                          f"expected {cfg.k} chamber sets, got {len(cfg.L)}")
    cfg.config_hash = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
    return cfg


def build_potential(cfg: RunConfig) -> Potential:
    if cfg.kind == "cubic":
        return Potential.cubic(cfg.mu, cfg.beta, cfg.c_f, cfg.u_bar)
    return Potential.pure_power(cfg.mu, cfg.p, cfg.c_f, cfg.u_bar)


def build_domain(cfg: RunConfig):
    return build_dumbbell(cfg.chambers, cfg.channels, cfg.h)


class _Out:
    """Collects records, echoing them to stdout and to ``<out>/<name>``."""

    def __init__(self, outdir: Path, name: str, cfg: RunConfig):
        self.path = outdir / name
        self.tag = {"config_hash": cfg.config_hash, "seed": cfg.seed}
        self.lines = []

    def emit(self, kind, **kv):
        line = record(kind, **self.tag, **kv)
        self.lines.append(line)
        print(line)

    def raw(self, line):
        self.lines.append(line)
        print(line)

    def close(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("".join(l + "\n" for l in self.lines))


def _default_L(cfg, dom):
    if cfg.L is not None:
        return cfg.L
    return [frozenset(range(1, dom.n_chambers + 1))] * cfg.k


def _constants(cfg, dom, pot):
    cuts = build_cutoffs(dom, cfg.ramp_width) if cfg.ramp_width and dom.channels else None
    g = build_initializer(dom, pot, _default_L(cfg, dom), cfg.solver)
    return compute_constants(dom, cuts, pot, g, cfg.seed), cuts


def cmd_check(cfg: RunConfig, outdir: Path) -> int:
    out = _Out(outdir, "check.txt", cfg)
    hard_fail = False
    try:
        dom = build_domain(cfg)
        pot = build_potential(cfg)
        if cfg.ramp_width and dom.channels:
            build_cutoffs(dom, cfg.ramp_width)
    except NehariError as exc:
        out.emit("error", error=type(exc).__name__, message=str(exc))
        out.close()
        return 1
    out.emit("geometry", n_chambers=dom.n_chambers, nx=dom.nx, ny=dom.ny, h=dom.h,
             interior_nodes=dom.n_unknowns)
    consts = None
    try:
        consts, _ = _constants(cfg, dom, pot)
    except NehariError as exc:
        out.emit("warning", error=type(exc).__name__, message=str(exc))
    rep = check_assumptions(
        pot, cfg.samples, cfg.seed,
        c_sob_b=consts.c_sob[("B", pot.p)] if consts else None,
        R=consts.R if consts else None)
    for c in rep.checks.values():
        out.emit("assumption", name=c.name, worst_margin=c.worst_margin, argmin=c.argmin,
                 passed=c.passed)
        if not c.passed:
            if c.name in ("F2", "F3"):
                out.emit("warning", message=f"{c.name} fails; relying on the small-coupling "
                                            "surrogate bound")
            else:
                hard_fail = True
    if rep.surrogate is not None:
        out.emit("surrogate", **rep.surrogate)
    if consts is not None:
        for line in consts.to_record().splitlines():
            out.raw(line)
        (outdir / "constants.txt").parent.mkdir(parents=True, exist_ok=True)
        (outdir / "constants.txt").write_text(consts.to_record(), encoding="utf-8")
    out.close()
    return 1 if hard_fail else 0


def cmd_constants(cfg: RunConfig, outdir: Path) -> int:
    dom = build_domain(cfg)
    pot = build_potential(cfg)
    consts, _ = _constants(cfg, dom, pot)
    text = consts.to_record()
    outdir.mkdir(parents=True, exist_ok=True)
    header = f"config_hash = {cfg.config_hash}\nseed = {cfg.seed}\n"
    (outdir / "constants.txt").write_text(header + text, encoding="utf-8")
    sys.stdout.write(header + text)
    return 0


def cmd_ground(cfg: RunConfig, outdir: Path) -> int:
    dom = build_domain(cfg)
    pot = build_potential(cfg)
    spec = ConstraintSpec.ground_state(pot.k)
    if cfg.init == "zero":
        u0 = np.zeros((pot.k,) + dom.shape)
    else:
        u0 = initial_guess(dom, pot.k)
    u, rep = minimize(dom, pot, spec, None, u0, cfg.solver)
    out = _Out(outdir, "report.txt", cfg)
    for line in rep.records(config_hash=cfg.config_hash, seed=cfg.seed):
        out.raw(line)
    if rep.status == CONVERGED:
        mult = multiplier(dom, pot, spec, u)
        coer = coercivity_check(dom, pot, spec, u, seed=cfg.seed)
        low = lower_bound_check(dom, pot, u, seed=cfg.seed)
        out.emit("multiplier", lam=mult.lam, residual_norm=mult.residual_norm)
        out.emit("coercivity", vminus_max=coer["vminus_max"], passed=coer["passed"])
        out.emit("lower_bound", energy_margin=low["energy_margin"],
                 norm_floor=low["norm_floor"], component_margins=low["component_margins"],
                 passed=low["passed"])
        out.emit("ps", verdict=ps_diagnostic(rep).verdict)
    outdir.mkdir(parents=True, exist_ok=True)
    for i in range(pot.k):
        write_grid(outdir / f"u_{i + 1}.csv", u[i])
    out.close()
    return 0 if rep.status == CONVERGED else 1


def cmd_multibump(cfg: RunConfig, outdir: Path, workers=1, dump_fields=False) -> int:
    dom = build_domain(cfg)
    pot = build_potential(cfg)
    if not cfg.ramp_width:
        raise ConfigError("[geometry] ramp_width is required for multibump")
    choices = None
    if cfg.variant == "multibump" and cfg.L is not None and cfg.driver != "multibump":
        choices = [tuple(cfg.L)]
    res = run_multiplicity(dom, pot, cfg.solver, ramp_width=cfg.ramp_width,
                           distinct_tol=cfg.distinct_tol, seed=cfg.seed, workers=workers,
                           choices=choices)
    outdir.mkdir(parents=True, exist_ok=True)
    out = _Out(outdir, "entries.txt", cfg)
    bumps_lines = ["entry,i,l,bump,r2"]
    trace_lines = ["entry,iter,energy,grad_norm"]
    for e in res.entries:
        loc = e.localization or {}
        kv = dict(entry=e.key, status=e.status, energy=e.energy,
                  signature=None if e.signature is None else
                  ["".join("1" if b else "0" for b in row) for row in e.signature],
                  matches=e.matches, positive=e.positive, retried=e.retried)
        if e.report is not None:
            kv.update(iterations=e.report.iterations, grad_norm=e.report.grad_norm,
                      lam_inf=float(np.max(np.abs(e.report.lam))) if e.report.lam is not None
                      and e.report.lam.size else 0.0)
        if loc:
            kv.update(min_large_ratio=loc["min_large_ratio"], max_small_ratio=loc["max_small_ratio"],
                      separated=loc["separated"])
        if e.coercivity:
            kv.update(vminus_max=e.coercivity["vminus_max"], vplus_min=e.coercivity["vplus_min"])
        if e.lower_bound:
            kv.update(lower_bound_passed=e.lower_bound["passed"])
        if e.message:
            kv.update(message=e.message)
        out.emit("entry", **kv)
        if loc:
            for i in range(loc["bumps"].shape[0]):
                for l in range(loc["bumps"].shape[1]):
                    bumps_lines.append(f"{e.key},{i + 1},{l + 1},%.17g,%.17g"
                                       % (loc["bumps"][i, l], loc["r2"][l]))
        if e.report is not None:
            for t in e.report.trace:
                trace_lines.append(f"{e.key},{t.it},%.17g,%.17g" % (t.energy, t.grad_norm))
        if dump_fields and e.u is not None:
            for i in range(pot.k):
                write_grid(outdir / f"u_{e.key.replace(';', '_')}_{i + 1}.csv", e.u[i])
    summ = res.summary()
    out.emit("summary", **summ)
    if res.surrogate is not None:
        out.emit("surrogate", **res.surrogate)
    out.close()
    (outdir / "bumps.csv").write_text("\n".join(bumps_lines) + "\n", encoding="utf-8")
    (outdir / "energy_traces.csv").write_text("\n".join(trace_lines) + "\n", encoding="utf-8")
    return 0 if res.count == res.expected else 2


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="nehari", description=__doc__)
    ap.add_argument("command", choices=["check", "constants", "ground", "multibump"])
    ap.add_argument("--config", required=True, type=Path)
    ap.add_argument("--out", type=Path, default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--dump-fields", action="store_true")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.solver.seed = args.seed
        outdir = args.out if args.out is not None else Path(cfg.output)
        if args.command == "check":
            return cmd_check(cfg, outdir)
        if args.command == "constants":
            return cmd_constants(cfg, outdir)
        if args.command == "ground":
            return cmd_ground(cfg, outdir)
        return cmd_multibump(cfg, outdir, args.workers, args.dump_fields)
    except NehariError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
