"""Command-line entry point: parse a run configuration, orchestrate
solve -> transform -> validate -> simulate, and emit CSV/report
artifacts with a checksum manifest.

Config files are flat ``key = value`` text ('#' starts a comment).  The
seven market keys (r, mu, sigma, lambda_s, lambda_o, c, big_t) are
required and have no defaults; everything else defaults as documented
in the README.  Unknown keys are errors, and validation reports every
problem at once, not just the first.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dual, fbp, simulate as sim
from .model import (ModelParams, ParameterError, phi, paper_example_params,
                    safe_level)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_SOLVE = 3
EXIT_VERIFY = 4
EXIT_SIMULATE = 5

_MODEL_KEYS = ("r", "mu", "sigma", "lambda_s", "lambda_o", "c", "big_t")

_DEFAULTS = {
    "a": 0.0,
    "a_grid_min": 0.0,
    "a_grid_max": None,       # defaults to c
    "a_grid_n": 11,
    "n_y": 2000,
    "n_t": 500,
    "y_span_low": 1e-3,
    "y_span_high": 1e3,
    "omega": 1.5,
    "psor_tol": 1e-9,
    "max_iter": 10000,
    "n_w": 401,
    "n_paths": 100000,
    "sim_dt": 0.002,
    "seed": None,
    "w0": None,
    "t0": 0.0,
    "strategy_source": "surface",
    "antithetic": False,
    "use_bridge": True,
    "out_dir": "out",
}

_INT_KEYS = {"a_grid_n", "n_y", "n_t", "max_iter", "n_w", "n_paths", "seed"}
_BOOL_KEYS = {"antithetic", "use_bridge"}
_STR_KEYS = {"strategy_source", "out_dir"}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass(frozen=True)
class RunConfig:
    params: ModelParams
    a: float = 0.0
    a_grid_min: float = 0.0
    a_grid_max: float | None = None
    a_grid_n: int = 11
    n_y: int = 2000
    n_t: int = 500
    y_span_low: float = 1e-3
    y_span_high: float = 1e3
    omega: float = 1.5
    psor_tol: float = 1e-9
    max_iter: int = 10000
    n_w: int = 401
    n_paths: int = 100000
    sim_dt: float = 0.002
    seed: int | None = None
    w0: float | None = None
    t0: float = 0.0
    strategy_source: str = "surface"
    antithetic: bool = False
    use_bridge: bool = True
    out_dir: str = "out"

    def a_nodes(self):
        hi = self.params.c if self.a_grid_max is None else self.a_grid_max
        return np.linspace(self.a_grid_min, hi, self.a_grid_n)

    def sim_config(self) -> sim.SimConfig:
        return sim.SimConfig(n_paths=self.n_paths, dt=self.sim_dt, seed=self.seed,
                             w0=self.w0, a0=self.a, t0=self.t0,
                             strategy_source=self.strategy_source,
                             antithetic=self.antithetic, use_bridge=self.use_bridge)


def parse_kv(text: str) -> dict:
    """Raw key/value pairs from the flat config text."""
    out = {}
    errors = []
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errors.append(f"line {ln}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            errors.append(f"line {ln}: duplicate key {key!r}")
            continue
        out[key] = val
    if errors:
        raise ConfigError(errors)
    return out


def build_config(kv: dict) -> RunConfig:
    """Validated RunConfig from raw key/value strings; every error is
    reported, including unknown keys."""
    errors = []
    known = set(_MODEL_KEYS) | set(_DEFAULTS)
    for key in kv:
        if key not in known:
            errors.append(f"unknown key {key!r}")

    def convert(key, raw):
        try:
            if key in _BOOL_KEYS:
                low = raw.lower()
                if low not in ("true", "false"):
                    raise ValueError
                return low == "true"
            if key in _INT_KEYS:
                return int(raw)
            if key in _STR_KEYS:
                return raw
            return float(raw)
        except ValueError:
            errors.append(f"key {key!r}: cannot parse value {raw!r}")
            return None

    model_vals = {}
    for key in _MODEL_KEYS:
        if key not in kv:
            errors.append(f"missing required key {key!r}")
        else:
            model_vals[key] = convert(key, kv[key])

    params = None
    if len(model_vals) == len(_MODEL_KEYS) and all(v is not None for v in model_vals.values()):
        try:
            params = ModelParams(**model_vals)
        except ParameterError as exc:
            errors.extend(str(exc).split("; "))

    other = {}
    for key, default in _DEFAULTS.items():
        if key in kv:
            other[key] = convert(key, kv[key])
        else:
            other[key] = default

    if params is not None and not errors:
        cfg = RunConfig(params=params, **other)
        errors.extend(_config_errors(cfg))
        if not errors:
            return cfg
    raise ConfigError(errors or ["invalid configuration"])


def _config_errors(cfg: RunConfig):
    errs = []
    p = cfg.params
    if not 0.0 <= cfg.a <= p.c:
        errs.append(f"a must lie in [0, c]=[0, {p.c}] (got {cfg.a})")
    hi = p.c if cfg.a_grid_max is None else cfg.a_grid_max
    if not 0.0 <= cfg.a_grid_min < hi <= p.c:
        errs.append(f"annuity grid [{cfg.a_grid_min}, {hi}] must be increasing within [0, c]")
    if cfg.a_grid_n < 3:
        errs.append(f"a_grid_n must be >= 3 (got {cfg.a_grid_n})")
    if cfg.n_y < 8 or cfg.n_t < 3:
        errs.append(f"grid too small (n_y={cfg.n_y}, n_t={cfg.n_t})")
    if not 0.0 < cfg.omega < 2.0:
        errs.append(f"omega must lie in (0, 2) (got {cfg.omega})")
    if cfg.psor_tol <= 0 or cfg.max_iter < 1:
        errs.append(f"invalid PSOR controls (tol={cfg.psor_tol}, max_iter={cfg.max_iter})")
    if cfg.n_w < 2:
        errs.append(f"n_w must be >= 2 (got {cfg.n_w})")
    if cfg.n_paths < 1:
        errs.append(f"n_paths must be >= 1 (got {cfg.n_paths})")
    if not 0.0 < cfg.sim_dt <= p.big_t / 100.0:
        errs.append(f"sim_dt must lie in (0, T/100] (got {cfg.sim_dt})")
    if not 0.0 <= cfg.t0 < p.big_t:
        errs.append(f"t0 must lie in [0, T) (got {cfg.t0})")
    if cfg.strategy_source not in ("surface", "terminal"):
        errs.append(f"strategy_source must be 'surface' or 'terminal' (got {cfg.strategy_source!r})")
    return errs


def parse_config(text: str) -> RunConfig:
    return build_config(parse_kv(text))


def serialize_config(cfg: RunConfig) -> str:
    """Full-precision text that parses back to an identical RunConfig."""
    lines = []
    p = cfg.params
    for key in _MODEL_KEYS:
        lines.append(f"{key} = {getattr(p, key):.17g}")
    for key in _DEFAULTS:
        val = getattr(cfg, key)
        if val is None:
            continue
        if key in _BOOL_KEYS:
            lines.append(f"{key} = {'true' if val else 'false'}")
        elif key in _INT_KEYS:
            lines.append(f"{key} = {val}")
        elif key in _STR_KEYS:
            lines.append(f"{key} = {val}")
        else:
            lines.append(f"{key} = {val:.17g}")
    return "\n".join(lines) + "\n"


class OutputWriter:
    """Writes artifacts under one directory and records a manifest of
    (name, row count, sha256)."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.records = []

    def _register(self, name, rows):
        digest = hashlib.sha256((self.dir / name).read_bytes()).hexdigest()
        self.records.append((name, rows, digest))

    def write_text(self, name, text):
        path = self.dir / name
        path.write_text(text)
        self._register(name, len(text.splitlines()))
        return path

    def write_rows(self, name, header, rows):
        import csv

        path = self.dir / name
        n = 0
        with open(path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(header)
            for row in rows:
                wr.writerow(row)
                n += 1
        self._register(name, n)
        return path

    def add_file(self, name, rows):
        self._register(name, rows)

    def manifest(self):
        lines = [f"{name} rows={rows} sha256={digest}"
                 for name, rows, digest in sorted(self.records)]
        text = "\n".join(lines) + "\n"
        (self.dir / "manifest.txt").write_text(text)
        return text


def _emit_solution(out: OutputWriter, sol, surface, cfg: RunConfig):
    sol.to_csv(out.dir / "dual_surface.csv", out.dir / "boundaries.csv")
    out.add_file("dual_surface.csv", sol.grid.n_t + 1)
    out.add_file("boundaries.csv", sol.grid.n_t + 1)
    surface.to_csv(out.dir / "ruin_surface.csv")
    out.add_file("ruin_surface.csv", sol.grid.n_t * cfg.n_w + 1)


def cmd_solve(cfg: RunConfig) -> int:
    out = OutputWriter(cfg.out_dir)
    grid = fbp.build_grid(cfg.params, cfg.a, n_y=cfg.n_y, n_t=cfg.n_t,
                          span_low=cfg.y_span_low, span_high=cfg.y_span_high)
    sol = fbp.solve_obstacle(cfg.a, grid, cfg.params, omega=cfg.omega,
                             tol=cfg.psor_tol, max_iter=cfg.max_iter)
    surface = dual.build_ruin_surface(sol, n_w=cfg.n_w)
    _emit_solution(out, sol, surface, cfg)
    out.manifest()
    print(f"solved a={cfg.a}: worst residual {np.nanmax(sol.residuals):.3e}, "
          f"max iterations {sol.iterations.max()}")
    print(f"artifacts in {out.dir}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    out = OutputWriter(cfg.out_dir)
    grid = fbp.build_grid(cfg.params, cfg.a, n_y=cfg.n_y, n_t=cfg.n_t,
                          span_low=cfg.y_span_low, span_high=cfg.y_span_high)
    sol = fbp.solve_obstacle(cfg.a, grid, cfg.params, omega=cfg.omega,
                             tol=cfg.psor_tol, max_iter=cfg.max_iter)
    surface = dual.build_ruin_surface(sol, n_w=cfg.n_w)
    report = dual.check_verification_conditions(surface, cfg.params)
    worst_res = float(np.nanmax(fbp.complementarity_report(sol)))
    concavity = fbp.concavity_violation(sol)
    feasible = bool(np.all(sol.values[:-1] <= sol.obstacle[:-1]))
    lines = [
        f"annuity income a = {cfg.a}",
        f"grid n_y={cfg.n_y} n_t={cfg.n_t}",
        "",
        f"complementarity_residual = {worst_res:.6e} (tolerance {cfg.psor_tol:.1e}) "
        f"{'PASS' if worst_res < cfg.psor_tol else 'FAIL'}",
        f"obstacle_feasibility = {'exact PASS' if feasible else 'violated FAIL'}",
        f"concavity_violation = {concavity:.6e} (tolerance 1.0e-08) "
        f"{'PASS' if concavity < 1e-8 else 'FAIL'}",
    ] + report.lines()
    _emit_solution(out, sol, surface, cfg)
    out.write_text("verify_report.txt", "\n".join(lines) + "\n")
    out.manifest()
    print("\n".join(lines))
    ok = report.passed and worst_res < cfg.psor_tol and feasible and concavity < 1e-8
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_sweep(cfg: RunConfig) -> int:
    out = OutputWriter(cfg.out_dir)
    sols = dual.solve_annuity_sweep(cfg.params, cfg.a_nodes(), n_y=cfg.n_y, n_t=cfg.n_t,
                                    omega=cfg.omega, tol=cfg.psor_tol,
                                    max_iter=cfg.max_iter, span_low=cfg.y_span_low,
                                    span_high=cfg.y_span_high)
    sweep = dual.validate_ineq(sols, cfg.params, n_w=cfg.n_w)
    lines = sweep.report_lines()
    out.write_text("sweep_report.txt", "\n".join(lines) + "\n")
    worst = int(np.argmin(sweep.margin_by_a))
    grid = sols[0].grid
    mm = dual.ineq_margin_surface(sols, sweep.a_nodes, worst)
    out.write_rows(
        "ineq_margin_worst_a.csv", ["t", "y", "margin"],
        ((f"{t:.17g}", f"{yv:.17g}", f"{mm[k, j]:.17g}")
         for k, t in enumerate(grid.t_nodes[:-1])
         for j, yv in enumerate(grid.y_nodes)))
    out.write_rows(
        "ineq_margin_by_a.csv", ["a", "min_margin"],
        ((f"{a:.17g}", f"{m:.17g}") for a, m in zip(sweep.a_nodes, sweep.margin_by_a)))
    out.manifest()
    print("\n".join(lines))
    return EXIT_OK if sweep.ineq_passed else EXIT_VERIFY


def cmd_simulate(cfg: RunConfig) -> int:
    errs = []
    if cfg.seed is None:
        errs.append("simulate requires an explicit seed (no silent nondeterminism)")
    if cfg.w0 is None:
        errs.append("simulate requires w0")
    if errs:
        raise ConfigError(errs)
    out = OutputWriter(cfg.out_dir)
    grid = fbp.build_grid(cfg.params, cfg.a, n_y=cfg.n_y, n_t=cfg.n_t,
                          span_low=cfg.y_span_low, span_high=cfg.y_span_high)
    sol = fbp.solve_obstacle(cfg.a, grid, cfg.params, omega=cfg.omega,
                             tol=cfg.psor_tol, max_iter=cfg.max_iter)
    surface = dual.build_ruin_surface(sol, n_w=cfg.n_w)
    scfg = cfg.sim_config()
    report = sim.simulate_ruin(scfg, surface, cfg.params)
    pde = surface.value(cfg.w0, cfg.t0)
    gap = report.ruin_estimate - pde
    z = gap / report.std_error if report.std_error > 0 else 0.0
    lines = report.lines() + [
        f"pde_value = {pde:.6f}",
        f"difference = {gap:+.6f} ({z:+.2f} standard errors)",
    ]
    logs = sim.path_diagnostics(scfg, surface, cfg.params)
    sim.diagnostics_csv(logs, out.dir / "path_events.csv")
    out.add_file("path_events.csv", sum(len(r) for r in logs) + 1)
    out.write_text("sim_report.txt", "\n".join(lines) + "\n")
    out.manifest()
    print("\n".join(lines))
    return EXIT_OK if abs(z) <= 3.0 else EXIT_SIMULATE


PAPER_EXAMPLE_SEED = 20260809


def paper_example_config(out_dir="out-paper-example") -> RunConfig:
    return RunConfig(params=paper_example_params(), a=1.0,
                     a_grid_min=0.9, a_grid_max=1.1, a_grid_n=3, n_t=1000,
                     n_paths=200000, seed=PAPER_EXAMPLE_SEED, w0=10.0,
                     out_dir=out_dir)


def run_paper_example(cfg: RunConfig | None = None) -> int:
    """Reproduce the baseline numerical example end to end: the ruin
    surface at t in {0, T/2, T} with the no-annuity overlay, free
    boundaries, verification report, and a Monte Carlo cross-check at
    three wealth levels."""
    cfg = cfg or paper_example_config()
    p = cfg.params
    out = OutputWriter(cfg.out_dir)

    grid = fbp.build_grid(p, cfg.a, n_y=cfg.n_y, n_t=cfg.n_t,
                          span_low=cfg.y_span_low, span_high=cfg.y_span_high)
    sol = fbp.solve_obstacle(cfg.a, grid, p, omega=cfg.omega,
                             tol=cfg.psor_tol, max_iter=cfg.max_iter)
    surface = dual.build_ruin_surface(sol, n_w=cfg.n_w)
    _emit_solution(out, sol, surface, cfg)

    gap_c = p.c - cfg.a
    w_plot = np.linspace(0.0, safe_level(cfg.a, 0.0, p), 501)
    t_samples = (0.0, p.big_t / 2.0, p.big_t)
    rows = []
    for w in w_plot:
        vals = [surface.value(float(w), t) for t in t_samples]
        rows.append([f"{w:.17g}"] + [f"{v:.17g}" for v in vals])
    out.write_rows("figure1_psi.csv",
                   ["w"] + [f"psi_t{t:g}" for t in t_samples], rows)
    out.write_rows("figure1_overlay.csv", ["w", "phi_no_annuity"],
                   ((f"{w:.17g}", f"{phi(float(w), gap_c, p):.17g}") for w in w_plot))

    sweep_sols = dual.solve_annuity_sweep(p, cfg.a_nodes(), n_y=cfg.n_y, n_t=cfg.n_t,
                                          omega=cfg.omega, tol=cfg.psor_tol,
                                          max_iter=cfg.max_iter)
    sweep = dual.validate_ineq(sweep_sols, p, n_w=cfg.n_w)
    report = dual.check_verification_conditions(surface, p, sweep=sweep)
    lines = [f"safe level wbar(a={cfg.a}, t=0) = {safe_level(cfg.a, 0.0, p):.6f}", ""]
    lines += report.lines()
    lines += ["", "annuity purchase inequality:"] + sweep.report_lines()

    mc_ok = True
    lines += ["", f"Monte Carlo cross-check ({cfg.n_paths} paths, dt={cfg.sim_dt}, "
              f"seed={cfg.seed}):"]
    for w0 in (5.0, 10.0, 15.0):
        scfg = replace(cfg.sim_config(), w0=w0)
        rep = sim.simulate_ruin(scfg, surface, p)
        pde = dual.ruin_probability(w0, cfg.a, 0.0, sweep)
        z = (rep.ruin_estimate - pde) / rep.std_error if rep.std_error > 0 else 0.0
        mc_ok &= abs(z) <= 3.0
        lines.append(f"  w0={w0:<5g} mc={rep.ruin_estimate:.5f}+-{rep.std_error:.5f} "
                     f"pde={pde:.5f} ({z:+.2f} standard errors) "
                     f"{'PASS' if abs(z) <= 3.0 else 'FAIL'}")

    out.write_text("verify_report.txt", "\n".join(lines) + "\n")
    out.write_text("config.txt", serialize_config(cfg))
    out.manifest()
    print("\n".join(lines))
    print(f"artifacts in {out.dir}")
    ok = report.passed and mc_ok
    return EXIT_OK if ok else (EXIT_VERIFY if not report.passed else EXIT_SIMULATE)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ruinfree",
        description="Minimum lifetime-ruin probability with deferred life annuities")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
            ("solve", "solve the dual obstacle problem and emit surfaces"),
            ("verify", "solve and check the verification-lemma margins"),
            ("sweep", "solve over an annuity grid and validate the purchase inequality"),
            ("simulate", "Monte Carlo cross-check of the solved surface"),
            ("paper-example", "reproduce the baseline example end to end")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", help="flat key = value configuration file",
                        default=None)
        sp.add_argument("--out", help="output directory (overrides out_dir)", default=None)
        sp.add_argument("--seed", type=int, help="override the simulation seed", default=None)
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override any config key (repeatable)")
    args = parser.parse_args(argv)

    try:
        kv = {}
        if args.config is not None:
            kv = parse_kv(Path(args.config).read_text())
        elif args.command != "paper-example":
            raise ConfigError(["--config is required for this command"])
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError([f"--set expects KEY=VALUE, got {item!r}"])
            key, val = item.split("=", 1)
            kv[key.strip()] = val.strip()
        if args.seed is not None:
            kv["seed"] = str(args.seed)
        if args.out is not None:
            kv["out_dir"] = args.out

        if args.command == "paper-example":
            base = paper_example_config()
            if kv:
                merged = parse_kv(serialize_config(base))
                merged.update(kv)
                cfg = build_config(merged)
            else:
                cfg = base
            return run_paper_example(cfg)

        cfg = build_config(kv)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "verify":
            return cmd_verify(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        raise AssertionError(args.command)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (fbp.GridError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except fbp.ConvergenceError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    except fbp.BoundaryStructureError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVE


if __name__ == "__main__":
    sys.exit(main())
