"""Command line entry point: ``prolific {classify,solve,simulate,verify,report}``."""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, output
from .acceptance import run_suite
from .backbone import PopulationCapExceeded, sample_backbone
from .config import Config, ConfigError, load_config
from .evolve import (
    SolverError,
    check_identity_conditioned,
    check_identity_consistency,
    integral_residual,
    quadratic_survival_bar,
    quadratic_u,
    quadratic_u_star,
    solve_u,
    solve_u_star,
    solve_w,
    survival_bar,
)
from .immigration import sample_branchpoint_events, sample_continuous_contribution, sample_discontinuous_events, tree_edges
from .mechanism import MechanismError, classify
from .montecarlo import (
    EstimateReport,
    Outcomes,
    bonferroni_note,
    estimate_laplace,
    extinction_test,
    joint_laplace_test,
    mean_mass_test,
    monotone_in_theta,
    poissonization_test,
    simulate,
)
from .rng import Stream, keyed_rng

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
LOG_STREAM = 99

CSBP_BANNER = (
    "CSBP-only: psi'(0+) = -inf, so the mass has infinite mean. Only the total "
    "mass is simulated; spatial marks are disabled."
)


@dataclass
class Context:
    cfg: Config
    args: argparse.Namespace

    @property
    def seed(self) -> int:
        return self.args.seed if self.args.seed is not None else self.cfg.scenario.seed

    @property
    def out(self) -> Path:
        return Path(self.args.out or self.cfg.output.directory)

    @property
    def meta(self) -> dict:
        return {**output.provenance(self.seed, self.cfg.digest()), "family": self.cfg.mechanism.family}

    def wants(self, fmt: str) -> bool:
        return fmt in self.cfg.output.formats


# -- classify --------------------------------------------------------------


def cmd_classify(ctx: Context) -> int:
    mech = ctx.cfg.mechanism.build()
    try:
        prof = classify(mech)
    except MechanismError as exc:
        print(f"rejected: {mech.describe()}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(mech.describe())
    for key, val in prof.as_dict().items():
        print(f"  {key:16s} {val:.12g}" if isinstance(val, float) else f"  {key:16s} {val}")
    if prof.csbp_only:
        print(CSBP_BANNER)
    if not prof.non_explosive:
        print("warning: the mechanism can explode; simulate and verify will refuse it")
    return EXIT_OK


# -- solve -----------------------------------------------------------------

CURVE_COLUMNS = ("t", "value", "kind", "theta", "h", "closed_form")
IDENTITY_COLUMNS = ("check", "params", "value", "bound", "pass")


def _closed(mech, kind: str, theta: float, t: np.ndarray):
    if mech.family != "quadratic":
        return None
    if kind == "u":
        return quadratic_u(mech, theta, t)
    if kind == "u_star":
        return quadratic_u_star(mech, theta, t)
    if kind == "survival_bar":
        return quadratic_survival_bar(mech, t)
    return None


def solve_curves(ctx: Context):
    """All curves for the configured grids; failures are collected per curve."""
    cfg = ctx.cfg
    mech = mech_checked(cfg)
    scfg = cfg.solver.build()
    T = cfg.scenario.horizon
    grid = np.linspace(0.0, T, scfg.grid_points)
    thetas = sorted({0.0, *cfg.scenario.thetas})
    jobs = [(f"u[theta={th:g}]", lambda th=th: solve_u(mech, th, T, scfg, grid)) for th in thetas]
    jobs += [(f"u_star[theta={th:g}]", lambda th=th: solve_u_star(mech, th, T, scfg, grid)) for th in thetas]
    jobs += [(f"w[theta={th:g},h={h:g}]", lambda th=th, h=h: solve_w(mech, th, h, T, scfg, grid)) for th, h in cfg.scenario.joint_points]
    if classify(mech).grey_condition:
        jobs.append(("survival_bar", lambda: survival_bar(mech, T, scfg, np.linspace(scfg.time_floor, T, scfg.grid_points))))
    curves, failures = [], []
    for name, job in jobs:
        try:
            curves.append(job())
        except (SolverError, ValueError, ArithmeticError) as exc:
            failures.append((name, str(exc)))
    return mech, scfg, grid, curves, failures


def identity_rows(ctx: Context, mech, scfg, grid, curves) -> list[dict]:
    T = ctx.cfg.scenario.horizon
    thetas = ctx.cfg.scenario.thetas
    rows = []
    err = check_identity_conditioned(mech, thetas, T, scfg, grid)
    rows.append({"check": "conditioned", "params": f"thetas={list(thetas)}", "value": err, "bound": 1e-8, "pass": err <= 1e-8})
    for th, h in ctx.cfg.scenario.joint_points:
        err = check_identity_consistency(mech, th, h, T, scfg, grid)
        rows.append({"check": "consistency", "params": f"theta={th:g},h={h:g}", "value": err, "bound": 1e-6, "pass": err <= 1e-6})
    for c in curves:
        if c.kind in ("u", "u_star"):
            r = integral_residual(mech, c)
            rows.append({"check": f"integral_residual_{c.kind}", "params": f"theta={c.theta:g}", "value": r, "bound": 1e-8, "pass": r <= 1e-8})
    ls = mech.lambda_star
    chi = max(abs(float(mech.chi(u, lam)) - mech.chi_levy(u, lam)) for u in (0.0, 0.5, 1.0, 2.0) for lam in (-0.5 * ls, 0.25, 1.0, 3.0))
    rows.append({"check": "chi_forms", "params": "u in {0,0.5,1,2}", "value": chi, "bound": 1e-10, "pass": chi <= 1e-10})
    return rows


def cmd_solve(ctx: Context) -> int:
    return _solve(ctx)[0]


def _solve(ctx: Context):
    mech, scfg, grid, curves, failures = solve_curves(ctx)
    rows = []
    for c in curves:
        closed = _closed(mech, c.kind, c.theta, c.times)
        for i, (t, v, kind, th, h) in enumerate(c.rows()):
            rows.append({"t": t, "value": v, "kind": kind, "theta": th, "h": h, "closed_form": "" if closed is None else float(closed[i])})
    output.write_csv(ctx.out / "curves.csv", rows, CURVE_COLUMNS, ctx.meta)
    ident = identity_rows(ctx, mech, scfg, grid, curves)
    ident += [{"check": "solver_failure", "params": name, "value": msg, "bound": "", "pass": False} for name, msg in failures]
    output.write_csv(ctx.out / "identities.csv", ident, IDENTITY_COLUMNS, ctx.meta)
    for r in ident:
        val = f"{r['value']:.2e}" if isinstance(r["value"], float) else r["value"]
        print(f"{'PASS' if r['pass'] else 'FAIL'} {r['check']} [{r['params']}] {val}")
    if ctx.wants("png"):
        from .plotting import plot_curves

        plot_curves(curves, ctx.out / "curves.png", _caption(ctx))
    print(f"wrote {len(curves)} curves to {ctx.out}")
    return (EXIT_OK if not failures and all(r["pass"] for r in ident) else EXIT_FAIL), curves


# -- simulate --------------------------------------------------------------


def mech_checked(cfg: Config):
    mech = cfg.mechanism.build()
    classify(mech)
    return mech


def scenario_reports(ctx: Context, out: Outcomes) -> list[EstimateReport]:
    cfg = ctx.cfg
    scfg = cfg.solver.build()
    scn = out.scenario
    rel = cfg.scheme.rel_tol
    reports: list[EstimateReport] = []
    if scn.poissonized:
        for t in scn.checkpoints:
            for th in cfg.scenario.thetas:
                reports.append(estimate_laplace(out, th, t, rel, scfg))
        prof = classify(scn.mechanism)
        if prof.finite_mean and not np.isinf(out.mass).any():
            reports += [mean_mass_test(out, t) for t in scn.checkpoints if t > 0]
        T = scn.checkpoints[-1]
        for s in cfg.scenario.poissonization_s:
            for th in cfg.scenario.thetas[:2]:
                reports.append(poissonization_test(out, s, th, T))
        reports += extinction_test(out, scfg)
    else:
        for th, h in cfg.scenario.joint_points:
            for t in scn.checkpoints:
                reports.append(joint_laplace_test(out, th, h, t, rel, scfg))
    return reports


def run_simulation(ctx: Context) -> tuple[Outcomes, list[EstimateReport], dict]:
    mech = mech_checked(ctx.cfg)
    scn = ctx.cfg.to_scenario(seed=ctx.seed, replicates=ctx.args.replicates)
    t0 = time.perf_counter()
    out = simulate(scn, threads=ctx.args.threads)
    elapsed = time.perf_counter() - t0
    reports = scenario_reports(ctx, out)
    mono = {f"{t:g}": monotone_in_theta(out, t, ctx.cfg.scenario.thetas) for t in scn.checkpoints}
    prof = classify(mech)
    payload = {
        "mechanism": mech.describe(),
        "profile": prof.as_dict(),
        "config": ctx.cfg.model_dump(mode="json"),
        "replicates": scn.replicates,
        "seconds": elapsed,
        "threads": ctx.args.threads,
        "diagnostics": out.diagnostics,
        "summary": out.summary_rows(),
        "estimates": [dict(r.row(), tolerance=r.tolerance, note=r.note) for r in reports],
        "monotone_in_theta": mono,
        "multiple_testing": bonferroni_note(reports),
        "tail": _tail_summary(out),
    }
    if prof.csbp_only:
        payload["banner"] = CSBP_BANNER
    return out, reports, payload


def _tail_summary(out: Outcomes) -> dict:
    """Upper quantiles of the finite mass at the last checkpoint (tail monitoring only)."""
    m = out.mass[:, -1]
    m = m[np.isfinite(m)]
    if m.size == 0:
        return {}
    qs = (0.5, 0.9, 0.99, 0.999)
    return {f"q{q:g}": float(v) for q, v in zip(qs, np.quantile(m, qs))} | {"max": float(m.max())}


def write_simulation(ctx: Context, out: Outcomes, reports, payload) -> None:
    meta = ctx.meta
    output.write_csv(ctx.out / "summary.csv", out.summary_rows(), ("t", "mean_mass", "se_mass", "frac_zero", "mean_count", "capped"), meta)
    if ctx.wants("csv"):
        output.write_csv(ctx.out / "estimates.csv", [r.row() for r in reports], EstimateReport.CSV_COLUMNS, meta)
    if ctx.wants("json"):
        output.write_json(ctx.out / "report.json", payload, meta)
    if ctx.wants("jsonl"):
        write_logs(ctx)


def write_logs(ctx: Context) -> None:
    """Tree and immigration-event logs of one illustrative replicate, from dedicated streams."""
    mech = ctx.cfg.mechanism.build()
    scn = ctx.cfg.to_scenario(seed=ctx.seed)
    rng = lambda s: keyed_rng(ctx.seed, LOG_STREAM, int(s))
    n0 = scn.fixed_count if not scn.poissonized else int(rng(Stream.INITIAL).poisson(mech.lambda_star * scn.x))
    try:
        tree = sample_backbone(mech, n0, scn.horizon, rng(Stream.BACKBONE), cap=scn.live_cap)
        capped = None
    except PopulationCapExceeded as exc:
        tree, capped = exc.tree, exc.capped_from
    meta = dict(ctx.meta, initial_count=n0, capped_from=capped)
    output.write_jsonl(ctx.out / "tree.jsonl", (n.as_dict() for n in tree.nodes()), meta)
    scheme = scn.resolved_scheme()
    events = sample_branchpoint_events(mech, tree, rng(Stream.BRANCH_POINT))
    horizon = scn.horizon if capped is None else capped
    rain, jumps = rng(Stream.RAIN), rng(Stream.DISCONTINUOUS)
    for edge in tree_edges(tree):
        if edge.end > horizon:
            continue
        events += sample_discontinuous_events(mech, edge, scn.horizon, scn.resolved_eps(), jumps)
        events += sample_continuous_contribution(mech, edge, scn.horizon, scheme, rain)
    events.sort(key=lambda e: e.birth_time)
    output.write_jsonl(ctx.out / "events.jsonl", (e.as_dict() for e in events), meta)


def _print_reports(reports) -> int:
    fails = 0
    for r in reports:
        print(r.line() + (f" ({r.note})" if r.note else ""))
        fails += r.passed is False
    return fails


def cmd_simulate(ctx: Context) -> int:
    out, reports, payload = run_simulation(ctx)
    write_simulation(ctx, out, reports, payload)
    _print_reports(reports)
    print(f"{out.replicates} replicates in {payload['seconds']:.1f}s; {out.diagnostics['capped_replicates']} capped; outputs in {ctx.out}")
    return EXIT_OK


# -- verify / report -------------------------------------------------------


def cmd_verify(ctx: Context | None, args: argparse.Namespace) -> int:
    """With a config: the scenario checks. Without one: the full acceptance suite."""
    if ctx is not None:
        out, reports, payload = run_simulation(ctx)
        write_simulation(ctx, out, reports, payload)
        fails = _print_reports(reports)
        print(payload["multiple_testing"])
        print(f"{'PASS' if fails == 0 else 'FAIL'}: {fails} of {sum(r.passed is not None for r in reports)} checks outside their band")
        return EXIT_OK if fails == 0 else EXIT_FAIL
    only = [int(c) for c in args.criteria.split(",")] if args.criteria else None
    results = run_suite(seed=args.seed, scale=args.scale, threads=args.threads, only=only)
    for r in results:
        print(r.summary())
        for line in r.lines:
            print("    " + line)
    if args.out:
        rows = [{"criterion": r.number, "title": r.title, "line": line} for r in results for line in r.lines]
        output.write_csv(Path(args.out) / "acceptance.csv", rows, ("criterion", "title", "line"), output.provenance(args.seed, None))
    ok = all(r.passed for r in results)
    print("acceptance: " + ("PASS" if ok else "FAIL"))
    return EXIT_OK if ok else EXIT_FAIL


def cmd_report(ctx: Context) -> int:
    from .plotting import plot_curves, plot_estimates, plot_mass_histogram

    status, curves = _solve(ctx)
    out, reports, payload = run_simulation(ctx)
    write_simulation(ctx, out, reports, payload)
    fails = _print_reports(reports)
    cap = _caption(ctx)
    if not ctx.wants("png"):
        plot_curves(curves, ctx.out / "curves.png", cap)
    if any(r.statistic == "laplace" for r in reports):
        plot_estimates(reports, ctx.out / "estimates.png", cap)
    plot_mass_histogram(out, ctx.out / "mass.png", cap)
    print(f"report written to {ctx.out}")
    return EXIT_OK if status == EXIT_OK and fails == 0 else EXIT_FAIL


def _caption(ctx: Context) -> str:
    return f"{ctx.cfg.mechanism.build().describe()} | seed {ctx.seed} | config {ctx.cfg.digest()} | v{__version__}"


# -- argument parsing ------------------------------------------------------


def _positive_int(text: str) -> int:
    val = int(text)
    if val < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return val


def _seed(text: str) -> int:
    val = int(text, 0)
    if not 0 <= val < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return val


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prolific", description="Backbone construction and Monte Carlo checks for supercritical CSBPs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="scenario file (YAML)")
    common.add_argument("--seed", type=_seed, help="master seed (overrides the config)")
    common.add_argument("--replicates", type=_positive_int, help="number of replicates (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker processes")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("classify", parents=[common], help="print the mechanism profile")
    sub.add_parser("solve", parents=[common], help="write evolution curves and identity checks")
    sub.add_parser("simulate", parents=[common], help="run replicates and write estimates")
    v = sub.add_parser("verify", parents=[common], help="scenario checks, or the full acceptance suite without --config")
    v.add_argument("--criteria", help="comma-separated criterion numbers (suite mode)")
    v.add_argument("--scale", type=float, default=1.0, help="replicate multiplier (suite mode)")
    sub.add_parser("report", parents=[common], help="solve + simulate + figures")
    return parser


COMMANDS = {"classify": cmd_classify, "solve": cmd_solve, "simulate": cmd_simulate, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command != "verify" and args.config is None:
        print(f"error: {args.command} needs --config", file=sys.stderr)
        return EXIT_INPUT
    try:
        ctx = Context(load_config(args.config), args) if args.config else None
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        if args.command == "verify":
            return cmd_verify(ctx, args)
        return COMMANDS[args.command](ctx)
    except MechanismError as exc:
        print(f"rejected: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
