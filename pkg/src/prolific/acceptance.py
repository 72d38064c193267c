"""End-to-end verification suite.

Each check returns a :class:`CheckResult` holding one printable line per
sub-check. ``scale`` shrinks replicate counts for smoke runs; the default
``scale=1`` runs every check at full size with the stated tolerances.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats

from .backbone import sample_forest
from .evolve import (
    SolverConfig,
    check_identity_conditioned,
    check_identity_consistency,
    quadratic_u,
    solve_u,
)
from .immigration import MassTransitionScheme
from .mechanism import BranchingMechanism, classify
from .montecarlo import (
    EstimateReport,
    Scenario,
    estimate_laplace,
    extinction_test,
    joint_laplace_test,
    mean_mass_test,
    poissonization_test,
    simulate,
)
from .rng import keyed_rng

THETAS = (0.5, 1.0, 2.0, 5.0)
TIMES = (0.25, 0.5, 1.0)
STEP_LADDER = (2e-3, 1e-3, 5e-4)


@dataclass
class CheckResult:
    number: int
    title: str
    lines: list[str] = field(default_factory=list)
    failures: int = 0
    seconds: float = 0.0
    reports: list[EstimateReport] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def check(self, ok: bool | None, text: str) -> bool | None:
        verdict = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        self.lines.append(f"{verdict} {text}")
        if ok is False:
            self.failures += 1
        return ok

    def add(self, rep: EstimateReport) -> None:
        self.reports.append(rep)
        self.check(rep.passed, rep.line()[5:] + (f" ({rep.note})" if rep.note else ""))

    def summary(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number}: {self.title} ({self.seconds:.1f}s)"


def _reps(n: int, scale: float) -> int:
    return max(64, int(round(n * scale)))


def _bounded(value: float, bound: float) -> bool:
    return bool(np.isfinite(value) and value <= bound)


# -- deterministic checks --------------------------------------------------


def identity_suite(cfg: SolverConfig | None = None) -> CheckResult:
    res = CheckResult(1, "identity suite")
    t0 = time.perf_counter()
    grid = np.linspace(0.0, 3.0, 61)
    mechs = {"quadratic(1,1)": BranchingMechanism.quadratic(1, 1), "stable(1,1,1.5)": BranchingMechanism.stable(1, 1, 1.5)}
    for name, mech in mechs.items():
        err = check_identity_conditioned(mech, (0.25, 1.0, 2.0), 3.0, cfg, grid)
        res.check(_bounded(err, 1e-8), f"{name} conditioned identity max err {err:.2e} <= 1e-08")
        worst = max(check_identity_consistency(mech, th, h, 3.0, cfg, grid) for th in (0.25, 1.0, 2.0) for h in (0.0, 0.5, 2.0))
        res.check(_bounded(worst, 1e-6), f"{name} consistency identity max err {worst:.2e} <= 1e-06")
        ls = mech.lambda_star
        chi_err = max(
            abs(float(mech.chi(u, lam)) - mech.chi_levy(u, lam))
            for u in (0.0, 0.5, 1.0, 2.0)
            for lam in (-0.9 * ls, -0.5 * ls, 0.25, 1.0, 3.0)
        )
        res.check(_bounded(chi_err, 1e-10), f"{name} chi forms agree, max err {chi_err:.2e} <= 1e-10")
    elapsed = time.perf_counter() - t0
    res.check(elapsed < 1.0, f"identity suite runtime {elapsed:.2f}s < 1 s")
    return res


def _binomial_series_pmf(alpha: float, q: float, n: int) -> float:
    """Coefficient of ``s**n`` in ``(1-s)**alpha``, divided by ``q``."""
    return float((-1) ** n * special.binom(alpha, n) / q)


def offspring_suite() -> CheckResult:
    res = CheckResult(2, "backbone offspring law")
    quad = BranchingMechanism.quadratic(1, 1)
    res.check(float(quad.offspring_probability(2)) == 1.0, "quadratic p_2 == 1")
    stab = BranchingMechanism.stable(1, 1, 1.5)
    for n, want in ((2, 0.75), (3, 0.125), (4, 0.046875)):
        got = float(stab.offspring_probability(n))
        series = _binomial_series_pmf(1.5, stab.q, n)
        res.check(abs(got - want) <= 1e-12 and abs(series - want) <= 1e-12, f"stable p_{n} = {got:.15f} (series {series:.15f}, expected {want})")
    _neveu_pmf(res)
    for name, mech in (("quadratic", quad), ("stable", stab), ("neveu", BranchingMechanism.neveu())):
        resid, bound = generator_residual(mech)
        res.check(resid <= bound, f"{name} generator vs truncated pmf residual {resid:.2e} <= q*tail {bound:.2e}")
    return res


def _neveu_pmf(res: CheckResult) -> None:
    neveu = BranchingMechanism.neveu()
    ns = np.arange(2, 2001)
    exact = np.array([float(Fraction(1, int(n) * (int(n) - 1))) for n in ns])
    err = float(np.max(np.abs(neveu.offspring_probability(ns) - exact)))
    res.check(err <= 1e-12, f"neveu p_n vs 1/(n(n-1)) for n <= 2000, max err {err:.2e}")


def generator_residual(mech: BranchingMechanism, n_s: int = 11) -> tuple[float, float]:
    """Max over ``s`` in [0, 1] of ``|F(s) - q(sum_{n<=N} p_n s^n - s)|`` and its bound ``q * tail``."""
    law = mech.offspring_pmf()
    s = np.linspace(0.0, 1.0, n_s)
    series = np.array([np.sum(law.pmf * np.power(si, law.ns, dtype=float)) for si in s])
    resid = float(np.max(np.abs(mech.generator_F(s) - mech.q * (series - s))))
    return resid, mech.q * law.tail * (1 + 1e-9) + 1e-14


def offspring_chisquare(mech: BranchingMechanism, offspring: np.ndarray, top: int = 10, level: float = 0.01) -> tuple[bool, float, float]:
    """Goodness of fit on bins ``2..top`` plus the pooled tail."""
    ns = np.arange(2, top + 1)
    observed = np.append(np.bincount(np.minimum(offspring, top + 1), minlength=top + 2)[2:top + 1], np.sum(offspring > top))
    probs = np.append(mech.offspring_probability(ns), mech.offspring_tail(top))
    stat, p = stats.chisquare(observed, probs / probs.sum() * observed.sum())
    return bool(p >= level), float(stat), float(p)


def backbone_suite(seed: int = 2024, scale: float = 1.0) -> CheckResult:
    res = CheckResult(3, "backbone statistics")
    n = _reps(10_000, scale)
    quad = BranchingMechanism.quadratic(1, 1)
    forest = sample_forest(quad, np.ones(n, dtype=np.int64), 1.0, keyed_rng(seed, 3, 0))
    z1 = forest.prolific_counts([1.0])[:, 0].astype(float)
    mean, se = z1.mean(), z1.std(ddof=1) / math.sqrt(n)
    res.check(abs(mean - math.e) <= 3 * se, f"quadratic mean count at t=1 {mean:.4f} +- {se:.4f} vs e = {math.e:.4f} ({n} trees)")
    off = forest.offspring[forest.branch_nodes()]
    res.check(bool(np.all(off == 2)), f"quadratic: all {off.size} branchings have exactly 2 children")
    for name, mech in (("stable(1,1,1.5)", BranchingMechanism.stable(1, 1, 1.5)), ("neveu", BranchingMechanism.neveu())):
        forest = sample_forest(mech, np.ones(n, dtype=np.int64), 0.5, keyed_rng(seed, 3, 1), live_cap=10_000)
        off = forest.offspring[forest.branch_nodes()]
        ok, stat, p = offspring_chisquare(mech, off)
        res.check(ok, f"{name} offspring chi-square over {off.size} branchings: stat {stat:.2f}, p {p:.3f} >= 0.01")
    return res


# -- Monte Carlo checks ----------------------------------------------------


def quadratic_suite(seed: int = 7, scale: float = 1.0, threads: int = 1) -> tuple[CheckResult, CheckResult]:
    """Laplace grid (criterion 4) and the poissonization identity (criterion 6) from one run."""
    quad = BranchingMechanism.quadratic(1, 1)
    laplace = CheckResult(4, "quadratic Laplace transform")
    pois = CheckResult(6, "poissonization identity")
    u2 = float(solve_u(quad, 2.0, 1.0, grid=[0.0, 1.0])(1.0))
    closed = 2 * math.e / (2 * math.e - 1)
    laplace.check(abs(u2 - closed) <= 1e-9 and abs(float(quadratic_u(quad, 2.0, 1.0)) - closed) <= 1e-12, f"u_2(1) = {u2:.9f} vs 2e/(2e-1) = {closed:.9f}")
    laplace.check(abs(math.exp(-u2) - 0.293640) <= 5e-7, f"oracle exp(-u_2(1)) = {math.exp(-u2):.6f} vs 0.293640")
    out = simulate(Scenario(quad, replicates=_reps(100_000, scale), seed=seed), threads)
    for t in TIMES:
        for th in THETAS:
            laplace.add(estimate_laplace(out, th, t))
    laplace.add(mean_mass_test(out, 1.0))
    for s in (0.25, 0.5, 0.9):
        for th in (0.5, 1.0):
            pois.add(poissonization_test(out, s, th, 1.0))
    return laplace, pois


def fixed_backbone_suite(seed: int = 5, scale: float = 1.0, threads: int = 1) -> CheckResult:
    res = CheckResult(5, "fixed-backbone joint transform")
    quad = BranchingMechanism.quadratic(1, 1)
    for n in (0, 1, 3):
        scn = Scenario(quad, backbone_init="fixed", fixed_count=n, replicates=_reps(100_000, scale), seed=seed + n)
        res.add(joint_laplace_test(simulate(scn, threads), 1.0, 0.5, 1.0))
    return res


def extinction_suite(seed: int = 3, scale: float = 1.0, threads: int = 1) -> CheckResult:
    """Extinction frequencies; the live cap does not affect ``{Lambda_T = 0}``."""
    res = CheckResult(7, "extinction")
    quad = BranchingMechanism.quadratic(1, 1)
    scn = Scenario(quad, horizon=8.0, checkpoints=(8.0,), replicates=_reps(20_000, scale), seed=seed, live_cap=64)
    for rep in extinction_test(simulate(scn, threads)):
        res.add(rep)
    return res


def stable_suite(seed: int = 11, scale: float = 1.0, threads: int = 1, steps: Sequence[float] = STEP_LADDER) -> CheckResult:
    """Tau-leap Laplace grid at the reference step, plus the step-halving bias report.

    The bias metric for a step is the RMS over the grid of the relative
    error ``(estimate - oracle) / oracle``.
    """
    res = CheckResult(8, "stable family, tau-leap")
    mech = BranchingMechanism.stable(1, 1, 1.5)
    ref = 1e-3
    rms = {}
    for step in sorted(set(steps) | {ref}, reverse=True):
        scn = Scenario(mech, replicates=_reps(50_000, scale), seed=seed, scheme=MassTransitionScheme.tau_leap(step=step))
        out = simulate(scn, threads)
        reps = [estimate_laplace(out, th, t, rel_tol=0.02) for t in TIMES for th in THETAS]
        rel = np.array([(r.estimate - r.oracle) / r.oracle for r in reps])
        noise = np.array([r.se / r.oracle for r in reps])
        rms[step] = (float(np.sqrt(np.mean(rel**2))), float(np.sqrt(np.mean(noise**2))))
        if step == ref:
            for r in reps:
                res.add(r)
            res.extra["diagnostics"] = out.diagnostics
    ladder = sorted(rms, reverse=True)
    for coarse, fine in zip(ladder, ladder[1:]):
        (a, na), (b, nb) = rms[coarse], rms[fine]
        res.check(b <= a, f"RMS relative error shrinks under step halving {coarse:g} -> {fine:g}: {a:.4f} -> {b:.4f} (MC noise level {na:.4f}, {nb:.4f})")
    res.extra["step_rms"] = rms
    return res


def neveu_suite(seed: int = 13, scale: float = 1.0, threads: int = 1) -> CheckResult:
    res = CheckResult(9, "infinite-mean path (neveu)")
    mech = BranchingMechanism.neveu()
    prof = classify(mech)
    res.check(not prof.finite_mean and prof.csbp_only, "neveu classified as infinite mean, CSBP-only")
    u = float(solve_u(mech, 2.0, 1.0, grid=[0.0, 1.0])(1.0))
    closed = 2.0 ** math.exp(-1.0)
    res.check(abs(u - closed) <= 1e-9, f"solve_u(theta=2, t=1) = {u:.10f} vs 2^(1/e) = {closed:.10f}")
    scn = Scenario(mech, horizon=1.0, checkpoints=(1.0,), replicates=_reps(20_000, scale), seed=seed)
    out = simulate(scn, threads)
    res.add(estimate_laplace(out, 2.0, 1.0, rel_tol=0.02))
    _neveu_pmf(res)
    resid, bound = generator_residual(mech)
    res.check(resid <= bound, f"neveu generator vs truncated pmf residual {resid:.2e} <= q*tail {bound:.2e}")
    return res


def _timed(fn: Callable, *args, **kw):
    t0 = time.perf_counter()
    out = fn(*args, **kw)
    dt = time.perf_counter() - t0
    for r in out if isinstance(out, tuple) else (out,):
        r.seconds = dt / (len(out) if isinstance(out, tuple) else 1)
    return out


def run_suite(seed: int | None = None, scale: float = 1.0, threads: int = 1, only: Sequence[int] | None = None) -> list[CheckResult]:
    """Run the selected checks (all by default), in numeric order.

    ``seed`` offsets every check's default seed, so ``None`` reproduces the
    reference run.
    """
    off = 0 if seed is None else int(seed)
    want = set(only or range(1, 10))
    results: list[CheckResult] = []
    if 1 in want:
        results.append(_timed(identity_suite))
    if 2 in want:
        results.append(_timed(offspring_suite))
    if 3 in want:
        results.append(_timed(backbone_suite, 2024 + off, scale))
    if want & {4, 6}:
        lap, pois = _timed(quadratic_suite, 7 + off, scale, threads)
        results += [r for r in (lap, pois) if r.number in want]
    if 5 in want:
        results.append(_timed(fixed_backbone_suite, 5 + off, scale, threads))
    if 7 in want:
        results.append(_timed(extinction_suite, 3 + off, scale, threads))
    if 8 in want:
        results.append(_timed(stable_suite, 11 + off, scale, threads))
    if 9 in want:
        results.append(_timed(neveu_suite, 13 + off, scale, threads))
    return sorted(results, key=lambda r: r.number)
