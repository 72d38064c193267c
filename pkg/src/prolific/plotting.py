"""PNG figures for the report command (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evolve import EvolutionCurve  # noqa: E402
from .montecarlo import EstimateReport, Outcomes  # noqa: E402


def _finish(fig, path: Path, caption: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.text(0.01, 0.005, caption, fontsize=6, color="0.4", ha="left", va="bottom")
    fig.tight_layout(rect=(0, 0.03, 1, 1))
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_curves(curves: Sequence[EvolutionCurve], path: Path, caption: str = "") -> Path:
    """One panel per curve kind, one line per parameter value."""
    kinds = list(dict.fromkeys(c.kind for c in curves))
    fig, axes = plt.subplots(1, len(kinds), figsize=(4.2 * len(kinds), 3.4), squeeze=False)
    for ax, kind in zip(axes[0], kinds):
        for c in (c for c in curves if c.kind == kind):
            label = f"theta={c.theta:g}" if c.h is None else f"theta={c.theta:g}, h={c.h:g}"
            if kind == "survival_bar":
                ax.semilogy(c.times, c.values, label="N*(mass > 0 at t)")
            else:
                ax.plot(c.times, c.values, label=label)
        ax.set_title(kind)
        ax.set_xlabel("t")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    return _finish(fig, path, caption)


def plot_estimates(reports: Sequence[EstimateReport], path: Path, caption: str = "") -> Path:
    """Laplace estimates (with 3 SE bars) against the ODE oracle, one panel per checkpoint."""
    lap = [r for r in reports if r.statistic == "laplace"]
    times = sorted({r.t for r in lap})
    if not times:
        raise ValueError("no Laplace estimates to plot")
    fig, axes = plt.subplots(1, len(times), figsize=(3.8 * len(times), 3.4), squeeze=False, sharey=True)
    for ax, t in zip(axes[0], times):
        sel = sorted((r for r in lap if r.t == t), key=lambda r: r.params["theta"])
        th = np.array([r.params["theta"] for r in sel])
        ax.plot(th, [r.oracle for r in sel], "k-", lw=1, label="ODE oracle")
        ax.errorbar(th, [r.estimate for r in sel], yerr=[r.tolerance for r in sel], fmt="o", ms=4, capsize=3, label="Monte Carlo")
        bad = [r for r in sel if r.passed is False]
        if bad:
            ax.plot([r.params["theta"] for r in bad], [r.estimate for r in bad], "rx", ms=9, label="outside band")
        ax.set_title(f"t = {t:g}")
        ax.set_xlabel("theta")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("E exp(-theta * mass)")
    axes[0][0].legend(fontsize=7)
    return _finish(fig, path, caption)


def plot_mass_histogram(out: Outcomes, path: Path, caption: str = "") -> Path:
    """Distribution of the total mass at each checkpoint (positive, finite values)."""
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for k, t in enumerate(out.checkpoints):
        m = out.mass[:, k]
        m = m[np.isfinite(m) & (m > 0)]
        if m.size:
            bins = np.logspace(np.log10(m.min()), np.log10(m.max()), 60) if m.max() > m.min() else 10
            ax.hist(m, bins=bins, histtype="step", density=True, label=f"t={t:g} (zero: {np.mean(out.mass[:, k] == 0):.3f})")
    ax.set_xscale("log")
    ax.set_xlabel("total mass")
    ax.set_ylabel("density")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    return _finish(fig, path, caption)
