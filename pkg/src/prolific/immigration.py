"""Immigration along the backbone and evolution of the conditioned process.

Three streams feed mass off the backbone:

* continuous rain: excursions of the conditioned excursion measure at rate
  ``2*beta`` per unit backbone time;
* discontinuous immigration: masses ``y`` at rate ``y e^{-ls y} Pi(dy) dr``;
* branch-point immigration: one mass from ``eta_n`` per branching into ``n``.

Every immigrant (and the independent copy started from ``x``) then evolves as
a CSBP with mechanism ``psi*``. Two transition schemes are available:

* ``exact_quadratic`` for ``psi(l) = -a l + b l**2``. With
  ``A = e^{-a t}`` and ``B = (b/a)(1 - e^{-a t})`` the conditioned Laplace
  exponent is ``theta*A / (1 + B*theta)``, so ``X_t`` given ``X_0 = m`` is a
  Poisson(``m*A/B``) number of Exp(mean ``B``) masses. The same formula gives
  the rain: an excursion is alive at age ``s`` with intensity
  ``v(s) = A(s)/B(s)`` and then has Exp(mean ``B(s)``) mass, and the rain over
  ages ``[s1, s2]`` has Laplace transform ``((1 + B1*theta)/(1 + B2*theta))**2``.
* ``tau_leap``: Euler steps of the jump SDE with compensated big jumps,
  a Gaussian term for the diffusion and (optionally) the small jumps, and
  clipping at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Sequence

import numpy as np

from .evolve import quadratic_AB
from .mechanism import BranchingMechanism, MechanismError

# Rain ages below this are drawn as one aggregate (the excursion count diverges at age 0).
RAIN_AGE_FLOOR = 1e-4


class ImmigrationKind(str, Enum):
    CONTINUOUS = "continuous"
    DISCONTINUOUS = "discontinuous"
    BRANCH_POINT = "branch_point"


@dataclass(frozen=True)
class ImmigrationEvent:
    """One immigrant.

    ``mass`` is the initial mass, except for exact rain events, which carry
    their mass at ``observed_at`` (the excursion path itself is never drawn).
    Aggregated rain over very young ages is flagged with ``aggregate``.
    """

    kind: ImmigrationKind
    birth_time: float
    mass: float
    source: str | int
    location: tuple | None = None
    observed_at: float | None = None
    aggregate: bool = False

    @property
    def start_time(self) -> float:
        return self.birth_time if self.observed_at is None else self.observed_at

    def as_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "birth_time": self.birth_time,
            "mass": self.mass,
            "source": self.source,
            "location": self.location,
            "observed_at": self.observed_at,
            "aggregate": self.aggregate,
        }


@dataclass(frozen=True)
class Edge:
    """A piece ``(start, end]`` of one backbone lifespan, with optional end positions."""

    start: float
    end: float
    source: str | int = 0
    start_position: tuple | None = None
    end_position: tuple | None = None
    sigma: float | None = None

    def __post_init__(self):
        if not self.end > self.start:
            raise ValueError("edge must have end > start")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class MassTransitionScheme:
    """How ``psi*``-CSBP masses are moved forward in time.

    For ``tau_leap``: ``step`` is the Euler step, jumps below
    ``small_jump_cutoff`` are dropped or replaced by a Gaussian
    (``small_jump_policy``), and ``rain_mass`` is the start mass of the
    approximate rain used when ``beta > 0``. ``jump_budget`` caps the expected
    number of simulated jumps per step and replicate: above it the cutoff is
    raised by powers of 4 and the extra range is treated as Gaussian.
    """

    variant: str = "tau_leap"
    step: float = 1e-3
    small_jump_cutoff: float = 1e-2
    small_jump_policy: str = "diffusion"
    jump_budget: int = 64
    rain_mass: float = 1e-3

    def __post_init__(self):
        if self.variant not in ("exact_quadratic", "tau_leap"):
            raise ValueError(f"unknown transition scheme {self.variant!r}")
        if self.small_jump_policy not in ("drop", "diffusion"):
            raise ValueError(f"unknown small-jump policy {self.small_jump_policy!r}")
        if self.step <= 0.0 or self.small_jump_cutoff <= 0.0 or self.rain_mass <= 0.0 or self.jump_budget < 1:
            raise ValueError("scheme parameters must be positive")

    @classmethod
    def exact_quadratic(cls) -> "MassTransitionScheme":
        return cls(variant="exact_quadratic")

    @classmethod
    def tau_leap(cls, step: float = 1e-3, small_jump_cutoff: float = 1e-2, small_jump_policy: str = "diffusion", **kw) -> "MassTransitionScheme":
        return cls("tau_leap", step, small_jump_cutoff, small_jump_policy, **kw)

    @property
    def is_exact(self) -> bool:
        return self.variant == "exact_quadratic"

    def check(self, mech: BranchingMechanism) -> None:
        if self.is_exact and mech.family != "quadratic":
            raise MechanismError(f"exact_quadratic transitions need the quadratic family, got {mech.family}")


@dataclass
class TransitionStats:
    """Running diagnostics for tau-leap transitions."""

    steps: int = 0
    clips: int = 0
    raised_cutoff: int = 0
    jumps: int = 0

    def merge(self, other: "TransitionStats") -> None:
        self.steps += other.steps
        self.clips += other.clips
        self.raised_cutoff += other.raised_cutoff
        self.jumps += other.jumps

    def as_dict(self) -> dict:
        return {"steps": self.steps, "clips": self.clips, "raised_cutoff": self.raised_cutoff, "jumps": self.jumps}


class TauLeapKernel:
    """One Euler step of the ``psi*``-CSBP, vectorised over masses."""

    def __init__(self, mech: BranchingMechanism, step: float, cutoff: float, policy: str, budget: int = 64, levels: int = 24):
        self.mech = mech
        self.step = float(step)
        self.q = mech.q
        self.beta = mech.beta
        self.cutoffs = cutoff * 4.0 ** np.arange(levels)
        if mech.has_jumps:
            self.rates = np.array([mech.jump_rate(d) for d in self.cutoffs])
            self.comps = np.array([mech.jump_compensator(d) for d in self.cutoffs])
            small = np.array([mech.small_jump_variance(d) for d in self.cutoffs])
            self.variances = small if policy == "diffusion" else small - small[0]
            with np.errstate(divide="ignore"):
                self.thresholds = np.where(self.rates > 0.0, budget / (self.step * self.rates), np.inf)
        else:
            self.rates = self.comps = self.variances = np.zeros(1)
            self.thresholds = np.array([np.inf])

    def __call__(self, m: np.ndarray, rng: np.random.Generator, stats: TransitionStats | None = None) -> np.ndarray:
        dt = self.step
        level = np.minimum(np.searchsorted(self.thresholds, m, side="left"), self.thresholds.size - 1)
        var = (2.0 * self.beta + self.variances[level]) * m * dt
        out = m - self.q * m * dt + np.sqrt(var) * rng.standard_normal(m.shape)
        if self.mech.has_jumps:
            for k in np.unique(level):
                sel = np.flatnonzero(level == k)
                counts = rng.poisson(m[sel] * dt * self.rates[k])
                total = int(counts.sum())
                if total:
                    sizes = self.mech.sample_jumps(float(self.cutoffs[k]), total, rng)
                    out[sel] += np.bincount(np.repeat(np.arange(sel.size), counts), weights=sizes, minlength=sel.size)
                out[sel] -= m[sel] * dt * self.comps[k]
                if stats is not None:
                    stats.jumps += total
                    if k > 0:
                        stats.raised_cutoff += sel.size
        neg = out < 0.0
        out[neg] = 0.0
        if stats is not None:
            stats.steps += 1
            stats.clips += int(neg.sum())
        return out


@lru_cache(maxsize=64)
def _kernel(mech: BranchingMechanism, step: float, cutoff: float, policy: str, budget: int) -> TauLeapKernel:
    return TauLeapKernel(mech, step, cutoff, policy, budget)


def tau_leap_kernel(mech: BranchingMechanism, scheme: MassTransitionScheme, step: float | None = None) -> TauLeapKernel:
    return _kernel(mech, float(step or scheme.step), scheme.small_jump_cutoff, scheme.small_jump_policy, scheme.jump_budget)


def quadratic_transition(mech: BranchingMechanism, m, dt: float, rng: np.random.Generator):
    """Exact ``psi*`` transition for the quadratic family (Poisson number of Exp masses)."""
    A, B = quadratic_AB(mech, dt)
    n = rng.poisson(np.asarray(m, dtype=float) * (A / B))
    return rng.gamma(n, B)


def csbp_star_transition(
    mech: BranchingMechanism,
    m,
    dt: float,
    scheme: MassTransitionScheme,
    rng: np.random.Generator,
    stats: TransitionStats | None = None,
):
    """Move mass(es) ``m`` forward by ``dt`` under the conditioned mechanism."""
    scheme.check(mech)
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    scalar = np.ndim(m) == 0
    arr = np.atleast_1d(np.asarray(m, dtype=float)).copy()
    if np.any(arr < 0.0):
        raise ValueError("masses must be non-negative")
    if scheme.is_exact:
        out = quadratic_transition(mech, arr, dt, rng)
    else:
        n_sub = max(1, int(round(dt / scheme.step)))
        kernel = tau_leap_kernel(mech, scheme, dt / n_sub)
        out = arr
        for _ in range(n_sub):
            out = kernel(out, rng, stats)
    return float(out[0]) if scalar else out


# -- continuous rain -------------------------------------------------------


def rain_survivor_mean(mech: BranchingMechanism, age_lo: float, age_hi: float) -> float:
    """Expected number of rain excursions born at ages in ``[age_lo, age_hi]`` still alive (quadratic)."""
    a, b = mech.a, mech.b
    lo = math.log(-math.expm1(-a * age_lo)) if age_lo > 0.0 else -math.inf
    hi = math.log(-math.expm1(-a * age_hi))
    return 2.0 * mech.beta / b * (hi - lo)


def sample_rain_ages(mech: BranchingMechanism, age_lo: float, age_hi: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Ages with density proportional to ``v(s) = a e^{-a s} / (b (1 - e^{-a s}))`` on ``[age_lo, age_hi]``."""
    a = mech.a
    lo = np.log(-np.expm1(-a * age_lo))
    hi = np.log(-np.expm1(-a * age_hi))
    level = lo + rng.random(size) * (hi - lo)
    return -np.log1p(-np.exp(level)) / a


def rain_aggregate(B_lo, B_hi, rng: np.random.Generator) -> np.ndarray:
    """Total rain mass over an age window, drawn from ``((1 + B_lo t)/(1 + B_hi t))**2``.

    That transform is the square of a mixture of an atom at zero (weight
    ``B_lo/B_hi``) and an Exp(mean ``B_hi``) law, so two iid draws are summed.
    """
    B_lo = np.asarray(B_lo, dtype=float)
    B_hi = np.asarray(B_hi, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        p_zero = np.where(B_hi > 0.0, B_lo / B_hi, 1.0)
    n = (rng.random(B_hi.shape) >= p_zero).astype(np.int64) + (rng.random(B_hi.shape) >= p_zero)
    return rng.gamma(n, np.where(B_hi > 0.0, B_hi, 1.0)) * (n > 0)


def sample_continuous_contribution(
    mech: BranchingMechanism,
    edge: Edge,
    t: float,
    scheme: MassTransitionScheme,
    rng: np.random.Generator,
    age_floor: float = RAIN_AGE_FLOOR,
) -> list[ImmigrationEvent]:
    """Continuous rain along ``edge``.

    Exact (quadratic): the excursions still alive at ``t`` with their masses at
    ``t``; ages below ``age_floor`` are returned as one aggregate event.
    Tau-leap: excursions approximated by ``psi*``-CSBPs started at
    ``scheme.rain_mass``, arriving at rate ``2*beta/rain_mass``.
    """
    if edge.end > t * (1 + 1e-12):
        raise ValueError("edge must end by the observation time")
    scheme.check(mech)
    if mech.beta == 0.0:
        return []
    events: list[ImmigrationEvent] = []
    if not scheme.is_exact:
        n = rng.poisson(2.0 * mech.beta / scheme.rain_mass * edge.length)
        times = np.sort(edge.start + edge.length * rng.random(n))
        locs = _bridge_locations(edge, times, rng)
        for r, loc in zip(times, locs):
            events.append(ImmigrationEvent(ImmigrationKind.CONTINUOUS, float(r), scheme.rain_mass, edge.source, loc))
        return events

    age_lo, age_hi = t - edge.end, t - edge.start
    if age_lo < age_floor:
        cut = min(age_floor, age_hi)
        B = quadratic_AB(mech, np.array([age_lo, cut]))[1]
        mass = float(rain_aggregate(B[0], B[1], rng))
        if mass > 0.0:
            events.append(ImmigrationEvent(ImmigrationKind.CONTINUOUS, t - cut, mass, edge.source, None, t, True))
        age_lo = cut
    if age_hi > age_lo:
        n = rng.poisson(rain_survivor_mean(mech, age_lo, age_hi))
        ages = sample_rain_ages(mech, age_lo, age_hi, n, rng)
        masses = rng.exponential(quadratic_AB(mech, ages)[1])
        order = np.argsort(-ages)
        births = t - ages[order]
        locs = _bridge_locations(edge, births, rng)
        for r, y, loc in zip(births, masses[order], locs):
            events.append(ImmigrationEvent(ImmigrationKind.CONTINUOUS, float(r), float(y), edge.source, loc, t))
    return events


# -- discontinuous and branch-point immigration ----------------------------


def sample_discontinuous_events(
    mech: BranchingMechanism,
    edge: Edge,
    horizon: float,
    eps: float,
    rng: np.random.Generator,
) -> list[ImmigrationEvent]:
    """Jump immigrants of size ``>= eps`` along ``edge`` (empty without jumps)."""
    if edge.end > horizon * (1 + 1e-12):
        raise ValueError("edge extends past the horizon")
    if eps <= 0.0:
        raise ValueError("eps must be positive")
    if not mech.has_jumps or math.isinf(eps):
        return []
    n = rng.poisson(mech.immigration_rate(eps) * edge.length)
    times = np.sort(edge.start + edge.length * rng.random(n))
    masses = mech.sample_immigrant_sizes(eps, n, rng)
    locs = _bridge_locations(edge, times, rng)
    return [
        ImmigrationEvent(ImmigrationKind.DISCONTINUOUS, float(r), float(y), edge.source, loc)
        for r, y, loc in zip(times, masses, locs)
    ]


def discontinuous_bias_bound(mech: BranchingMechanism, eps: float, backbone_length: float) -> float:
    """Expected immigrant mass left out by the cutoff over ``backbone_length`` time units."""
    return mech.immigration_neglected_mass(eps) * backbone_length


def sample_branchpoint_events(mech: BranchingMechanism, tree, rng: np.random.Generator) -> list[ImmigrationEvent]:
    """One ``eta_n`` immigrant at every branching of ``tree`` before the horizon."""
    idx = tree.branch_nodes()
    if idx.size == 0:
        return []
    masses = np.atleast_1d(mech.sample_eta(tree.offspring[idx], rng))
    labels = tree.labels()
    out = []
    for i, y in zip(idx.tolist(), masses.tolist()):
        loc = None if tree.death_position is None else tuple(tree.death_position[i].tolist())
        out.append(ImmigrationEvent(ImmigrationKind.BRANCH_POINT, float(tree.death[i]), float(y), labels[i], loc))
    return out


def tree_edges(tree, sigma: float | None = None) -> list[Edge]:
    """Lifespans of ``tree`` clipped to its horizon, with end positions when present."""
    labels = tree.labels()
    ends = tree.segment_ends()
    edges = []
    for i, lab in enumerate(labels):
        if ends[i] <= tree.birth[i]:
            continue
        sp = ep = None
        if tree.birth_position is not None:
            sp = tuple(tree.birth_position[i].tolist())
            ep = tuple(tree.death_position[i].tolist())
        edges.append(Edge(float(tree.birth[i]), float(ends[i]), lab, sp, ep, sigma))
    return edges


def _bridge_locations(edge: Edge, times: np.ndarray, rng: np.random.Generator) -> list:
    """Brownian-bridge positions at sorted ``times`` between the edge end points."""
    if edge.start_position is None or edge.sigma is None:
        return [None] * len(times)
    x = np.asarray(edge.start_position, dtype=float)
    end = np.asarray(edge.end_position, dtype=float)
    s = edge.start
    out = []
    for r in times:
        span = edge.end - s
        w = (r - s) / span if span > 0.0 else 1.0
        var = edge.sigma**2 * (r - s) * (edge.end - r) / span if span > 0.0 else 0.0
        x = x + w * (end - x) + math.sqrt(max(var, 0.0)) * rng.standard_normal(x.shape)
        s = r
        out.append(tuple(x.tolist()))
    return out


def evolve_immigrant(
    mech: BranchingMechanism,
    event: ImmigrationEvent,
    checkpoints: Sequence[float],
    scheme: MassTransitionScheme,
    rng: np.random.Generator,
    stats: TransitionStats | None = None,
) -> np.ndarray:
    """Masses of one immigrant at each checkpoint (all at or after its start time)."""
    cps = np.asarray(checkpoints, dtype=float)
    start = event.start_time
    if np.any(cps < start - 1e-12) or np.any(np.diff(cps) < 0.0):
        raise ValueError("checkpoints must be sorted and not precede the immigrant")
    out = np.empty(cps.size)
    mass, now = float(event.mass), start
    for k, c in enumerate(cps):
        if c > now and mass > 0.0:
            mass = csbp_star_transition(mech, mass, c - now, scheme, rng, stats)
        now = max(now, c)
        out[k] = mass
    return out


# -- vectorised streams along a forest (used by the Monte Carlo engine) ---


@dataclass
class EventBatch:
    """Immigrants as columns: replicate index, birth time, mass."""

    replicate: np.ndarray = field(default_factory=lambda: np.empty(0, np.int64))
    time: np.ndarray = field(default_factory=lambda: np.empty(0))
    mass: np.ndarray = field(default_factory=lambda: np.empty(0))

    @staticmethod
    def concat(batches: Sequence["EventBatch"]) -> "EventBatch":
        if not batches:
            return EventBatch()
        return EventBatch(
            np.concatenate([b.replicate for b in batches]),
            np.concatenate([b.time for b in batches]),
            np.concatenate([b.mass for b in batches]),
        )


def _poisson_along(seg_rep, seg_start, seg_end, rate: float, rng: np.random.Generator):
    length = seg_end - seg_start
    counts = rng.poisson(rate * length)
    rep = np.repeat(seg_rep, counts)
    time = np.repeat(seg_start, counts) + np.repeat(length, counts) * rng.random(rep.size)
    return rep, time


def discontinuous_batch(mech: BranchingMechanism, seg_rep, seg_start, seg_end, eps: float, rng: np.random.Generator) -> EventBatch:
    if not mech.has_jumps:
        return EventBatch()
    rep, time = _poisson_along(seg_rep, seg_start, seg_end, mech.immigration_rate(eps), rng)
    return EventBatch(rep, time, mech.sample_immigrant_sizes(eps, rep.size, rng))


def approximate_rain_batch(mech: BranchingMechanism, seg_rep, seg_start, seg_end, rain_mass: float, rng: np.random.Generator) -> EventBatch:
    if mech.beta == 0.0:
        return EventBatch()
    rep, time = _poisson_along(seg_rep, seg_start, seg_end, 2.0 * mech.beta / rain_mass, rng)
    return EventBatch(rep, time, np.full(rep.size, rain_mass))


def branchpoint_batch(mech: BranchingMechanism, forest, rng: np.random.Generator) -> EventBatch:
    idx = forest.branch_nodes()
    if idx.size == 0 or not mech.has_jumps:
        return EventBatch()
    return EventBatch(forest.replicate[idx], forest.death[idx], np.atleast_1d(mech.sample_eta(forest.offspring[idx], rng)))


def exact_rain_totals(
    mech: BranchingMechanism,
    seg_rep,
    seg_start,
    seg_end,
    window: tuple[float, float],
    n_replicates: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-replicate rain mass at ``window[1]`` from backbone time inside ``window``."""
    lo, hi = window
    r1 = np.maximum(seg_start, lo)
    r2 = np.minimum(seg_end, hi)
    live = r2 > r1
    if not live.any():
        return np.zeros(n_replicates)
    _, B_lo = quadratic_AB(mech, hi - r2[live])
    _, B_hi = quadratic_AB(mech, hi - r1[live])
    mass = rain_aggregate(B_lo, B_hi, rng)
    return np.bincount(seg_rep[live], weights=mass, minlength=n_replicates)
