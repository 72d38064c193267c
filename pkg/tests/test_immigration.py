import math

import numpy as np
import pytest
from scipy import integrate

from prolific import BranchingMechanism, MechanismError
from prolific.backbone import sample_backbone
from prolific.evolve import quadratic_AB, quadratic_u_star, solve_u_star
from prolific.immigration import (
    Edge,
    ImmigrationKind,
    MassTransitionScheme,
    TransitionStats,
    csbp_star_transition,
    discontinuous_bias_bound,
    evolve_immigrant,
    exact_rain_totals,
    quadratic_transition,
    rain_aggregate,
    rain_survivor_mean,
    sample_branchpoint_events,
    sample_continuous_contribution,
    sample_discontinuous_events,
    sample_rain_ages,
    tree_edges,
)
from prolific.rng import keyed_rng

QUAD = BranchingMechanism.quadratic(1, 1)
STABLE = BranchingMechanism.stable(1, 1, 1.5)
NEVEU = BranchingMechanism.neveu()
EXACT = MassTransitionScheme.exact_quadratic()


def laplace(values, theta):
    return float(np.mean(np.exp(-theta * values))), float(np.std(np.exp(-theta * values)) / math.sqrt(values.size))


@pytest.mark.parametrize("m,dt,theta", [(1.0, 0.5, 1.0), (3.0, 1.0, 2.0), (0.2, 0.1, 5.0)])
def test_exact_quadratic_transition_laplace(m, dt, theta):
    x = quadratic_transition(QUAD, np.full(200_000, m), dt, keyed_rng(1))
    est, se = laplace(x, theta)
    assert abs(est - math.exp(-m * float(quadratic_u_star(QUAD, theta, dt)))) <= 4 * se


def test_exact_transition_extinction_probability():
    x = quadratic_transition(QUAD, np.full(200_000, 1.0), 1.0, keyed_rng(2))
    A, B = quadratic_AB(QUAD, 1.0)
    p0 = math.exp(-A / B)
    assert abs(np.mean(x == 0) - p0) <= 4 * math.sqrt(p0 * (1 - p0) / x.size)


@pytest.mark.parametrize("mech", [STABLE, NEVEU], ids=lambda m: m.family)
def test_tau_leap_transition_laplace(mech):
    scheme = MassTransitionScheme.tau_leap(step=1e-3)
    stats = TransitionStats()
    x = csbp_star_transition(mech, np.full(50_000, 1.0), 0.5, scheme, keyed_rng(3), stats)
    oracle = math.exp(-float(solve_u_star(mech, 1.0, 0.5, grid=[0, 0.5])(0.5)))
    est, se = laplace(x, 1.0)
    assert abs(est - oracle) <= max(4 * se, 0.01 * oracle)
    assert stats.steps == 500 and stats.jumps > 0


def test_tau_leap_mean_is_unbiased_for_stable():
    scheme = MassTransitionScheme.tau_leap(step=1e-3)
    x = csbp_star_transition(STABLE, np.full(50_000, 1.0), 0.5, scheme, keyed_rng(4))
    want = math.exp(-STABLE.q * 0.5)
    assert abs(x.mean() - want) <= 4 * x.std() / math.sqrt(x.size)


def test_drop_policy_is_pure_drift_for_small_masses():
    scheme = MassTransitionScheme.tau_leap(step=1e-2, small_jump_policy="drop")
    stats = TransitionStats()
    x = csbp_star_transition(STABLE, np.full(2000, 0.01), 0.5, scheme, keyed_rng(5), stats)
    assert np.all(x >= 0) and stats.clips == 0 and stats.steps == 50


def test_diffusion_clips_are_counted():
    scheme = MassTransitionScheme.tau_leap(step=0.1)
    stats = TransitionStats()
    x = csbp_star_transition(STABLE, np.full(2000, 0.01), 0.5, scheme, keyed_rng(5), stats)
    assert np.all(x >= 0) and stats.clips > 0


def test_scheme_validation():
    with pytest.raises(MechanismError):
        csbp_star_transition(STABLE, 1.0, 0.1, EXACT, keyed_rng(0))
    with pytest.raises(ValueError):
        MassTransitionScheme.tau_leap(step=0.0)
    with pytest.raises(ValueError):
        MassTransitionScheme("euler")
    with pytest.raises(ValueError):
        csbp_star_transition(QUAD, -1.0, 0.1, EXACT, keyed_rng(0))


def test_rain_survivor_count_matches_quadrature():
    a, b = QUAD.a, QUAD.b
    dens = lambda s: 2 * QUAD.beta * a * math.exp(-a * s) / (b * -math.expm1(-a * s))
    want, _ = integrate.quad(dens, 0.1, 0.9)
    assert rain_survivor_mean(QUAD, 0.1, 0.9) == pytest.approx(want, rel=1e-10)
    assert math.isinf(rain_survivor_mean(QUAD, 0.0, 0.9))


def test_rain_ages_distribution():
    ages = sample_rain_ages(QUAD, 0.1, 0.9, 100_000, keyed_rng(6))
    assert ages.min() >= 0.1 and ages.max() <= 0.9
    frac = rain_survivor_mean(QUAD, 0.1, 0.4) / rain_survivor_mean(QUAD, 0.1, 0.9)
    assert abs(np.mean(ages <= 0.4) - frac) < 0.006


def test_rain_aggregate_transform():
    B_lo, B_hi = 0.2, 0.8
    y = rain_aggregate(np.full(200_000, B_lo), np.full(200_000, B_hi), keyed_rng(7))
    for theta in (0.5, 2.0):
        est, se = laplace(y, theta)
        assert abs(est - ((1 + B_lo * theta) / (1 + B_hi * theta)) ** 2) <= 4 * se


def test_exact_rain_event_level_matches_aggregate():
    """Event-level rain on a unit edge observed at its end has transform (1 + B(1) theta)^-2."""
    theta = 1.0
    _, B1 = quadratic_AB(QUAD, 1.0)
    totals = np.empty(20_000)
    rng = keyed_rng(8)
    for i in range(totals.size):
        totals[i] = sum(e.mass for e in sample_continuous_contribution(QUAD, Edge(0.0, 1.0), 1.0, EXACT, rng))
    est, se = laplace(totals, theta)
    assert abs(est - (1 + B1 * theta) ** -2) <= 4 * se


def test_exact_rain_events_flag_young_ages():
    events = sample_continuous_contribution(QUAD, Edge(0.0, 1.0), 1.0, EXACT, keyed_rng(9))
    assert all(e.kind is ImmigrationKind.CONTINUOUS and e.observed_at == 1.0 for e in events)
    young = [e for e in events if e.aggregate]
    assert all(e.birth_time >= 1.0 - 1e-4 - 1e-12 for e in young)


def test_exact_rain_totals_vectorised():
    n = 100_000
    rep = np.arange(n)
    totals = exact_rain_totals(QUAD, rep, np.zeros(n), np.full(n, 0.5), (0.0, 1.0), n, keyed_rng(10))
    _, B_lo = quadratic_AB(QUAD, 0.5)
    _, B_hi = quadratic_AB(QUAD, 1.0)
    est, se = laplace(totals, 1.0)
    assert abs(est - ((1 + B_lo) / (1 + B_hi)) ** 2) <= 4 * se


def test_discontinuous_events_rate_and_sizes():
    eps = 0.01
    rng = keyed_rng(11)
    counts, sizes = [], []
    for _ in range(4000):
        ev = sample_discontinuous_events(STABLE, Edge(0.0, 0.5), 1.0, eps, rng)
        counts.append(len(ev))
        sizes += [e.mass for e in ev]
        assert all(0.0 <= e.birth_time <= 0.5 for e in ev)
    rate = STABLE.immigration_rate(eps) * 0.5
    assert abs(np.mean(counts) - rate) <= 4 * math.sqrt(rate / 4000)
    assert min(sizes) >= eps
    assert sample_discontinuous_events(QUAD, Edge(0.0, 0.5), 1.0, eps, rng) == []


def test_discontinuous_bias_bound_is_neglected_mass():
    assert discontinuous_bias_bound(STABLE, 1e-3, 2.0) == pytest.approx(2.0 * STABLE.immigration_neglected_mass(1e-3))


def test_branchpoint_events_follow_tree():
    tree = sample_backbone(STABLE, 3, 1.0, keyed_rng(12))
    events = sample_branchpoint_events(STABLE, tree, keyed_rng(13))
    assert len(events) == tree.branch_nodes().size
    assert all(e.kind is ImmigrationKind.BRANCH_POINT and e.mass > 0 for e in events)
    quad_tree = sample_backbone(QUAD, 3, 1.0, keyed_rng(14))
    assert all(e.mass == 0.0 for e in sample_branchpoint_events(QUAD, quad_tree, keyed_rng(15)))


def test_edges_and_bridge_locations():
    from prolific.backbone import Motion

    tree = sample_backbone(STABLE, 1, 1.0, keyed_rng(16), motion=Motion(), motion_rng=keyed_rng(17))
    edges = tree_edges(tree, sigma=1.0)
    assert len(edges) == tree.size
    ev = []
    rng = keyed_rng(18)
    for e in edges:
        ev += sample_discontinuous_events(STABLE, e, 1.0, 1e-3, rng)
    assert ev and all(e.location is not None and len(e.location) == 1 for e in ev)


def test_evolve_immigrant_checkpoints():
    from prolific.immigration import ImmigrationEvent

    event = ImmigrationEvent(ImmigrationKind.DISCONTINUOUS, 0.25, 1.0, 0)
    path = evolve_immigrant(QUAD, event, [0.25, 0.5, 1.0], EXACT, keyed_rng(19))
    assert path[0] == 1.0 and path.size == 3 and np.all(path >= 0)
    with pytest.raises(ValueError):
        evolve_immigrant(QUAD, event, [0.1, 1.0], EXACT, keyed_rng(19))


def test_edge_validation():
    with pytest.raises(ValueError):
        Edge(1.0, 1.0)
    with pytest.raises(ValueError):
        sample_discontinuous_events(STABLE, Edge(0.0, 2.0), 1.0, 0.01, keyed_rng(0))
