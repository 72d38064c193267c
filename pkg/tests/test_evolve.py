import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prolific import BranchingMechanism
from prolific.evolve import (
    SolverConfig,
    SolverError,
    check_identity_conditioned,
    check_identity_consistency,
    grey_integral_inverse,
    integral_residual,
    quadratic_survival_bar,
    quadratic_u,
    quadratic_u_star,
    solve_u,
    solve_u_star,
    solve_w,
    survival_bar,
    write_curves_csv,
)

QUAD = BranchingMechanism.quadratic(1, 1)
STABLE = BranchingMechanism.stable(1, 1, 1.5)
NEVEU = BranchingMechanism.neveu()


@pytest.mark.parametrize("theta", [0.25, 1.0, 2.0, 50.0])
def test_u_matches_logistic_closed_form(theta):
    c = solve_u(QUAD, theta, 5.0)
    np.testing.assert_allclose(c.values, quadratic_u(QUAD, theta, c.times), rtol=0, atol=1e-9)


def test_spot_value_u2_at_one():
    assert float(solve_u(QUAD, 2.0, 1.0)(1.0)) == pytest.approx(2 * math.e / (2 * math.e - 1), abs=1e-10)


@pytest.mark.parametrize("theta", [0.0, 0.5, 3.0])
def test_u_star_matches_riccati_closed_form(theta):
    c = solve_u_star(QUAD, theta, 3.0)
    np.testing.assert_allclose(c.values, quadratic_u_star(QUAD, theta, c.times), atol=1e-10)


def test_zero_initial_datum_stays_zero():
    for mech in (QUAD, STABLE, NEVEU):
        assert np.all(solve_u(mech, 0.0, 2.0).values == 0.0)
        assert np.all(solve_u_star(mech, 0.0, 2.0).values == 0.0)


def test_fixed_point_lambda_star():
    c = solve_u(NEVEU, 1.0, 2.0)
    np.testing.assert_allclose(c.values, 1.0, atol=1e-12)


def test_neveu_closed_form():
    c = solve_u(NEVEU, 2.0, 2.0)
    np.testing.assert_allclose(c.values, 2.0 ** np.exp(-c.times), atol=1e-9)


def test_u_moves_toward_lambda_star():
    for theta in (0.2, 4.0):
        v = solve_u(STABLE, theta, 5.0).values
        assert np.all(np.diff(np.abs(v - STABLE.lambda_star)) <= 1e-12)
        assert abs(v[-1] - STABLE.lambda_star) < abs(theta - STABLE.lambda_star)


def test_u_star_decreases():
    v = solve_u_star(STABLE, 3.0, 2.0).values
    assert np.all(np.diff(v) < 0)


@pytest.mark.parametrize("mech", [QUAD, STABLE], ids=lambda m: m.family)
def test_conditioned_identity(mech):
    err = check_identity_conditioned(mech, (0.25, 1.0, 2.0), 3.0)
    assert err <= 1e-8


@pytest.mark.parametrize("mech", [QUAD, STABLE, NEVEU], ids=lambda m: m.family)
@pytest.mark.parametrize("theta,h", [(0.25, 0.0), (1.0, 0.5), (2.0, 2.0)])
def test_consistency_identity(mech, theta, h):
    assert check_identity_consistency(mech, theta, h, 3.0) <= 1e-6


@pytest.mark.parametrize("mech", [QUAD, STABLE, NEVEU], ids=lambda m: m.family)
def test_integral_form_residual(mech):
    # within ten times the solver tolerance
    for kind in (solve_u, solve_u_star):
        assert integral_residual(mech, kind(mech, 1.5, 2.0)) <= 1e-10


def test_w_initial_and_limits():
    c = solve_w(QUAD, 1.0, 0.5, 2.0)
    assert c.values[0] == pytest.approx(math.exp(-0.5))
    assert np.all((c.values >= 0) & (c.values <= 1))
    # h = 0, theta = 0: nothing is penalised
    np.testing.assert_allclose(solve_w(STABLE, 0.0, 0.0, 1.0).values, 1.0, atol=1e-12)


def test_survival_bar_closed_form():
    c = survival_bar(QUAD, 2.0)
    assert c.meta["closed_form"]
    np.testing.assert_allclose(c.values, quadratic_survival_bar(QUAD, c.times))
    assert float(c(1.0)) == pytest.approx(1 / (math.e - 1), rel=1e-12)
    np.testing.assert_allclose(grey_integral_inverse(QUAD, [0.5, 1.0, 2.0]), quadratic_survival_bar(QUAD, np.array([0.5, 1.0, 2.0])), rtol=1e-12)


def test_survival_bar_dominates_every_u_star():
    grid = [0.25, 0.5, 1.0, 2.0]
    for mech in (QUAD, STABLE):
        vbar = survival_bar(mech, 2.0, grid=grid).values
        for theta in (0.5, 5.0, 1e3):
            assert np.all(solve_u_star(mech, theta, 2.0, grid=grid).values <= vbar + 1e-9)


def test_capped_survival_bar_converges_to_grey_integral():
    grid = [0.5, 1.0, 2.0]
    exact = grey_integral_inverse(STABLE, grid)
    capped = survival_bar(STABLE, 2.0, grid=grid)
    assert np.all(capped.values <= exact)
    assert capped.meta["grey_integral_gap"] == pytest.approx(np.max(exact - capped.values))
    # u*_theta approaches the limit like theta**-1/2 for alpha = 1.5
    far = solve_u_star(STABLE, 1e10, 2.0, grid=grid).values
    assert np.max(np.abs(far - exact)) < capped.meta["grey_integral_gap"] / 50


def test_survival_bar_refuses_without_grey_condition():
    with pytest.raises(SolverError):
        survival_bar(NEVEU, 1.0)


def test_survival_bar_grid_floor():
    with pytest.raises(ValueError):
        survival_bar(QUAD, 1.0, grid=[0.0, 1.0])


def test_negative_theta_rejected():
    with pytest.raises(ValueError):
        solve_u(QUAD, -1.0, 1.0)


def test_stable_u_star_stable_under_tolerance_change():
    fine = float(solve_u_star(STABLE, 1.0, 1.0, grid=[0, 1])(1.0))
    coarse = float(solve_u_star(STABLE, 1.0, 1.0, SolverConfig(rtol=1e-10, atol=1e-11), grid=[0, 1])(1.0))
    assert abs(fine - coarse) <= 1e-9


def test_looser_tolerances_still_close():
    cfg = SolverConfig(rtol=1e-9, atol=1e-10)
    c = solve_u(QUAD, 2.0, 1.0, cfg)
    np.testing.assert_allclose(c.values, quadratic_u(QUAD, 2.0, c.times), atol=1e-7)


@given(theta=st.floats(0.0, 20.0), t=st.floats(0.01, 3.0))
@settings(max_examples=20, deadline=None)
def test_laplace_exponents_monotone_in_theta(theta, t):
    lo = float(solve_u_star(STABLE, theta, t, grid=[0, t])(t))
    hi = float(solve_u_star(STABLE, theta + 0.5, t, grid=[0, t])(t))
    assert hi >= lo - 1e-12


def test_curve_csv(tmp_path):
    p = write_curves_csv([solve_u(QUAD, 1.0, 1.0, grid=[0, 0.5, 1.0])], tmp_path / "c.csv", {"seed": 1})
    text = p.read_text().splitlines()
    assert text[0] == "# seed=1" and text[1] == "t,value,kind,theta,h"
    assert len(text) == 5
