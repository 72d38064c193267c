"""Deterministic evolution equations for spatially constant test functions.

With no spatial motion the mild equations collapse to autonomous ODEs:

* ``u' = -psi(u)``, ``u(0) = theta``: ``E_x exp(-theta X_t) = exp(-x u(t))``.
* ``u*' = -psi*(u*)``, ``u*(0) = theta``: the same under the law conditioned
  to become extinguished.
* ``w' = (psi*(u* - ls*w) - psi*(u*)) / ls``, ``w(0) = exp(-h)``, integrated
  jointly with ``u*``. The convolution in the integral equation for
  ``w = exp(-v)`` only involves ``u*(r)`` and ``w(r)`` at the same age
  ``r = t - s``, so after that substitution it is an autonomous system.
* ``survival_bar(t) = lim_{theta -> inf} u*_theta(t)``, finite under Grey's
  condition; computed in closed form for the quadratic family and from a
  large cap ``theta_cap`` otherwise.

Curves are produced by an adaptive embedded Runge-Kutta pair (DOP853).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import integrate, optimize

from .mechanism import BranchingMechanism, classify


class SolverError(RuntimeError):
    """Step-size control failed or a curve left its invariant region."""


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-11
    atol: float = 1e-12
    method: str = "DOP853"
    theta_cap_factor: float = 1e6
    time_floor: float = 1e-4
    grid_points: int = 301


@dataclass(frozen=True)
class EvolutionCurve:
    """A solution sampled on ``times``; callable for dense evaluation."""

    times: np.ndarray
    values: np.ndarray
    kind: str
    theta: float
    h: float | None = None
    meta: dict = field(default_factory=dict, compare=False)
    _dense: object = field(default=None, repr=False, compare=False)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        if self._dense is None:
            return np.interp(t, self.times, self.values)
        return self._dense(t)

    @property
    def initial_datum(self) -> float:
        return math.exp(-self.h) if self.kind == "w" else self.theta

    def rows(self) -> Iterable[tuple]:
        h = "" if self.h is None else self.h
        for t, v in zip(self.times, self.values):
            yield (float(t), float(v), self.kind, self.theta, h)


def _grid(T: float, grid, cfg: SolverConfig) -> np.ndarray:
    if T <= 0.0:
        raise ValueError("horizon must be positive")
    if grid is None:
        return np.linspace(0.0, T, cfg.grid_points)
    grid = np.asarray(grid, dtype=float)
    if np.any(np.diff(grid) <= 0.0) or grid[0] < 0.0 or grid[-1] > T * (1 + 1e-12):
        raise ValueError("grid must be increasing within [0, T]")
    return grid


def _integrate(rhs, y0, T: float, cfg: SolverConfig):
    sol = integrate.solve_ivp(
        rhs,
        (0.0, T),
        np.atleast_1d(np.asarray(y0, dtype=float)),
        method=cfg.method,
        rtol=cfg.rtol,
        atol=cfg.atol,
        dense_output=True,
    )
    if sol.status != 0:
        raise SolverError(f"integration failed: {sol.message}")
    return sol


def _meta(sol, cfg: SolverConfig) -> dict:
    return {"method": cfg.method, "rtol": cfg.rtol, "atol": cfg.atol, "nfev": int(sol.nfev), "steps": int(sol.t.size - 1)}


def solve_u(mech: BranchingMechanism, theta: float, T: float, cfg: SolverConfig | None = None, grid=None) -> EvolutionCurve:
    """Laplace exponent ``u_theta(t)`` of the unconditioned process."""
    cfg = cfg or SolverConfig()
    if theta < 0.0:
        raise ValueError("theta must be non-negative")
    times = _grid(T, grid, cfg)
    sol = _integrate(lambda t, y: -mech.psi(np.maximum(y, 0.0)), theta, T, cfg)
    dense = lambda t: sol.sol(t)[0]
    return EvolutionCurve(times, dense(times), "u", float(theta), None, _meta(sol, cfg), dense)


def solve_u_star(mech: BranchingMechanism, theta: float, T: float, cfg: SolverConfig | None = None, grid=None) -> EvolutionCurve:
    """Laplace exponent ``u*_theta(t)`` under the law conditioned on extinguishing."""
    cfg = cfg or SolverConfig()
    if theta < 0.0:
        raise ValueError("theta must be non-negative")
    times = _grid(T, grid, cfg)
    sol = _integrate(lambda t, y: -mech.psi_star(np.maximum(y, 0.0)), theta, T, cfg)
    dense = lambda t: sol.sol(t)[0]
    return EvolutionCurve(times, dense(times), "u_star", float(theta), None, _meta(sol, cfg), dense)


def survival_bar(mech: BranchingMechanism, T: float, cfg: SolverConfig | None = None, grid=None) -> EvolutionCurve:
    """``N*(X_t > 0)``: the limit of ``u*_theta(t)`` as ``theta -> inf``.

    The grid starts at ``cfg.time_floor`` by default since the curve blows up at 0.

    Raises:
        SolverError: if Grey's condition fails (the limit is infinite).
    """
    cfg = cfg or SolverConfig()
    if not classify(mech).grey_condition:
        raise SolverError(f"Grey's condition fails for {mech.describe()}: survival_bar is infinite")
    if grid is None:
        grid = np.linspace(cfg.time_floor, T, cfg.grid_points)
    times = _grid(T, grid, cfg)
    if times[0] < cfg.time_floor:
        raise ValueError(f"survival_bar grid must start at or after the floor {cfg.time_floor}")
    if mech.family == "quadratic":
        dense = lambda t: quadratic_survival_bar(mech, t)
        return EvolutionCurve(times, dense(times), "survival_bar", math.inf, None, {"closed_form": True}, dense)
    cap = cfg.theta_cap_factor * mech.lambda_star
    hi = solve_u_star(mech, cap, T, cfg, times)
    lo = solve_u_star(mech, cap / 10.0, T, cfg, times)
    meta = dict(hi.meta)
    exact = grey_integral_inverse(mech, times)
    meta.update(
        closed_form=False,
        theta_cap=cap,
        cap_sensitivity=float(np.max(np.abs(hi.values - lo.values))),
        grey_integral_gap=float(np.max(np.abs(exact - hi.values))),
    )
    return EvolutionCurve(times, hi.values, "survival_bar", cap, None, meta, hi._dense)


def grey_integral_inverse(mech: BranchingMechanism, times) -> np.ndarray:
    """``vbar(t)`` as the root ``v`` of ``int_v^inf dxi / psi*(xi) = t``.

    Independent of any cap on ``theta``; used to cross-check :func:`survival_bar`.
    """
    if not classify(mech).grey_condition:
        raise SolverError(f"Grey's condition fails for {mech.describe()}")

    def remaining(v: float) -> float:
        head, _ = integrate.quad(lambda x: 1.0 / mech.psi_star(x), v, 2.0 * v, epsabs=0.0, epsrel=1e-13)
        # xi = 2v / w**2 maps [2v, inf) to (0, 1] with an integrable w**(2*alpha - 3) integrand
        tail, _ = integrate.quad(lambda w: 4.0 * v / w**3 / mech.psi_star(2.0 * v / w**2), 0.0, 1.0, epsabs=0.0, epsrel=1e-13, limit=200)
        return head + tail

    out = []
    for t in np.atleast_1d(np.asarray(times, dtype=float)):
        if t <= 0.0:
            raise ValueError("times must be positive")
        lo, hi = 1.0, 1.0
        while remaining(lo) < t:
            lo /= 4.0
        while remaining(hi) > t:
            hi *= 4.0
        out.append(optimize.brentq(lambda v: remaining(v) - t, lo, hi, xtol=1e-300, rtol=1e-14))
    return np.asarray(out)


def solve_w(mech: BranchingMechanism, theta: float, h: float, T: float, cfg: SolverConfig | None = None, grid=None) -> EvolutionCurve:
    """``w(t) = exp(-v_{theta,h}(t))`` for a backbone started from one particle.

    ``E(exp(-theta*Lambda_t - h*N_t))`` with ``n`` initial backbone particles and
    conditioned mass ``x`` is ``exp(-x*u*_theta(t)) * w(t)**n``.
    """
    cfg = cfg or SolverConfig()
    if theta < 0.0 or h < 0.0:
        raise ValueError("theta and h must be non-negative")
    ls = mech.lambda_star
    times = _grid(T, grid, cfg)

    def rhs(t, y):
        us = max(y[0], 0.0)
        w = min(max(y[1], 0.0), 1.0)
        return [
            -mech.psi_star(us),
            (mech.psi_star(us - ls * w) - mech.psi_star(us)) / ls,
        ]

    sol = _integrate(rhs, [theta, math.exp(-h)], T, cfg)
    dense = lambda t: sol.sol(t)[1]
    values = dense(times)
    slack = 10 * cfg.atol
    if np.any(values < -slack) or np.any(values > 1.0 + slack):
        raise SolverError("w left [0, 1]")
    curve = EvolutionCurve(times, values, "w", float(theta), float(h), _meta(sol, cfg), dense)
    return curve


def laplace_exponent_total(mech: BranchingMechanism, theta: float, h: float, T: float, cfg: SolverConfig | None = None, grid=None):
    """Pair ``(u*_theta, w_{theta,h})`` on a shared grid."""
    return solve_u_star(mech, theta, T, cfg, grid), solve_w(mech, theta, h, T, cfg, grid)


def check_identity_conditioned(
    mech: BranchingMechanism,
    thetas: Sequence[float],
    T: float,
    cfg: SolverConfig | None = None,
    grid=None,
) -> float:
    """Max over ``thetas`` and grid of ``|u*_theta - (u_{theta+ls} - ls)|``."""
    ls = mech.lambda_star
    err = 0.0
    for theta in thetas:
        us = solve_u_star(mech, theta, T, cfg, grid)
        u = solve_u(mech, theta + ls, T, cfg, us.times)
        err = max(err, float(np.max(np.abs(us.values - (u.values - ls)))))
    return err


def check_identity_consistency(
    mech: BranchingMechanism,
    theta: float,
    h: float,
    T: float,
    cfg: SolverConfig | None = None,
    grid=None,
) -> float:
    """Max grid error in ``u*_theta + ls(1 - w_{theta,h}) = u*_{theta'} + ls(1 - w_{theta',0})``.

    Here ``theta' = theta + ls(1 - e^{-h})``; both sides are also compared with
    ``u_{theta'}``, which they must equal.
    """
    ls = mech.lambda_star
    shifted = theta + ls * (1.0 - math.exp(-h))
    us, w = laplace_exponent_total(mech, theta, h, T, cfg, grid)
    us2, w2 = laplace_exponent_total(mech, shifted, 0.0, T, cfg, us.times)
    u = solve_u(mech, shifted, T, cfg, us.times)
    left = us.values + ls * (1.0 - w.values)
    right = us2.values + ls * (1.0 - w2.values)
    return float(max(np.max(np.abs(left - right)), np.max(np.abs(left - u.values))))


def integral_residual(mech: BranchingMechanism, curve: EvolutionCurve, fine_points: int = 20001) -> float:
    """Max residual of ``y(t) - y(0) + int_0^t rate(y(s)) ds`` with Simpson quadrature on a fine grid."""
    T = float(curve.times[-1])
    t = np.linspace(0.0, T, fine_points)
    y = curve(t)
    if curve.kind == "u":
        rate = mech.psi(np.maximum(y, 0.0))
        y0 = curve.theta
    elif curve.kind == "u_star":
        rate = mech.psi_star(np.maximum(y, 0.0))
        y0 = curve.theta
    else:
        raise ValueError(f"no integral equation registered for kind {curve.kind!r}")
    cum = integrate.cumulative_simpson(rate, x=t, initial=0.0)
    return float(np.max(np.abs(y - y0 + cum)))


def quadratic_u(mech: BranchingMechanism, theta: float, t):
    """Logistic closed form of ``u_theta(t)`` for ``psi(l) = -a l + b l**2``."""
    a, b = mech.a, mech.b
    e = np.exp(a * np.asarray(t, dtype=float))
    return theta * e / (1.0 + (b / a) * theta * (e - 1.0))


def quadratic_u_star(mech: BranchingMechanism, theta: float, t):
    """Riccati closed form ``theta*A / (1 + B*theta)``, ``A = e^{-at}``, ``B = (b/a)(1 - e^{-at})``."""
    A, B = quadratic_AB(mech, t)
    return theta * A / (1.0 + B * theta)


def quadratic_survival_bar(mech: BranchingMechanism, t):
    A, B = quadratic_AB(mech, t)
    with np.errstate(divide="ignore"):
        return A / B


def quadratic_AB(mech: BranchingMechanism, t):
    a, b = mech.a, mech.b
    t = np.asarray(t, dtype=float)
    A = np.exp(-a * t)
    B = -(b / a) * np.expm1(-a * t)
    return A, B


CURVE_COLUMNS = ("t", "value", "kind", "theta", "h")


def write_curves_csv(curves: Iterable[EvolutionCurve], path: Path, header: dict | None = None) -> Path:
    """Write curves in long format (``t, value, kind, theta, h``)."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        for key, val in (header or {}).items():
            fh.write(f"# {key}={val}\n")
        writer = csv.writer(fh)
        writer.writerow(CURVE_COLUMNS)
        for curve in curves:
            writer.writerows(curve.rows())
    return path
