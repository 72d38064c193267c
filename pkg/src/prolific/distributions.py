"""Sampling and integral helpers for exponentially tempered power laws.

Every Lévy measure used in this package has a density of the form
``C * y**(-1 - index)`` on ``(0, inf)``. After tempering by ``exp(-rate * y)``
(conditioning on extinction multiplies the measure by ``exp(-lambda_star * y)``)
all the integrals we need reduce to upper incomplete gamma functions, possibly
with negative shape.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special


def upper_gamma(s: float, x: float) -> float:
    """Non-normalised upper incomplete gamma ``int_x^inf t**(s-1) e**-t dt``.

    Valid for ``x > 0`` and any real ``s`` (negative shapes are reached by the
    downward recurrence ``G(s, x) = (G(s+1, x) - x**s e**-x) / s``).
    """
    if x <= 0.0:
        if s > 0.0:
            return math.gamma(s)
        raise ValueError("upper_gamma diverges at x=0 for non-positive shape")
    if s > 0.0:
        return float(special.gammaincc(s, x) * special.gamma(s))
    if s == 0.0:
        return float(special.exp1(x))
    return (upper_gamma(s + 1.0, x) - x**s * math.exp(-x)) / s


def tempered_power_integral(k: float, rate: float, lo: float, hi: float = math.inf) -> float:
    """``int_lo^hi y**(-k) exp(-rate*y) dy`` for ``lo > 0`` (or ``k < 1``)."""
    if hi <= lo:
        return 0.0
    shape = 1.0 - k
    if lo == 0.0:
        if shape <= 0.0:
            return math.inf
        lower = rate ** (-shape) * math.gamma(shape)
    else:
        lower = rate ** (-shape) * upper_gamma(shape, rate * lo)
    if math.isinf(hi):
        return lower
    return lower - rate ** (-shape) * upper_gamma(shape, rate * hi)


def tempered_power_moment(k: float, rate: float, hi: float) -> float:
    """``int_0^hi y**(-k) exp(-rate*y) dy`` for ``k < 1``, via the regularised lower gamma."""
    shape = 1.0 - k
    if shape <= 0.0:
        raise ValueError("moment diverges at 0 for k >= 1")
    return rate ** (-shape) * math.gamma(shape) * float(special.gammainc(shape, rate * hi))


def sample_tempered_power(
    k: float,
    rate: float,
    lo: float,
    size: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Exact draws from the density proportional to ``y**(-k) exp(-rate*y)`` on ``[lo, inf)``.

    Two-piece rejection sampler. On ``[lo, c]`` with ``c = max(lo, 1/rate)`` the
    proposal is the truncated power law and the acceptance probability is
    ``exp(-rate*(y - lo)) >= exp(-1)``; on ``(c, inf)`` the proposal is a shifted
    exponential accepted with probability ``(c/y)**k``.
    """
    if size == 0:
        return np.empty(0)
    if lo <= 0.0:
        raise ValueError("lower cutoff must be positive")
    if k <= 0.0:
        raise ValueError("power index must be positive")
    c = max(lo, 1.0 / rate)
    mass_a = tempered_power_integral(k, rate, lo, c)
    mass_b = tempered_power_integral(k, rate, c)
    p_a = mass_a / (mass_a + mass_b)

    in_a = rng.random(size) < p_a
    out = np.empty(size)
    n_a = int(in_a.sum())
    out[in_a] = _rejection_fill(n_a, rng, lambda n: _power_law(k, lo, c, rng.random(n)), lambda y: np.exp(-rate * (y - lo)))
    out[~in_a] = _rejection_fill(size - n_a, rng, lambda n: c + rng.exponential(1.0 / rate, n), lambda y: (c / y) ** k)
    return out


def _power_law(k: float, lo: float, hi: float, u: np.ndarray) -> np.ndarray:
    """Inverse CDF of the density proportional to ``y**(-k)`` on ``[lo, hi]``."""
    if k == 1.0:
        return lo * (hi / lo) ** u
    e = 1.0 - k
    return (lo**e + u * (hi**e - lo**e)) ** (1.0 / e)


def _rejection_fill(size: int, rng: np.random.Generator, propose, accept) -> np.ndarray:
    out = np.empty(size)
    filled = 0
    while filled < size:
        need = size - filled
        y = propose(max(16, int(need * 1.6)))
        keep = y[rng.random(y.size) < accept(y)]
        take = min(need, keep.size)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out
