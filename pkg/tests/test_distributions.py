import math

import numpy as np
import pytest
from scipy import integrate

from prolific.distributions import sample_tempered_power, tempered_power_integral, tempered_power_moment, upper_gamma
from prolific.rng import Stream, block_rng, keyed_rng


@pytest.mark.parametrize("s,x", [(2.5, 0.3), (0.5, 1.0), (0.0, 0.2), (-0.5, 0.01), (-1.5, 0.7)])
def test_upper_gamma_by_quadrature(s, x):
    want, _ = integrate.quad(lambda t: t ** (s - 1) * math.exp(-t), x, np.inf)
    assert upper_gamma(s, x) == pytest.approx(want, rel=1e-10)


@pytest.mark.parametrize("k,rate,lo,hi", [(2.5, 1.0, 0.01, math.inf), (1.5, 2.0, 0.1, 3.0), (0.5, 1.0, 0.0, math.inf)])
def test_tempered_integral(k, rate, lo, hi):
    f = lambda y: y ** (-k) * math.exp(-rate * y)
    want = sum(integrate.quad(f, a, b, limit=200)[0] for a, b in ((lo, 1.0), (1.0, hi)) if b > a)
    assert tempered_power_integral(k, rate, lo, hi) == pytest.approx(want, rel=1e-8)


def test_tempered_moment():
    want, _ = integrate.quad(lambda y: y ** (-0.5) * math.exp(-y), 0, 0.3)
    assert tempered_power_moment(0.5, 1.0, 0.3) == pytest.approx(want, rel=1e-9)
    with pytest.raises(ValueError):
        tempered_power_moment(1.0, 1.0, 0.3)


@pytest.mark.parametrize("k,rate,lo", [(2.5, 1.0, 0.01), (1.5, 1.0, 1e-3), (2.0, 3.0, 0.5), (0.5, 1.0, 2.0)])
def test_sampler_mean_and_cdf(k, rate, lo):
    rng = np.random.default_rng(42)
    y = sample_tempered_power(k, rate, lo, 200_000, rng)
    assert y.min() >= lo
    norm = tempered_power_integral(k, rate, lo)
    mean = tempered_power_integral(k - 1.0, rate, lo) / norm
    assert abs(y.mean() - mean) <= 5 * y.std() / math.sqrt(y.size)
    mid = lo * 3
    p = tempered_power_integral(k, rate, lo, mid) / norm
    assert abs(np.mean(y <= mid) - p) <= 5 * math.sqrt(p * (1 - p) / y.size)


def test_sampler_argument_checks():
    rng = np.random.default_rng(0)
    assert sample_tempered_power(2.0, 1.0, 0.1, 0, rng).size == 0
    with pytest.raises(ValueError):
        sample_tempered_power(2.0, 1.0, 0.0, 5, rng)


def test_keyed_streams_are_reproducible_and_distinct():
    a = keyed_rng(5, 1, 2).random(4)
    np.testing.assert_array_equal(a, keyed_rng(5, 1, 2).random(4))
    assert not np.array_equal(a, keyed_rng(5, 1, 3).random(4))
    assert not np.array_equal(a, keyed_rng(6, 1, 2).random(4))
    np.testing.assert_array_equal(block_rng(5, 1, Stream.RAIN).random(3), keyed_rng(5, 1, int(Stream.RAIN)).random(3))
    with pytest.raises(ValueError):
        keyed_rng(-1)
