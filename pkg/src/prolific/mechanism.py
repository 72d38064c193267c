"""Branching mechanisms and the analytic objects derived from them.

A mechanism is the Laplace exponent

    psi(lam) = alpha*lam + beta*lam**2 + int (e^{-lam x} - 1 + lam x 1{x<1}) Pi(dx)

of a spectrally positive Lévy process. Four parametric families are supported:

* ``quadratic``: ``psi(lam) = -a lam + b lam**2`` (no jumps).
* ``stable``: ``psi(lam) = -a lam + c lam**alpha``, ``1 < alpha < 2``.
* ``neveu``: ``psi(lam) = lam log lam``.
* ``stable_subcrit_drift``: ``psi(lam) = lam - lam**alpha``, ``0 < alpha < 1``.

All three jump families have Lévy density ``C y**(-1-index)``, which is what
makes the offspring law, the branch-point masses and the immigration
intensities available in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import integrate, optimize, special

from . import distributions

FAMILIES = ("quadratic", "stable", "neveu", "stable_subcrit_drift")

# Survival-function table size used by the offspring sampler before it
# switches to a bisection on the closed-form tail.
_OFFSPRING_TABLE = 4096
_MAX_OFFSPRING = 2**62


class MechanismError(ValueError):
    """Raised for parameterisations outside the supercritical, non-degenerate regime."""


@dataclass(frozen=True)
class BranchingMechanism:
    """A branching mechanism from one of the supported families.

    Only the parameters relevant to ``family`` are used; use the classmethod
    constructors rather than instantiating directly.
    """

    family: str
    a: float = 0.0
    b: float = 0.0
    c: float = 0.0
    alpha: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise MechanismError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "stable" and not 1.0 < self.alpha < 2.0:
            raise MechanismError("stable family needs 1 < alpha < 2")
        if self.family == "stable_subcrit_drift" and not 0.0 < self.alpha < 1.0:
            raise MechanismError("stable_subcrit_drift family needs 0 < alpha < 1")

    @classmethod
    def quadratic(cls, a: float, b: float) -> "BranchingMechanism":
        return cls("quadratic", a=float(a), b=float(b))

    @classmethod
    def stable(cls, a: float, c: float, alpha: float) -> "BranchingMechanism":
        return cls("stable", a=float(a), c=float(c), alpha=float(alpha))

    @classmethod
    def neveu(cls) -> "BranchingMechanism":
        return cls("neveu")

    @classmethod
    def stable_subcrit_drift(cls, alpha: float) -> "BranchingMechanism":
        return cls("stable_subcrit_drift", alpha=float(alpha))

    def describe(self) -> str:
        if self.family == "quadratic":
            return f"quadratic(a={self.a:g}, b={self.b:g})"
        if self.family == "stable":
            return f"stable(a={self.a:g}, c={self.c:g}, alpha={self.alpha:g})"
        if self.family == "neveu":
            return "neveu"
        return f"stable_subcrit_drift(alpha={self.alpha:g})"

    # -- Lévy triplet -------------------------------------------------------

    @property
    def beta(self) -> float:
        """Gaussian (quadratic) coefficient."""
        return self.b if self.family == "quadratic" else 0.0

    @property
    def has_jumps(self) -> bool:
        return self.family != "quadratic"

    @property
    def levy_index(self) -> float:
        """Exponent ``index`` in the Lévy density ``C y**(-1-index)``."""
        if self.family in ("stable", "stable_subcrit_drift"):
            return self.alpha
        if self.family == "neveu":
            return 1.0
        raise MechanismError("quadratic mechanism has no Lévy measure")

    @property
    def levy_scale(self) -> float:
        """Constant ``C`` in the Lévy density ``C y**(-1-index)``."""
        if self.family == "stable":
            return self.c * self.alpha * (self.alpha - 1.0) / math.gamma(2.0 - self.alpha)
        if self.family == "neveu":
            return 1.0
        if self.family == "stable_subcrit_drift":
            return self.alpha / math.gamma(1.0 - self.alpha)
        return 0.0

    def levy_density(self, x):
        x = np.asarray(x, dtype=float)
        if not self.has_jumps:
            return np.zeros_like(x)
        return self.levy_scale * x ** (-1.0 - self.levy_index)

    @property
    def csbp_only(self) -> bool:
        """Infinite-mean families; only the non-spatial construction applies."""
        return self.family in ("neveu", "stable_subcrit_drift")

    # -- psi and friends ----------------------------------------------------

    def _psi_scalar(self, lam: float) -> float:
        f = self.family
        if f == "quadratic":
            return -self.a * lam + self.b * lam * lam
        if f == "stable":
            return -self.a * lam + self.c * abs(lam) ** self.alpha
        if f == "neveu":
            return lam * math.log(lam) if lam > 0.0 else 0.0
        return lam - abs(lam) ** self.alpha

    def psi(self, lam):
        if isinstance(lam, float):
            return self._psi_scalar(lam)
        lam = np.asarray(lam, dtype=float)
        f = self.family
        if f == "quadratic":
            out = -self.a * lam + self.b * lam**2
        elif f == "stable":
            out = -self.a * lam + self.c * np.abs(lam) ** self.alpha
        elif f == "neveu":
            safe = np.where(lam > 0.0, lam, 1.0)
            out = np.where(lam > 0.0, lam * np.log(safe), 0.0)
        else:
            out = lam - np.abs(lam) ** self.alpha
        return out[()] if out.ndim == 0 else out

    def dpsi(self, lam):
        """Derivative of ``psi``; ``-inf`` at ``0`` for the infinite-mean families."""
        lam = np.asarray(lam, dtype=float)
        f = self.family
        with np.errstate(divide="ignore"):
            if f == "quadratic":
                out = -self.a + 2.0 * self.b * lam
            elif f == "stable":
                out = -self.a + self.c * self.alpha * np.abs(lam) ** (self.alpha - 1.0)
            elif f == "neveu":
                out = np.log(lam) + 1.0
            else:
                out = 1.0 - self.alpha * np.abs(lam) ** (self.alpha - 1.0)
        return out[()] if out.ndim == 0 else out

    def psi_levy(self, lam: float) -> float:
        """``psi`` evaluated from the Lévy-Khintchine integral (quadrature).

        Uses the fully compensated form ``d*lam + beta*lam**2 + int (e^{-lam x}-1+lam x) Pi(dx)``
        for ``stable``; for the other families the integral is arranged so it converges.
        Intended as an independent cross-check of the closed forms.
        """
        if not self.has_jumps:
            return float(self.psi(lam))
        C, g = self.levy_scale, self.levy_index
        if self.family == "stable":
            body = _levy_integral(lambda x: _exp_remainder(lam * x), C, g)
            return -self.a * lam + body
        if self.family == "stable_subcrit_drift":
            body = _levy_integral(lambda x: -np.expm1(-lam * x), C, g)
            return lam - body
        # neveu: lam log lam = int (e^{-lam x} - 1 + lam x 1{x<1}) x^-2 dx + (1 - gamma_E) lam
        body = _levy_integral(lambda x: _exp_remainder(lam * x) - lam * x * (x >= 1.0), C, g)
        return body + (1.0 - np.euler_gamma) * lam

    # -- derived quantities -------------------------------------------------

    @cached_property
    def lambda_star(self) -> float:
        """Largest root of ``psi``, found by bracket doubling and Brent's method."""
        return find_lambda_star(self.psi)

    @cached_property
    def q(self) -> float:
        """Backbone branching rate ``psi'(lambda_star)``."""
        return float(self.dpsi(self.lambda_star))

    @cached_property
    def alpha_star(self) -> float:
        """Linear coefficient of ``psi_star`` in the ``1{x<1}``-compensated form."""
        if not self.has_jumps:
            return self.q
        C, g, ls = self.levy_scale, self.levy_index, self.lambda_star
        tail = C * distributions.tempered_power_integral(g, ls, 1.0)
        return self.q + tail

    def psi_star(self, lam):
        ls = self.lambda_star
        if isinstance(lam, float):
            # scalar path for ODE right-hand sides
            if lam < -ls * (1.0 + 1e-12):
                raise ValueError("psi_star is only defined for lam >= -lambda_star")
            return 0.0 if lam == 0.0 else self._psi_scalar(max(lam + ls, 0.0))
        lam = np.asarray(lam, dtype=float)
        if np.any(lam < -ls * (1.0 + 1e-12)):
            raise ValueError("psi_star is only defined for lam >= -lambda_star")
        # psi(ls) is zero only up to rounding; pin the fixed point exactly
        out = np.where(lam == 0.0, 0.0, self.psi(np.maximum(lam + ls, 0.0)))
        return out[()] if out.ndim == 0 else out

    def dpsi_star(self, lam):
        return self.dpsi(np.asarray(lam, dtype=float) + self.lambda_star)

    def phi(self, lam):
        """Laplace exponent of the immigration subordinator, ``psi'(lam+lambda_star) - q``."""
        lam = np.asarray(lam, dtype=float)
        if np.any(lam < 0.0):
            raise ValueError("phi is defined for lam >= 0")
        return self.dpsi(lam + self.lambda_star) - self.q

    def generator_F(self, s):
        """Generating-function form of the backbone generator, ``psi(ls*(1-s))/ls``."""
        s = np.asarray(s, dtype=float)
        if np.any((s < 0.0) | (s > 1.0)):
            raise ValueError("generator_F is defined on [0, 1]")
        ls = self.lambda_star
        return self.psi(ls * (1.0 - s)) / ls

    def chi(self, u, lam):
        """``psi*(lam+u) - psi*(u) - lam*(psi*'(u) - psi*'(0))``."""
        u = np.asarray(u, dtype=float)
        lam = np.asarray(lam, dtype=float)
        if np.any(u < 0.0):
            raise ValueError("chi needs u >= 0")
        if np.any(lam < -self.lambda_star * (1.0 + 1e-12)):
            raise ValueError("chi needs lam >= -lambda_star")
        return (
            self.psi_star(lam + u)
            - self.psi_star(u)
            - lam * (self.dpsi_star(u) - self.q)
        )

    def chi_levy(self, u: float, lam: float) -> float:
        """``chi`` from its Lévy-integral definition, by quadrature."""
        if u < 0.0 or lam < -self.lambda_star * (1.0 + 1e-12):
            raise ValueError("chi_levy needs u >= 0 and lam >= -lambda_star")
        base = lam * self.q + self.beta * lam**2
        if not self.has_jumps:
            return base
        temper = self.lambda_star + u
        body = _levy_integral(
            lambda x: _tempered_remainder(lam, temper, x),
            self.levy_scale,
            self.levy_index,
        )
        return base + body

    # -- offspring law of the backbone --------------------------------------

    @cached_property
    def _offspring_const(self) -> float:
        # p_n = K * Gamma(n - index) / n!  for the jump families
        g = self.levy_index
        return self.levy_scale * self.lambda_star ** (g - 1.0) / self.q

    def offspring_probability(self, n):
        """``p_n`` for integer ``n`` (zero for ``n < 2``)."""
        n = np.asarray(n, dtype=float)
        if not self.has_jumps:
            out = np.where(n == 2, 1.0, 0.0)
        else:
            g = self.levy_index
            K = self._offspring_const
            nn = np.maximum(n, 2.0)
            out = K * special.poch(nn + 1.0, -g) / (nn - g)
            out = np.where(n >= 2, out, 0.0)
        return out[()] if out.ndim == 0 else out

    def offspring_tail(self, n):
        """``P(offspring > n)`` in closed form (``n >= 1``)."""
        n = np.asarray(n, dtype=float)
        if not self.has_jumps:
            out = np.where(n < 2, 1.0, 0.0)
        elif self.family == "neveu":
            out = 1.0 / np.maximum(n, 1.0)
        else:
            g = self.levy_index
            out = self._offspring_const * special.poch(np.maximum(n, 1.0) + 1.0, -g) / g
        return out[()] if out.ndim == 0 else out

    def offspring_pmf(self, tail_tol: float = 1e-10, n_cap: int = 2**20) -> "OffspringLaw":
        """Tabulate ``p_n`` for ``n = 2..n_max``.

        ``n_max`` is the smallest ``n`` with tail mass below ``tail_tol``,
        or ``n_cap`` when that is unreachable (the heavy-tailed families decay
        only polynomially); the exact remaining tail mass is always reported.
        """
        n_max = offspring_cutoff(self, tail_tol, n_cap)
        ns = np.arange(2, n_max + 1)
        return OffspringLaw(ns, self.offspring_probability(ns), float(self.offspring_tail(n_max)))

    def sample_offspring(self, rng: np.random.Generator, size=None):
        """Offspring counts (``>= 2``) by exact inversion of the closed-form tail."""
        shape = () if size is None else size
        if not self.has_jumps:
            out = np.full(shape, 2, dtype=np.int64)
            return int(out) if size is None else out
        u = 1.0 - rng.random(shape)  # in (0, 1]
        if self.family == "neveu":
            # P(N > n) = 1/n
            n = np.ceil(np.minimum(1.0 / u, _MAX_OFFSPRING))
            out = np.maximum(n, 2).astype(np.int64)
        else:
            out = _invert_tail(self.offspring_tail, self._tail_table, np.atleast_1d(u))
            out = out.reshape(shape)
        return int(out) if size is None else out

    @cached_property
    def _tail_table(self) -> np.ndarray:
        return np.asarray(self.offspring_tail(np.arange(1, _OFFSPRING_TABLE + 1)), dtype=float)

    # -- branch-point masses -----------------------------------------------

    def eta_atom(self, n: int) -> float:
        """Weight of the atom at zero in the branch-point mass law for ``n`` offspring."""
        pn = float(self.offspring_probability(n))
        if pn <= 0.0:
            raise ValueError(f"offspring count {n} has zero probability")
        if n != 2 or self.beta == 0.0:
            return 0.0
        ls = self.lambda_star
        return self.beta * ls**2 / (pn * ls * self.q)

    def eta_density(self, n: int, y):
        """Density of the absolutely continuous part of the branch-point mass law."""
        y = np.asarray(y, dtype=float)
        pn = float(self.offspring_probability(n))
        if pn <= 0.0:
            raise ValueError(f"offspring count {n} has zero probability")
        if not self.has_jumps:
            return np.zeros_like(y)
        ls = self.lambda_star
        logf = n * np.log(ls * y) - ls * y - special.gammaln(n + 1)
        return np.exp(logf) * self.levy_density(y) / (pn * ls * self.q)

    def sample_eta(self, n, rng: np.random.Generator):
        """Branch-point immigrant mass(es) for offspring count(s) ``n``.

        Atom at zero first, then a Gamma(``n - index``, rate ``lambda_star``)
        draw for the continuous part.
        """
        scalar = np.ndim(n) == 0
        n = np.atleast_1d(np.asarray(n, dtype=np.int64))
        if np.any(n < 2) or (not self.has_jumps and np.any(n != 2)):
            raise ValueError("offspring count has zero probability")
        out = np.zeros(n.shape)
        if self.has_jumps:
            ls = self.lambda_star
            out = rng.gamma(n - self.levy_index, 1.0 / ls)
            if self.beta > 0.0:
                atom = self.eta_atom(2)
                is_atom = (n == 2) & (rng.random(n.shape) < atom)
                out[is_atom] = 0.0
        return float(out[0]) if scalar else out

    # -- immigration and jump intensities (tempered by lambda_star) ---------

    def immigration_rate(self, eps: float) -> float:
        """Discontinuous-immigration rate ``int_eps^inf y e^{-ls y} Pi(dy)``."""
        if not self.has_jumps:
            return 0.0
        return self.levy_scale * distributions.tempered_power_integral(
            self.levy_index, self.lambda_star, eps
        )

    def immigration_neglected_mass(self, eps: float) -> float:
        """Expected immigrant mass per unit backbone time from sizes below ``eps``."""
        if not self.has_jumps:
            return 0.0
        return self.levy_scale * distributions.tempered_power_moment(
            self.levy_index - 1.0, self.lambda_star, eps
        )

    def sample_immigrant_sizes(self, eps: float, size: int, rng: np.random.Generator):
        """Draws from ``y e^{-ls y} Pi(dy)`` restricted to ``y >= eps``."""
        return distributions.sample_tempered_power(
            self.levy_index, self.lambda_star, eps, size, rng
        )

    def jump_rate(self, delta: float) -> float:
        """Mass of the conditioned Lévy measure ``e^{-ls y} Pi(dy)`` on ``[delta, inf)``."""
        if not self.has_jumps:
            return 0.0
        return self.levy_scale * distributions.tempered_power_integral(
            1.0 + self.levy_index, self.lambda_star, delta
        )

    def jump_compensator(self, delta: float) -> float:
        """``int_delta^inf y e^{-ls y} Pi(dy)``; equals ``immigration_rate(delta)``."""
        return self.immigration_rate(delta)

    def small_jump_variance(self, delta: float) -> float:
        """``int_0^delta y**2 e^{-ls y} Pi(dy)``."""
        return self.immigration_neglected_mass(delta)

    def sample_jumps(self, delta: float, size: int, rng: np.random.Generator):
        """Draws from ``e^{-ls y} Pi(dy)`` restricted to ``y >= delta``."""
        return distributions.sample_tempered_power(
            1.0 + self.levy_index, self.lambda_star, delta, size, rng
        )


@dataclass(frozen=True)
class OffspringLaw:
    ns: np.ndarray
    pmf: np.ndarray
    tail: float

    @property
    def n_max(self) -> int:
        return int(self.ns[-1])

    def mean(self) -> float:
        return float(np.sum(self.ns * self.pmf))


@dataclass(frozen=True)
class MechanismProfile:
    family: str
    lambda_star: float
    q: float
    alpha_star: float
    grey_condition: bool
    finite_mean: bool
    non_explosive: bool
    csbp_only: bool
    offspring_n_max: int
    offspring_tail: float

    def as_dict(self) -> dict:
        return {
            "family": self.family,
            "lambda_star": self.lambda_star,
            "q": self.q,
            "alpha_star": self.alpha_star,
            "grey_condition": self.grey_condition,
            "finite_mean": self.finite_mean,
            "non_explosive": self.non_explosive,
            "csbp_only": self.csbp_only,
            "offspring_n_max": self.offspring_n_max,
            "offspring_tail": self.offspring_tail,
        }


def find_lambda_star(psi, start: float = 1e-8, max_doublings: int = 2000) -> float:
    """Positive root of a convex ``psi`` with ``psi(0) = 0`` and ``psi'(0+) < 0``."""
    lo = start
    if not psi(lo) < 0.0:
        raise MechanismError("psi is not negative near 0: mechanism is not supercritical")
    hi = 2.0 * lo
    for _ in range(max_doublings):
        val = psi(hi)
        if val > 0.0:
            break
        if val == 0.0:
            return float(hi)
        lo, hi = hi, 2.0 * hi
    else:
        raise MechanismError("no sign change of psi found: psi(inf) is not +inf")
    return float(optimize.brentq(psi, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))


def offspring_cutoff(mech: BranchingMechanism, tail_tol: float = 1e-10, n_cap: int = 2**20) -> int:
    if not mech.has_jumps:
        return 2
    if mech.offspring_tail(n_cap) >= tail_tol:
        return n_cap
    lo, hi = 2, n_cap
    while lo < hi:
        mid = (lo + hi) // 2
        if mech.offspring_tail(mid) < tail_tol:
            hi = mid
        else:
            lo = mid + 1
    return lo


def classify(mech: BranchingMechanism, tail_tol: float = 1e-10, n_cap: int = 2**20) -> MechanismProfile:
    """Check the standing assumptions and collect the derived constants.

    Raises:
        MechanismError: if the parameters do not give a supercritical mechanism
            with ``psi(inf) = inf``.
    """
    f = mech.family
    if f == "quadratic" and not (mech.a > 0.0 and mech.b > 0.0):
        raise MechanismError(
            "quadratic mechanism needs a > 0 (supercritical) and b > 0 (psi(inf) = inf); "
            f"got a={mech.a}, b={mech.b}"
        )
    if f == "stable" and not (mech.a > 0.0 and mech.c > 0.0):
        raise MechanismError(f"stable mechanism needs a > 0 and c > 0; got a={mech.a}, c={mech.c}")
    ls = mech.lambda_star
    q = mech.q
    if not q > 0.0:
        raise MechanismError("psi'(lambda_star) must be positive")
    n_max = offspring_cutoff(mech, tail_tol, n_cap)
    return MechanismProfile(
        family=f,
        lambda_star=ls,
        q=q,
        alpha_star=mech.alpha_star,
        # int^inf 1/psi < inf: needs psi growing faster than linearly
        grey_condition=f in ("quadratic", "stable"),
        finite_mean=f in ("quadratic", "stable"),
        # int_0+ 1/|psi| = inf fails only when |psi| ~ lam**alpha, alpha < 1, near 0
        non_explosive=f != "stable_subcrit_drift",
        csbp_only=mech.csbp_only,
        offspring_n_max=n_max,
        offspring_tail=float(mech.offspring_tail(n_max)),
    )


def _exp_remainder(z):
    """``e^{-z} - 1 + z`` without cancellation for small ``|z|``."""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1e-3
    series = z**2 / 2.0 - z**3 / 6.0 + z**4 / 24.0 - z**5 / 120.0
    return np.where(small, series, np.expm1(-z) + z)


def _tempered_remainder(lam: float, temper: float, x: float) -> float:
    """``(e^{-lam x} - 1 + lam x) e^{-temper x}`` for ``lam + temper >= 0``."""
    z = lam * x
    if abs(z) < 1e-3:
        return float(_exp_remainder(z)) * math.exp(-temper * x)
    return math.exp(-(lam + temper) * x) - (1.0 - z) * math.exp(-temper * x)


def _levy_integral(g, C: float, index: float) -> float:
    """``int_0^inf g(x) C x^{-1-index} dx`` with the substitution ``x = s**2`` on ``(0, 1]``."""

    def near(s):
        x = s * s
        return float(g(x)) * C * x ** (-1.0 - index) * 2.0 * s

    def far(x):
        return float(g(x)) * C * x ** (-1.0 - index)

    kw = dict(epsabs=1e-14, epsrel=1e-13, limit=400)
    left = integrate.quad(near, 0.0, 1.0, **kw)[0]
    right = integrate.quad(far, 1.0, np.inf, **kw)[0]
    return left + right


def _invert_tail(tail, table: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Smallest ``n >= 2`` with ``tail(n) <= u`` (``table[i] = tail(i + 1)``)."""
    # table is decreasing; count entries strictly above u
    idx = np.searchsorted(-table, -u, side="left")
    n = np.maximum(idx + 1, 2).astype(np.int64)
    beyond = idx >= table.size
    if np.any(beyond):
        ub = u[beyond]
        lo = np.full(ub.shape, table.size, dtype=np.int64)  # tail(lo) > u
        hi = lo * 2
        for _ in range(64):
            grow = (tail(hi) > ub) & (hi < _MAX_OFFSPRING)
            if not grow.any():
                break
            lo = np.where(grow, hi, lo)
            hi = np.where(grow, np.minimum(hi * 2, _MAX_OFFSPRING), hi)
        while np.any(hi - lo > 1):
            mid = (lo + hi) // 2
            above = tail(mid) > ub
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        n[beyond] = hi
    return n
