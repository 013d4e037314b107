"""Market/mortality parameters and closed-form quantities.

Everything in this module is an explicit formula: the no-annuity ruin
probability and its feedback investment rule, deferred/immediate annuity
prices, safe wealth levels, and the terminal/running penalty functions of
the dual optimal stopping problem.  The numerical modules are tested
against these expressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class ParameterError(ValueError):
    """Raised when model parameters violate their invariants."""


def _pow_clamped(base: float, exponent: float) -> float:
    # negative bases only arise from rounding; clamp to 0 before the
    # fractional power
    if base <= 0.0:
        return 0.0
    z = exponent * math.log(base)
    if z > 709.0:      # exp overflow; the callers subtract this term
        return math.inf
    return math.exp(z)


@dataclass(frozen=True)
class ModelParams:
    """Market and mortality constants.

    r        riskless rate (1/year), must be > 0
    mu       risky-asset drift (1/year), mu > r
    sigma    risky-asset volatility (1/sqrt(year))
    lambda_s subjective hazard rate (1/year)
    lambda_o objective hazard rate used to price annuities (1/year)
    c        net consumption rate (wealth/year)
    big_t    deferral horizon T (years)
    """

    r: float
    mu: float
    sigma: float
    lambda_s: float
    lambda_o: float
    c: float
    big_t: float

    def __post_init__(self):
        errors = self.validation_errors()
        if errors:
            raise ParameterError("; ".join(errors))

    def validation_errors(self) -> list[str]:
        errs = []
        if not self.r > 0.0:
            # the closed forms divide by r; the r = 0 limit is rejected
            # rather than guessed
            errs.append(f"r must be > 0 (got {self.r!r})")
        if not self.mu > self.r:
            errs.append(f"mu must exceed r (got mu={self.mu!r}, r={self.r!r})")
        if not self.sigma > 0.0:
            errs.append(f"sigma must be > 0 (got {self.sigma!r})")
        if not self.lambda_s > 0.0:
            errs.append(f"lambda_s must be > 0 (got {self.lambda_s!r})")
        if not self.lambda_o > 0.0:
            errs.append(f"lambda_o must be > 0 (got {self.lambda_o!r})")
        if not self.c > 0.0:
            errs.append(f"c must be > 0 (got {self.c!r})")
        if not self.big_t > 0.0:
            errs.append(f"big_t must be > 0 (got {self.big_t!r})")
        return errs

    @property
    def rho(self) -> float:
        """Annuity pricing rate r + lambda_o."""
        return self.r + self.lambda_o

    @property
    def m(self) -> float:
        """Squared Sharpe ratio over two: ((mu - r)/sigma)^2 / 2."""
        return 0.5 * ((self.mu - self.r) / self.sigma) ** 2

    @property
    def d(self) -> float:
        return exponent_d(self)


@dataclass(frozen=True)
class AnnuityState:
    """Cumulative deferred annuity income rate already secured."""

    a: float

    def validate(self, p: ModelParams) -> "AnnuityState":
        check_annuity_rate(self.a, p)
        return self


def check_annuity_rate(a: float, p: ModelParams):
    if not 0.0 <= a <= p.c:
        raise ParameterError(f"annuity income rate must lie in [0, c]=[0, {p.c}] (got {a!r})")


def paper_example_params() -> ModelParams:
    """The baseline numerical example: r=2%, mu=6%, sigma=20%,
    lambda_s=lambda_o=2%, c=1.5, T=5."""
    return ModelParams(r=0.02, mu=0.06, sigma=0.20, lambda_s=0.02,
                       lambda_o=0.02, c=1.5, big_t=5.0)


def exponent_d(p: ModelParams) -> float:
    """Decay exponent of the no-annuity ruin probability; always > 1."""
    s = p.r + p.lambda_s + p.m
    disc = s * s - 4.0 * p.r * p.lambda_s
    assert disc >= 0.0, "discriminant cannot be negative under the parameter invariants"
    return (s + math.sqrt(disc)) / (2.0 * p.r)


def phi(w: float, c_net: float, p: ModelParams) -> float:
    """Minimum ruin probability with no annuities: (1 - r w / c_net)^d.

    Clamps to 0 at and above the safe level c_net/r.  Zero net consumption
    means ruin is impossible by convention, so c_net = 0 returns 0.
    """
    if w < 0.0:
        raise ValueError(f"wealth must be nonnegative (got {w!r})")
    if c_net == 0.0:
        return 0.0
    if c_net < 0.0:
        raise ValueError(f"net consumption must be nonnegative (got {c_net!r})")
    base = 1.0 - p.r * w / c_net
    return _pow_clamped(base, p.d)


def pi_star_no_annuity(w: float, c_net: float, p: ModelParams) -> float:
    """Feedback amount in the risky asset for the no-annuity problem."""
    safe = c_net / p.r
    if not 0.0 <= w <= safe * (1.0 + 1e-12):
        raise ValueError(f"wealth {w!r} outside [0, c_net/r]=[0, {safe}]")
    return (p.mu - p.r) / p.sigma**2 * max(c_net - p.r * w, 0.0) / ((p.d - 1.0) * p.r)


def deferred_price(t: float, p: ModelParams) -> float:
    """Price of one unit of deferred annuity income bought at time t:
    exp(-rho (T - t)) / rho."""
    if not 0.0 <= t <= p.big_t:
        raise ValueError(f"t must lie in [0, T]=[0, {p.big_t}] (got {t!r})")
    return math.exp(-p.rho * (p.big_t - t)) / p.rho


def safe_level(a: float, t: float, p: ModelParams) -> float:
    """Wealth above which ruin is avoidable for sure: annuitize the
    shortfall c - a now and ride the riskless asset to T."""
    if not 0.0 <= t <= p.big_t:
        raise ValueError(f"t must lie in [0, T]=[0, {p.big_t}] (got {t!r})")
    check_annuity_rate(a, p)
    tau = p.big_t - t
    return p.c * (1.0 - math.exp(-p.r * tau)) / p.r + (p.c - a) * math.exp(-p.rho * tau) / p.rho


def safe_level_immediate(a: float, t: float, p: ModelParams) -> float:
    """Safe level when immediate annuities are also for sale; below
    safe_level whenever a < c and t < T because rho > r."""
    if not 0.0 <= t <= p.big_t:
        raise ValueError(f"t must lie in [0, T]=[0, {p.big_t}] (got {t!r})")
    check_annuity_rate(a, p)
    tau = p.big_t - t
    lvl = a * (1.0 - math.exp(-p.r * tau)) / p.r + (p.c - a) / p.rho
    return min(lvl, p.c / p.rho)


def one_shot_annuity_ruin(w: float, delta_c: float, p: ModelParams) -> float:
    """Ruin probability after a single immediate-annuity purchase of
    income delta_c at price delta_c/rho; strictly increasing in delta_c."""
    if w >= p.c / p.rho:
        raise ValueError(
            f"w={w!r} is at or above c/rho={p.c / p.rho}; ruin is avoidable outright")
    if not 0.0 <= delta_c < min(p.c, w * p.rho) or delta_c / p.rho > w:
        raise ValueError(
            f"delta_c={delta_c!r} outside [0, min(c, w rho))=[0, {min(p.c, w * p.rho)})")
    return phi(w - delta_c / p.rho, p.c - delta_c, p)


def terminal_dual_g(y: float, a: float, p: ModelParams) -> float:
    """Terminal penalty of the dual stopping problem,
    g(y) = ((c-a)/r) y - (d-1) ((c-a) y / (r d))^(d/(d-1)); concave, g(0)=0."""
    if y < 0.0:
        raise ValueError(f"dual variable must be nonnegative (got {y!r})")
    check_annuity_rate(a, p)
    gap = p.c - a
    if gap == 0.0:
        return 0.0
    d = p.d
    return gap / p.r * y - (d - 1.0) * _pow_clamped(gap * y / (p.r * d), d / (d - 1.0))


def terminal_dual_g_y(y: float, a: float, p: ModelParams) -> float:
    """First derivative of terminal_dual_g in y."""
    check_annuity_rate(a, p)
    gap = p.c - a
    if gap == 0.0:
        return 0.0
    d = p.d
    return gap / p.r - d * _pow_clamped(gap / (p.r * d), d / (d - 1.0)) * _pow_clamped(y, 1.0 / (d - 1.0))


def terminal_dual_g_yy(y: float, a: float, p: ModelParams) -> float:
    """Second derivative of terminal_dual_g in y (nonpositive)."""
    check_annuity_rate(a, p)
    gap = p.c - a
    if gap == 0.0:
        return 0.0
    d = p.d
    return (-d / (d - 1.0) * _pow_clamped(gap / (p.r * d), d / (d - 1.0))
            * _pow_clamped(y, (2.0 - d) / (d - 1.0)))


def terminal_dual_g_argmax(a: float, p: ModelParams) -> float:
    """Maximizer of g: y* = r d / (c - a), where g attains the value 1."""
    check_annuity_rate(a, p)
    gap = p.c - a
    if gap == 0.0:
        raise ValueError("g is identically zero at a = c; no unique maximizer")
    return p.r * p.d / gap


def obstacle_u(y: float, a: float, t: float, p: ModelParams) -> float:
    """Stopping penalty u(y, t) = min(1, wbar(a, t) y): piecewise linear,
    concave, kink at y = 1/wbar(a, t)."""
    if y < 0.0:
        raise ValueError(f"dual variable must be nonnegative (got {y!r})")
    return min(1.0, safe_level(a, t, p) * y)
