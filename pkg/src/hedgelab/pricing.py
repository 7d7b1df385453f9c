"""Black-Scholes call pricing, Greeks, forward moneyness and implied volatility.

All functions accept a :class:`MarketInputs` whose fields may be Python floats
or numpy arrays of a common shape; outputs follow numpy broadcasting.
Maturities are in calendar-day years (``days / 365``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

DAYS_PER_YEAR = 365.0

# below this total volatility the deterministic (zero-vol) limit is used
_DETERMINISTIC_TOTAL_VOL = 1e-8

IV_LOWER = 1e-6
IV_UPPER = 5.0
IV_MAX_ITER = 200


class PricingDomainError(ValueError):
    """Raised when market inputs violate the pricing preconditions."""


class PriceBoundError(PricingDomainError):
    """Raised when a price lies outside the no-arbitrage bounds."""


class NoConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class MarketInputs:
    spot: float | np.ndarray
    strike: float | np.ndarray
    tau: float | np.ndarray
    rate: float | np.ndarray = 0.0
    div_yield: float | np.ndarray = 0.0
    sigma: float | np.ndarray = 0.2

    def validate(self) -> "MarketInputs":
        for name in ("spot", "strike", "tau", "sigma"):
            v = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(v)) or np.any(v <= 0.0):
                raise PricingDomainError(f"{name} must be finite and > 0")
        for name in ("rate", "div_yield"):
            v = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(v)):
                raise PricingDomainError(f"{name} must be finite")
        fwd = self.forward
        if not np.all(np.isfinite(fwd)) or np.any(fwd <= 0.0):
            raise PricingDomainError("forward must be finite and positive")
        return self

    @property
    def forward(self):
        return np.asarray(self.spot, float) * np.exp(
            (np.asarray(self.rate, float) - np.asarray(self.div_yield, float)) * np.asarray(self.tau, float)
        )

    def with_sigma(self, sigma) -> "MarketInputs":
        return replace(self, sigma=sigma)

    def with_spot(self, spot) -> "MarketInputs":
        return replace(self, spot=spot)


def norm_cdf(x):
    """Standard normal CDF (Cephes ``ndtr``, erf/erfc based)."""
    return ndtr(x)


def norm_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def _arrays(m: MarketInputs):
    m.validate()
    s = np.asarray(m.spot, float)
    k = np.asarray(m.strike, float)
    t = np.asarray(m.tau, float)
    r = np.asarray(m.rate, float)
    q = np.asarray(m.div_yield, float)
    v = np.asarray(m.sigma, float)
    return np.broadcast_arrays(s, k, t, r, q, v)


def _d1(s, k, t, r, q, v):
    total = v * np.sqrt(t)
    degenerate = total < _DETERMINISTIC_TOTAL_VOL
    safe = np.where(degenerate, 1.0, total)
    d1 = (np.log(s / k) + (r - q) * t + 0.5 * total * total) / safe
    return d1, safe, degenerate


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def bs_call_price(m: MarketInputs):
    s, k, t, r, q, v = _arrays(m)
    d1, total, degenerate = _d1(s, k, t, r, q, v)
    d2 = d1 - total
    disc_s = np.exp(-q * t) * s
    disc_k = np.exp(-r * t) * k
    price = disc_s * norm_cdf(d1) - disc_k * norm_cdf(d2)
    intrinsic = np.maximum(disc_s - disc_k, 0.0)
    price = np.where(degenerate, intrinsic, price)
    # rounding can push a hair outside the arbitrage bounds
    price = np.clip(price, intrinsic, disc_s)
    return _out(price)


def bs_call_delta(m: MarketInputs):
    s, k, t, r, q, v = _arrays(m)
    d1, _, degenerate = _d1(s, k, t, r, q, v)
    fwd = s * np.exp((r - q) * t)
    step = np.where(fwd > k, 1.0, np.where(fwd < k, 0.0, 0.5))
    delta = np.exp(-q * t) * np.where(degenerate, step, norm_cdf(d1))
    return _out(delta)


def bs_call_vega(m: MarketInputs):
    """Price sensitivity per unit (not per percentage point) of volatility."""
    s, k, t, r, q, v = _arrays(m)
    d1, _, degenerate = _d1(s, k, t, r, q, v)
    vega = np.exp(-q * t) * s * np.sqrt(t) * norm_pdf(d1)
    return _out(np.where(degenerate, 0.0, vega))


def forward_moneyness(m: MarketInputs):
    s, k, t, r, q, _ = _arrays(m)
    return _out(s * np.exp((r - q) * t) / k)


def delta_from_moneyness(fwd_moneyness, tau, sigma, div_yield=0.0):
    """Black-Scholes call delta expressed through forward moneyness F/K.

    Equivalent to :func:`bs_call_delta`, since d1 only depends on F/K.
    """
    m = np.asarray(fwd_moneyness, float)
    t = np.asarray(tau, float)
    v = np.asarray(sigma, float)
    q = np.asarray(div_yield, float)
    total = v * np.sqrt(t)
    degenerate = total < _DETERMINISTIC_TOTAL_VOL
    safe = np.where(degenerate, 1.0, total)
    d1 = (np.log(m) + 0.5 * safe * safe) / safe
    step = np.where(m > 1.0, 1.0, np.where(m < 1.0, 0.0, 0.5))
    return _out(np.exp(-q * t) * np.where(degenerate, step, norm_cdf(d1)))


def no_arbitrage_bounds(m: MarketInputs) -> tuple[float, float]:
    s, k, t, r, q, _ = _arrays(m.with_sigma(1.0))
    disc_s = np.exp(-q * t) * s
    disc_k = np.exp(-r * t) * k
    return _out(np.maximum(disc_s - disc_k, 0.0)), _out(disc_s)


def implied_vol(price: float, m: MarketInputs, tol: float = 1e-10) -> float:
    """Invert :func:`bs_call_price` for volatility by bracketed root finding.

    ``m.sigma`` is ignored. The price must lie strictly inside the
    no-arbitrage bounds and map to a volatility inside ``[1e-6, 5]``.
    """
    if np.ndim(price) != 0:
        raise PricingDomainError("implied_vol is scalar; loop for arrays")
    base = m.with_sigma(1.0)
    lo, hi = no_arbitrage_bounds(base)
    price = float(price)
    if not np.isfinite(price) or price <= lo or price >= hi:
        raise PriceBoundError(f"price {price!r} outside no-arbitrage bounds ({lo!r}, {hi!r})")

    def gap(sig: float) -> float:
        return bs_call_price(base.with_sigma(sig)) - price

    f_lo, f_hi = gap(IV_LOWER), gap(IV_UPPER)
    if f_lo > 0.0 or f_hi < 0.0:
        raise PriceBoundError(f"price {price!r} not attainable for sigma in [{IV_LOWER}, {IV_UPPER}]")
    try:
        sigma, info = brentq(
            gap, IV_LOWER, IV_UPPER, xtol=1e-15, rtol=4 * np.finfo(float).eps,
            maxiter=IV_MAX_ITER, full_output=True, disp=False,
        )
    except RuntimeError as exc:  # pragma: no cover - brentq raises only when disp=True
        raise NoConvergenceError(str(exc)) from exc
    if not info.converged or abs(gap(sigma)) > tol:
        raise NoConvergenceError(
            f"implied vol did not converge after {info.iterations} iterations (residual {gap(sigma):.3e})"
        )
    return float(sigma)
