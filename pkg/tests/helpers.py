"""Shared fixtures for building small deterministic episode sets."""

import numpy as np

from hedgelab.marketdata import Episode


def replication_episodes(n, seed, ratio=0.5, daily_vol=0.01, start="2018-01-02"):
    """Episodes whose option moves exactly ``ratio`` times the underlying each day."""
    rng = np.random.default_rng(seed)
    base = np.datetime64(start)
    out = []
    for i in range(n):
        s0 = 100.0 * np.exp(rng.uniform(-0.1, 0.1))
        strike = 100.0 * rng.choice([0.9, 0.95, 1.0, 1.05, 1.1])
        steps = s0 * daily_vol * rng.standard_normal(21)
        spot = s0 + np.r_[0.0, np.cumsum(steps)]
        option = 10.0 + ratio * (spot - s0)
        dates = np.busday_offset(base, np.arange(i % 200, i % 200 + 22), roll="forward")
        expiry = dates[-1] + int(rng.choice([5, 30, 60]))
        iv = np.full(22, rng.uniform(0.12, 0.35))
        out.append(Episode(strike=strike, expiry=expiry, is_call=True, dates=dates, underlying=spot,
                           option_mid=option, iv=iv, rate=np.zeros(22), div_yield=np.zeros(22),
                           window_id=str(dates[0])))
    return out


def market_episodes(n_days=252, seed=0, overlapping=False, **kw):
    """Episodes from a small synthetic BS-consistent market starting 2015."""
    from hedgelab.marketdata import SyntheticMarketConfig, build_year_episodes, synthesize_market

    q = synthesize_market(SyntheticMarketConfig(n_days=n_days, seed=seed, **kw))
    years = sorted(set(q["date"].dt.year))
    eps, _ = build_year_episodes(q, years, overlapping=overlapping)
    return eps
