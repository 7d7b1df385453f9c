import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hedgelab.marketdata import (
    EPISODE_DAYS,
    Episode,
    HeaderMismatchError,
    OptionQuote,
    SyntheticMarketConfig,
    build_episodes,
    build_year_episodes,
    clean,
    filter_nonoverlapping_windows,
    load_chain,
    quotes_to_frame,
    read_episodes,
    select_start_options,
    simulate_spot_iv,
    synthesize_market,
    trading_calendar,
    write_chain,
    write_episodes,
)
from hedgelab.pricing import MarketInputs, no_arbitrage_bounds

HEADER = "date,underlying,strike,expiry,is_call,bid,ask,mid,iv,rate,div_yield\n"


def csv(*rows):
    return io.StringIO(HEADER + "".join(r + "\n" for r in rows))


GOOD = "2020-01-02,100,100,2020-02-01,1,4.9,5.1,5.0,0.2,0.01,0.01"


def quote(**kw):
    base = dict(
        date=pd.Timestamp("2020-01-02").date(), underlying=100.0, strike=100.0,
        expiry=pd.Timestamp("2020-02-01").date(), is_call=True, bid=4.9, ask=5.1, mid=5.0, iv=0.2,
        rate=0.01, div_yield=0.01,
    )
    base.update(kw)
    return OptionQuote(**base)


class TestLoadChain:
    def test_three_rows(self):
        df, rep = load_chain(csv(GOOD, GOOD.replace(",100,2020", ",105,2020"), GOOD.replace(",100,2020", ",95,2020")))
        assert len(df) == 3 and rep.n_rejected == 0

    def test_crossed_quote_rejected(self):
        df, rep = load_chain(csv(GOOD, "2020-01-02,100,100,2020-02-01,1,5.2,5.1,5.15,0.2,0.01,0.01"))
        assert len(df) == 1
        assert rep.counts["crossed quote"] == 1 and rep.rows == [(3, "crossed quote")]

    def test_empty_file(self):
        df, rep = load_chain(csv())
        assert len(df) == 0 and rep.total_rows == 0

    def test_header_mismatch(self):
        with pytest.raises(HeaderMismatchError):
            load_chain(io.StringIO("date,spot,strike\n2020-01-02,100,100\n"))

    def test_column_map_and_defaults(self):
        src = io.StringIO("QUOTE_DATE,UNDERLYING_LAST,STRIKE,EXPIRE_DATE,C_BID,C_ASK,C_IV\n"
                          "2020-01-02,100,100,2020-02-01,4.9,5.1,0.2\n")
        cmap = {"date": "QUOTE_DATE", "underlying": "UNDERLYING_LAST", "strike": "STRIKE", "expiry": "EXPIRE_DATE",
                "bid": "C_BID", "ask": "C_ASK", "iv": "C_IV"}
        df, rep = load_chain(src, cmap, defaults={"rate": 0.01, "div_yield": 0.015})
        assert rep.n_rejected == 0
        row = df.iloc[0]
        assert row["mid"] == pytest.approx(5.0) and row["rate"] == 0.01 and bool(row["is_call"])

    def test_malformed_field_rejected_missing_kept(self):
        df, rep = load_chain(csv(GOOD.replace("0.2,", "abc,"), GOOD.replace("0.2,", ",")))
        assert rep.counts["malformed field"] == 1
        assert len(df) == 1 and np.isnan(df.iloc[0]["iv"])

    def test_round_trip_through_writer(self, tmp_path):
        df, _ = load_chain(csv(GOOD))
        write_chain(df, tmp_path / "c.csv")
        again, rep = load_chain(tmp_path / "c.csv")
        assert rep.n_rejected == 0
        pd.testing.assert_frame_equal(df, again)

    def test_counts_partition_input(self):
        rows = [GOOD, "bad,100,100,2020-02-01,1,4.9,5.1,5,0.2,0,0", "2020-01-02,100,100,2020-01-01,1,1,2,1.5,.2,0,0"]
        df, rep = load_chain(csv(*rows))
        assert len(df) + rep.n_rejected == len(rows)
        assert rep.counts["expiry not after date"] == 1


class TestOptionQuote:
    def test_invariants(self):
        assert quote().violation() is None
        assert quote(bid=5.2).violation() == "crossed quote"
        assert quote(strike=0.0).violation() == "invalid strike"

    def test_frame_round_trip(self):
        from hedgelab.marketdata import frame_to_quotes

        q = quote()
        assert frame_to_quotes(quotes_to_frame([q])) == [q]


class TestClean:
    def test_invalid_price(self):
        kept, rep = clean(quotes_to_frame([quote(mid=0.0, bid=0.0, ask=0.0)]))
        assert len(kept) == 0 and rep.removed["invalid price"] == 1

    def test_negative_spread(self):
        kept, rep = clean(quotes_to_frame([quote(bid=5.1, ask=4.9)]))
        assert len(kept) == 0 and rep.removed["negative spread"] == 1

    def test_valid_kept(self):
        kept, rep = clean(quotes_to_frame([quote()]))
        assert len(kept) == 1 and sum(rep.removed.values()) == 0

    def test_missing_field(self):
        kept, rep = clean(quotes_to_frame([quote(iv=float("nan"))]))
        assert rep.removed["missing field"] == 1

    @pytest.mark.parametrize("kw", [dict(strike=150.0), dict(strike=65.0), dict(expiry=pd.Timestamp("2020-01-05").date()),
                                    dict(expiry=pd.Timestamp("2020-06-01").date())])
    def test_outside_region(self, kw):
        kept, rep = clean(quotes_to_frame([quote(**kw)]))
        assert rep.removed["outside region"] == 1

    def test_region_boundaries_inclusive(self):
        qs = [quote(strike=70.0), quote(strike=140.0), quote(expiry=pd.Timestamp("2020-01-09").date()),
              quote(expiry=pd.Timestamp("2020-05-21").date())]  # 7 and 140 days
        kept, _ = clean(quotes_to_frame(qs))
        assert len(kept) == 4

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(-1, 10), st.floats(-1, 10), st.floats(-5, 200), st.integers(-5, 200),
                              st.sampled_from([0.2, float("nan"), -0.1]), st.booleans()), max_size=30))
    def test_idempotent_and_total(self, rows):
        qs = [quote(bid=b, ask=a, mid=(a + b) / 2, strike=k, iv=v, is_call=c,
                    expiry=(pd.Timestamp("2020-01-02") + pd.Timedelta(days=d)).date()) for b, a, k, d, v, c in rows]
        df = quotes_to_frame(qs)
        once, rep = clean(df)
        twice, rep2 = clean(once)
        pd.testing.assert_frame_equal(once, twice)
        assert rep.n_kept + sum(rep.removed.values()) == len(qs)
        assert sum(rep2.removed.values()) == 0


def chain_for_date(strikes, days, spot=100.0, d="2020-01-02"):
    qs = []
    for k in strikes:
        for n in days:
            qs.append(quote(strike=float(k), underlying=spot,
                            expiry=(pd.Timestamp(d) + pd.Timedelta(days=n)).date()))
    return quotes_to_frame(qs)


class TestSelectStartOptions:
    def test_single_atm(self):
        sel = select_start_options(chain_for_date([100], [30]), moneyness_targets=[1.0], maturity_targets=[30])
        assert len(sel) == 1 and sel.iloc[0]["strike"] == 100.0

    def test_tie_lower_strike(self):
        sel = select_start_options(chain_for_date([99, 101], [30]), moneyness_targets=[1.0], maturity_targets=[30])
        assert list(sel["strike"]) == [99.0]

    def test_tie_earlier_expiry(self):
        sel = select_start_options(chain_for_date([100], [25, 35]), moneyness_targets=[1.0], maturity_targets=[30])
        assert (sel.iloc[0]["expiry"] - sel.iloc[0]["date"]).days == 25

    def test_only_wings(self):
        # oracle: enumerate the 7x3 targets against the +-0.02 / +-10 day box by hand
        chain = chain_for_date([85, 115], [30, 60, 90])
        sel = select_start_options(chain)
        expected = {(85.0, 30), (85.0, 60), (85.0, 90), (115.0, 30), (115.0, 60), (115.0, 90)}
        got = {(r.strike, (r.expiry - r.date).days) for r in sel.itertuples()}
        assert got == expected and len(sel) == 6

    def test_outside_box_empty(self):
        assert len(select_start_options(chain_for_date([100], [45]))) == 0

    def test_dedup(self):
        # one quote serves several targets only once
        sel = select_start_options(chain_for_date([100], [30]), moneyness_targets=[0.99, 1.0, 1.01],
                                   maturity_targets=[25, 30])
        assert len(sel) == 1


def full_cover_chain(n_days=30, strikes=(95.0, 100.0, 105.0), expiry_days=120, drop=None):
    days = pd.bdate_range("2020-01-02", periods=n_days)
    expiry = (pd.Timestamp("2020-01-02") + pd.Timedelta(days=expiry_days)).date()
    qs = []
    for i, d in enumerate(days):
        for k in strikes:
            if drop is not None and (i, k) == drop:
                continue
            qs.append(quote(date=d.date(), strike=k, expiry=expiry, underlying=100.0 + i * 0.1))
    return quotes_to_frame(qs)


def pick_all(day_quotes):
    return day_quotes


class TestBuildEpisodes:
    def test_full_coverage(self):
        df = full_cover_chain()
        eps, rep = build_episodes(df, [0], selector=pick_all)
        assert len(eps) == 3 and rep.discarded == 0
        assert len({e.window_id for e in eps}) == 1
        for e in eps:
            e.check()
            assert len(e.dates) == EPISODE_DAYS
            assert np.all(np.diff(e.tau) < 0)
            np.testing.assert_allclose(e.underlying, 100.0 + 0.1 * np.arange(22))

    def test_missing_day_discarded(self):
        df = full_cover_chain(drop=(10, 100.0))
        eps, rep = build_episodes(df, [0], selector=pick_all)
        assert len(eps) == 2 and rep.discarded == 1

    def test_short_tail_discarded(self):
        df = full_cover_chain(n_days=25)
        eps, rep = build_episodes(df, [5], selector=pick_all)
        assert len(eps) == 0 and rep.discarded == 3

    def test_jsonl_round_trip(self, tmp_path):
        eps, _ = build_episodes(full_cover_chain(), [0, 3], selector=pick_all)
        write_episodes(eps, tmp_path / "e.jsonl")
        back = read_episodes(tmp_path / "e.jsonl")
        assert len(back) == len(eps)
        for a, b in zip(eps, back):
            assert a.key == b.key
            np.testing.assert_array_equal(a.dates, b.dates)
            np.testing.assert_array_equal(a.option_mid, b.option_mid)


class TestWindows:
    def test_greedy(self):
        assert filter_nonoverlapping_windows([0, 10, 21, 30, 42]) == [0, 21, 42]

    def test_single(self):
        assert filter_nonoverlapping_windows([7]) == [7]

    def test_one_window(self):
        assert filter_nonoverlapping_windows([3, 5, 9, 20]) == [3]

    @given(st.lists(st.integers(0, 500), unique=True))
    def test_separation(self, starts):
        kept = filter_nonoverlapping_windows(sorted(starts))
        assert all(b - a >= 21 for a, b in zip(kept, kept[1:]))
        # maximality: each dropped start sits within 21 days after some kept start
        for s in starts:
            assert any(0 <= s - k < 21 for k in kept)


class TestSynthetic:
    @pytest.mark.parametrize("rho", [0.0, -0.7])
    def test_correlation(self, rho):
        _, spot, iv = simulate_spot_iv(SyntheticMarketConfig(n_days=100_000, rho=rho, seed=11))
        c = np.corrcoef(np.diff(np.log(spot)), np.diff(iv))[0, 1]
        assert abs(c - rho) <= 0.02

    def test_deterministic(self):
        cfg = SyntheticMarketConfig(n_days=40, seed=5)
        pd.testing.assert_frame_equal(synthesize_market(cfg), synthesize_market(cfg))

    def test_invalid_rho(self):
        with pytest.raises(ValueError):
            synthesize_market(SyntheticMarketConfig(rho=1.5))

    def test_iv_floor(self):
        _, _, iv = simulate_spot_iv(SyntheticMarketConfig(n_days=3000, iv0=0.03, iv_vol=0.5, seed=1))
        assert iv.min() >= 0.01

    def test_no_arbitrage_and_invariants(self):
        df = synthesize_market(SyntheticMarketConfig(n_days=60, seed=2))
        tau = (df["expiry"] - df["date"]).dt.days.to_numpy() / 365.0
        lo, hi = no_arbitrage_bounds(MarketInputs(df["underlying"].to_numpy(), df["strike"].to_numpy(), tau,
                                                  df["rate"].to_numpy(), df["div_yield"].to_numpy()))
        mid = df["mid"].to_numpy()
        assert np.all(mid >= lo - 1e-9) and np.all(mid <= hi + 1e-9)
        assert np.all(df["bid"] <= df["ask"])

    def test_episodes_from_synthetic(self):
        df, _ = clean(synthesize_market(SyntheticMarketConfig(n_days=252, seed=3)))
        eps, rep = build_year_episodes(df, [2015], overlapping=False)
        assert len(eps) > 0
        cal = trading_calendar(df)
        starts = sorted({np.searchsorted(cal, np.datetime64(e.window_id)) for e in eps})
        assert all(b - a >= 21 for a, b in zip(starts, starts[1:]))
        for e in eps:
            e.check()
            assert e.year == 2015 and str(e.dates[-1])[:4] == "2015"
