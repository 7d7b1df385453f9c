"""Option-chain ingestion, cleaning, hedging-episode construction and a
synthetic correlated spot/IV market.

A chain is held as a :class:`pandas.DataFrame` with the columns of
:class:`OptionQuote` (``QUOTE_COLUMNS``); dates are ``datetime64[ns]``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from collections import Counter
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .pricing import DAYS_PER_YEAR, MarketInputs, bs_call_price

QUOTE_COLUMNS = ["date", "underlying", "strike", "expiry", "is_call", "bid", "ask", "mid", "iv", "rate", "div_yield"]
NUMERIC_COLUMNS = ["underlying", "strike", "bid", "ask", "mid", "iv", "rate", "div_yield"]
ESSENTIAL_COLUMNS = ["date", "underlying", "strike", "expiry", "mid", "iv", "rate", "div_yield"]
REQUIRED_HEADER = ["date", "underlying", "strike", "expiry", "bid", "ask"]

EPISODE_STEPS = 21
EPISODE_DAYS = EPISODE_STEPS + 1

DEFAULT_MONEYNESS_TARGETS = (0.85, 0.90, 0.95, 1.00, 1.05, 1.10, 1.15)
DEFAULT_MATURITY_TARGETS = (30, 60, 90)


class HeaderMismatchError(ValueError):
    pass


class DataCoverageError(ValueError):
    pass


@dataclass(frozen=True)
class OptionQuote:
    date: date
    underlying: float
    strike: float
    expiry: date
    is_call: bool
    bid: float
    ask: float
    mid: float
    iv: float
    rate: float
    div_yield: float

    def violation(self) -> str | None:
        if self.bid > self.ask:
            return "crossed quote"
        if self.strike <= 0:
            return "invalid strike"
        if self.underlying <= 0:
            return "invalid price"
        if self.expiry <= self.date:
            return "expiry not after date"
        if abs(self.mid - 0.5 * (self.bid + self.ask)) > 1e-9 * max(1.0, abs(self.mid)):
            return "mid inconsistent"
        return None

    @classmethod
    def from_row(cls, row) -> "OptionQuote":
        return cls(
            date=pd.Timestamp(row["date"]).date(),
            underlying=float(row["underlying"]),
            strike=float(row["strike"]),
            expiry=pd.Timestamp(row["expiry"]).date(),
            is_call=bool(row["is_call"]),
            bid=float(row["bid"]),
            ask=float(row["ask"]),
            mid=float(row["mid"]),
            iv=float(row["iv"]),
            rate=float(row["rate"]),
            div_yield=float(row["div_yield"]),
        )


def quotes_to_frame(quotes: Iterable[OptionQuote]) -> pd.DataFrame:
    rows = [q.__dict__ for q in quotes]
    df = pd.DataFrame(rows, columns=QUOTE_COLUMNS)
    df["date"] = pd.to_datetime(df["date"])
    df["expiry"] = pd.to_datetime(df["expiry"])
    df["is_call"] = df["is_call"].astype(bool)
    df[NUMERIC_COLUMNS] = df[NUMERIC_COLUMNS].astype(float)
    return df


def frame_to_quotes(df: pd.DataFrame) -> list[OptionQuote]:
    return [OptionQuote.from_row(r) for r in df.to_dict("records")]


# --------------------------------------------------------------------------
# ingestion


@dataclass
class RejectionReport:
    total_rows: int = 0
    counts: Counter = field(default_factory=Counter)
    rows: list[tuple[int, str]] = field(default_factory=list)

    def add(self, line: int, reason: str) -> None:
        self.counts[reason] += 1
        self.rows.append((line, reason))

    @property
    def n_rejected(self) -> int:
        return sum(self.counts.values())

    def to_text(self) -> str:
        lines = [f"total_rows\t{self.total_rows}", f"rejected\t{self.n_rejected}"]
        lines += [f"rule\t{k}\t{v}" for k, v in sorted(self.counts.items())]
        lines += [f"row\t{line}\t{reason}" for line, reason in self.rows]
        return "\n".join(lines) + "\n"


_TRUE = {"1", "true", "t", "c", "call", "yes", "y"}
_FALSE = {"0", "false", "f", "p", "put", "no", "n"}


def load_chain(
    source,
    column_map: dict[str, str] | None = None,
    delimiter: str = ",",
    defaults: dict[str, float] | None = None,
) -> tuple[pd.DataFrame, RejectionReport]:
    """Parse a delimited option-chain file.

    ``column_map`` maps canonical field names to source header names.
    ``defaults`` supplies constants for ``rate``/``div_yield``/``is_call``
    when the source has no such column. Empty cells become NaN and are left
    for :func:`clean`; unparseable cells and invariant violations are
    routed to the rejection report.
    """
    column_map = dict(column_map or {})
    defaults = {"is_call": 1.0, **(defaults or {})}
    if isinstance(source, (str, os.PathLike)):
        with open(source, newline="") as fh:
            text = fh.read()
    else:
        text = source.read()
    raw = pd.read_csv(io.StringIO(text), sep=delimiter, dtype=str, keep_default_na=False, skipinitialspace=True)
    raw.columns = [c.strip() for c in raw.columns]
    src = {canon: column_map.get(canon, canon) for canon in QUOTE_COLUMNS}
    missing = [c for c in REQUIRED_HEADER if src[c] not in raw.columns]
    for c in ("iv", "rate", "div_yield", "is_call"):
        if src[c] not in raw.columns and c not in defaults:
            missing.append(c)
    if missing:
        raise HeaderMismatchError(f"missing columns {missing}; header is {list(raw.columns)}")

    report = RejectionReport(total_rows=len(raw))
    out = pd.DataFrame(index=raw.index)
    bad = pd.Series("", index=raw.index)

    def note(mask, reason):
        nonlocal bad
        bad = bad.mask(mask & (bad == ""), reason)

    for c in ("date", "expiry"):
        col = raw[src[c]].str.strip()
        parsed = pd.to_datetime(col, errors="coerce", format="%Y-%m-%d")
        note(parsed.isna() & (col != ""), "malformed field")
        out[c] = parsed
    for c in NUMERIC_COLUMNS:
        if src[c] in raw.columns:
            col = raw[src[c]].str.strip()
            parsed = pd.to_numeric(col, errors="coerce")
            note(parsed.isna() & (col != ""), "malformed field")
            out[c] = parsed.astype(float)
        elif c in defaults:
            out[c] = float(defaults[c])
        else:
            out[c] = np.nan
    if src["is_call"] in raw.columns:
        col = raw[src["is_call"]].str.strip().str.lower()
        known = col.isin(_TRUE | _FALSE)
        note(~known, "malformed field")
        out["is_call"] = col.isin(_TRUE)
    else:
        out["is_call"] = bool(defaults["is_call"])

    computed = 0.5 * (out["bid"] + out["ask"])
    out["mid"] = computed.where(computed.notna(), out["mid"])
    note(out["bid"] > out["ask"], "crossed quote")
    note(out["expiry"].notna() & out["date"].notna() & (out["expiry"] <= out["date"]), "expiry not after date")

    for idx in np.flatnonzero(bad.to_numpy() != ""):
        report.add(int(idx) + 2, bad.iloc[idx])  # 1-based line numbers, header is line 1
    kept = out.loc[bad == "", QUOTE_COLUMNS].reset_index(drop=True)
    return kept, report


def write_chain(df: pd.DataFrame, path, delimiter: str = ",") -> None:
    out = df[QUOTE_COLUMNS].copy()
    for c in ("date", "expiry"):
        out[c] = out[c].dt.strftime("%Y-%m-%d")
    out["is_call"] = out["is_call"].astype(int)
    out.to_csv(path, sep=delimiter, index=False, float_format="%.10g")


def chain_fingerprint(df: pd.DataFrame) -> str:
    h = pd.util.hash_pandas_object(df[QUOTE_COLUMNS].reset_index(drop=True), index=False).to_numpy()
    return hashlib.sha256(h.tobytes()).hexdigest()[:16]


# --------------------------------------------------------------------------
# cleaning


@dataclass(frozen=True)
class HedgingRegion:
    moneyness_lo: float = 0.7
    moneyness_hi: float = 1.4
    maturity_lo_days: int = 7
    maturity_hi_days: int = 140


@dataclass
class CleaningReport:
    n_input: int = 0
    n_kept: int = 0
    removed: dict[str, int] = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"input\t{self.n_input}", f"kept\t{self.n_kept}"]
        lines += [f"removed\t{k}\t{v}" for k, v in self.removed.items()]
        return "\n".join(lines) + "\n"


CLEANING_RULES = ("missing field", "invalid strike", "invalid price", "negative spread", "not a call", "outside region")


def maturity_days(df: pd.DataFrame) -> pd.Series:
    return (df["expiry"] - df["date"]).dt.days


def clean(quotes: pd.DataFrame, region: HedgingRegion | None = None) -> tuple[pd.DataFrame, CleaningReport]:
    """Drop unusable quotes; each removed row is charged to the first rule it breaks."""
    region = region or HedgingRegion()
    df = quotes
    remaining = pd.Series(True, index=df.index)
    report = CleaningReport(n_input=len(df))
    with np.errstate(invalid="ignore", divide="ignore"):
        moneyness = df["strike"] / df["underlying"]
    days = maturity_days(df)
    spread = df["ask"] - df["bid"]
    rules = {
        "missing field": df[ESSENTIAL_COLUMNS].isna().any(axis=1),
        "invalid strike": ~np.isfinite(df["strike"]) | (df["strike"] <= 0),
        "invalid price": (
            ~np.isfinite(df["mid"]) | (df["mid"] <= 0) | (df["underlying"] <= 0) | (df["iv"] <= 0) | (df["bid"] < 0)
        ),
        "negative spread": spread < 0,
        "not a call": ~df["is_call"].astype(bool),
        "outside region": ~(
            (moneyness >= region.moneyness_lo)
            & (moneyness <= region.moneyness_hi)
            & (days >= region.maturity_lo_days)
            & (days <= region.maturity_hi_days)
        ),
    }
    for name in CLEANING_RULES:
        hit = rules[name].fillna(False).astype(bool) & remaining
        report.removed[name] = int(hit.sum())
        remaining &= ~hit
    kept = df.loc[remaining].reset_index(drop=True)
    report.n_kept = len(kept)
    return kept, report


# --------------------------------------------------------------------------
# episode construction


def select_start_options(
    quotes: pd.DataFrame,
    moneyness_targets: Sequence[float] = DEFAULT_MONEYNESS_TARGETS,
    maturity_targets: Sequence[int] = DEFAULT_MATURITY_TARGETS,
    moneyness_tol: float = 0.02,
    maturity_tol_days: int = 10,
) -> pd.DataFrame:
    """Pick one quote per (K/S target, maturity target) pair from a single-date chain.

    Nearest moneyness wins, then nearest maturity, then lower strike, then
    earlier expiry. Distances are rounded to 1e-12 so that ties are exact.
    Targets with no quote inside the tolerance box are left unfilled.
    """
    if quotes.empty:
        return quotes.iloc[0:0]
    if quotes["date"].nunique() != 1:
        raise ValueError("select_start_options expects quotes for a single date")
    ks = (quotes["strike"] / quotes["underlying"]).to_numpy()
    days = maturity_days(quotes).to_numpy()
    strikes = quotes["strike"].to_numpy()
    expiries = quotes["expiry"].to_numpy()
    chosen: list[int] = []
    for mt in moneyness_targets:
        dm = np.round(np.abs(ks - mt), 12)
        in_m = dm <= moneyness_tol + 1e-12
        for tt in maturity_targets:
            dt = np.abs(days - tt)
            ok = np.flatnonzero(in_m & (dt <= maturity_tol_days))
            if ok.size == 0:
                continue
            order = np.lexsort((expiries[ok], strikes[ok], dt[ok], dm[ok]))
            pick = int(ok[order[0]])
            if pick not in chosen:
                chosen.append(pick)
    return quotes.iloc[chosen]


@dataclass
class Episode:
    strike: float
    expiry: np.datetime64
    is_call: bool
    dates: np.ndarray  # datetime64[D], length 22
    underlying: np.ndarray
    option_mid: np.ndarray
    iv: np.ndarray
    rate: np.ndarray
    div_yield: np.ndarray
    window_id: str

    def __post_init__(self):
        self.expiry = np.datetime64(self.expiry, "D")
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        for name in ("underlying", "option_mid", "iv", "rate", "div_yield"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def tau(self) -> np.ndarray:
        return (self.expiry - self.dates).astype(float) / DAYS_PER_YEAR

    @property
    def contract(self) -> tuple[float, str, bool]:
        return (float(self.strike), str(self.expiry), bool(self.is_call))

    @property
    def key(self) -> tuple[str, float, str]:
        return (self.window_id, float(self.strike), str(self.expiry))

    @property
    def year(self) -> int:
        return int(str(self.dates[0])[:4])

    def market(self, t: int | slice = slice(None)) -> MarketInputs:
        return MarketInputs(
            spot=self.underlying[t], strike=self.strike, tau=self.tau[t],
            rate=self.rate[t], div_yield=self.div_yield[t], sigma=self.iv[t],
        )

    def check(self) -> None:
        if len(self.dates) != EPISODE_DAYS:
            raise ValueError(f"episode must have {EPISODE_DAYS} days, got {len(self.dates)}")
        if np.any(np.diff(self.dates.astype(np.int64)) <= 0):
            raise ValueError("episode dates must be strictly increasing")
        if np.any(self.tau <= 0):
            raise ValueError("episode runs past expiry")

    def to_record(self) -> dict:
        return {
            "window_id": self.window_id,
            "strike": float(self.strike),
            "expiry": str(self.expiry),
            "is_call": bool(self.is_call),
            "days": [
                {
                    "date": str(d), "underlying": float(s), "option_mid": float(c),
                    "iv": float(v), "rate": float(r), "div_yield": float(q),
                }
                for d, s, c, v, r, q in zip(
                    self.dates, self.underlying, self.option_mid, self.iv, self.rate, self.div_yield
                )
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Episode":
        days = rec["days"]
        return cls(
            strike=rec["strike"], expiry=np.datetime64(rec["expiry"]), is_call=rec["is_call"],
            dates=np.array([d["date"] for d in days], dtype="datetime64[D]"),
            underlying=[d["underlying"] for d in days], option_mid=[d["option_mid"] for d in days],
            iv=[d["iv"] for d in days], rate=[d["rate"] for d in days], div_yield=[d["div_yield"] for d in days],
            window_id=rec["window_id"],
        )


def write_episodes(episodes: Iterable[Episode], path) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_record(), separators=(",", ":")) + "\n")


def read_episodes(path) -> list[Episode]:
    with open(path) as fh:
        return [Episode.from_record(json.loads(line)) for line in fh if line.strip()]


def filter_nonoverlapping_windows(starts: Sequence[int], length: int = EPISODE_STEPS) -> list[int]:
    """Greedy earliest-first: keep a start only if it is >= ``length`` trading days after the last kept one."""
    kept: list[int] = []
    for s in sorted(starts):
        if not kept or s - kept[-1] >= length:
            kept.append(s)
    return kept


def trading_calendar(quotes: pd.DataFrame) -> np.ndarray:
    return np.unique(quotes["date"].to_numpy().astype("datetime64[D]"))


def year_start_indices(calendar: np.ndarray, years: Iterable[int]) -> list[int]:
    """Trading-day indices whose full 22-day window lies inside one of ``years``."""
    years = set(years)
    yr = calendar.astype("datetime64[Y]").astype(int) + 1970
    out = []
    for i in range(len(calendar) - EPISODE_STEPS):
        if yr[i] in years and yr[i + EPISODE_STEPS] == yr[i]:
            out.append(i)
    return out


class ContractIndex:
    """Per-contract daily series for fast path lookup."""

    def __init__(self, quotes: pd.DataFrame):
        df = quotes.sort_values(["strike", "expiry", "date"], kind="mergesort")
        self._series: dict[tuple[float, np.datetime64], tuple[np.ndarray, np.ndarray]] = {}
        fields = ["underlying", "mid", "iv", "rate", "div_yield"]
        day = df["date"].to_numpy().astype("datetime64[D]")
        vals = df[fields].to_numpy(dtype=float)
        keys = list(zip(df["strike"].to_numpy(), df["expiry"].to_numpy().astype("datetime64[D]")))
        start = 0
        n = len(df)
        for i in range(1, n + 1):
            if i == n or keys[i] != keys[start]:
                self._series[keys[start]] = (day[start:i], vals[start:i])
                start = i

    def path(self, strike: float, expiry, dates: np.ndarray) -> np.ndarray | None:
        entry = self._series.get((strike, np.datetime64(expiry, "D")))
        if entry is None:
            return None
        days, vals = entry
        pos = np.searchsorted(days, dates)
        if np.any(pos >= len(days)) or np.any(days[np.minimum(pos, len(days) - 1)] != dates):
            return None
        return vals[pos]


@dataclass
class EpisodeBuildReport:
    built: int = 0
    discarded: int = 0


def build_episodes(
    quotes: pd.DataFrame,
    start_indices: Sequence[int],
    calendar: np.ndarray | None = None,
    selector=select_start_options,
    index: ContractIndex | None = None,
) -> tuple[list[Episode], EpisodeBuildReport]:
    """Assemble 22-record paths for the start options selected on each start date.

    A path with any missing daily record for its contract is discarded and counted.
    """
    calendar = trading_calendar(quotes) if calendar is None else calendar
    index = index or ContractIndex(quotes)
    by_day = {d: g for d, g in quotes.groupby(quotes["date"].to_numpy().astype("datetime64[D]"))}
    report = EpisodeBuildReport()
    episodes: list[Episode] = []
    for i in start_indices:
        start_day = calendar[i]
        day_quotes = by_day.get(start_day)
        if day_quotes is None:
            continue
        chosen = selector(day_quotes)
        if i + EPISODE_STEPS >= len(calendar):
            report.discarded += len(chosen)
            continue
        dates = calendar[i : i + EPISODE_DAYS]
        for strike, expiry, is_call in chosen[["strike", "expiry", "is_call"]].itertuples(index=False):
            vals = index.path(strike, np.datetime64(expiry, "D"), dates)
            if vals is None:
                report.discarded += 1
                continue
            episodes.append(
                Episode(
                    strike=float(strike), expiry=np.datetime64(expiry, "D"), is_call=bool(is_call), dates=dates,
                    underlying=vals[:, 0], option_mid=vals[:, 1], iv=vals[:, 2], rate=vals[:, 3],
                    div_yield=vals[:, 4], window_id=str(start_day),
                )
            )
            report.built += 1
    return episodes, report


def build_year_episodes(
    quotes: pd.DataFrame,
    years: Iterable[int],
    overlapping: bool,
    calendar: np.ndarray | None = None,
    index: ContractIndex | None = None,
    selector=select_start_options,
) -> tuple[list[Episode], EpisodeBuildReport]:
    """Episodes whose whole window lies inside ``years``.

    Training sets use every eligible start (``overlapping=True``); validation
    and test sets keep non-overlapping 21-day windows only.
    """
    calendar = trading_calendar(quotes) if calendar is None else calendar
    starts = year_start_indices(calendar, years)
    if not overlapping:
        starts = filter_nonoverlapping_windows(starts)
    return build_episodes(quotes, starts, calendar=calendar, index=index, selector=selector)


# --------------------------------------------------------------------------
# synthetic market


@dataclass(frozen=True)
class SyntheticMarketConfig:
    n_days: int = 252
    spot0: float = 100.0
    iv0: float = 0.2
    spot_vol: float = 0.2
    iv_vol: float = 0.1
    rho: float = -0.7
    iv_mean_reversion: float = 5.0
    rate: float = 0.02
    div_yield: float = 0.015
    seed: int = 0
    start: str = "2015-01-02"
    strike_step: float = 0.025  # lattice spacing as a fraction of spot0
    listing_moneyness: tuple[float, float] = (0.7, 1.4)
    expiry_spacing_days: int = 14
    max_maturity_days: int = 140
    half_spread: float = 0.005  # relative to mid
    iv_floor: float = 0.01

    def validate(self) -> "SyntheticMarketConfig":
        if not (-1.0 <= self.rho <= 1.0):
            raise ValueError("rho must lie in [-1, 1]")
        if self.n_days < 2 or self.spot0 <= 0 or self.iv0 <= 0 or self.spot_vol < 0 or self.iv_vol < 0:
            raise ValueError("invalid synthetic market parameters")
        if self.iv_mean_reversion < 0 or self.strike_step <= 0 or self.expiry_spacing_days < 1:
            raise ValueError("invalid synthetic lattice parameters")
        return self


TRADING_DAYS_PER_YEAR = 252.0


def simulate_spot_iv(cfg: SyntheticMarketConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Daily business-day dates, spot and IV paths."""
    cfg.validate()
    dates = np.busday_offset(np.datetime64(cfg.start, "D"), np.arange(cfg.n_days), roll="forward")
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((cfg.n_days - 1, 2))
    zs = z[:, 0]
    zv = cfg.rho * z[:, 0] + np.sqrt(1.0 - cfg.rho**2) * z[:, 1]
    dt = 1.0 / TRADING_DAYS_PER_YEAR
    log_ret = (cfg.rate - cfg.div_yield - 0.5 * cfg.spot_vol**2) * dt + cfg.spot_vol * np.sqrt(dt) * zs
    spot = cfg.spot0 * np.exp(np.concatenate([[0.0], np.cumsum(log_ret)]))
    iv = np.empty(cfg.n_days)
    iv[0] = cfg.iv0
    shock = cfg.iv_vol * np.sqrt(dt) * zv
    for t in range(cfg.n_days - 1):
        nxt = iv[t] + cfg.iv_mean_reversion * (cfg.iv0 - iv[t]) * dt + shock[t]
        if nxt < cfg.iv_floor:
            nxt = 2.0 * cfg.iv_floor - nxt
        iv[t + 1] = max(nxt, cfg.iv_floor)
    return dates, spot, iv


def synthesize_market(cfg: SyntheticMarketConfig) -> pd.DataFrame:
    """Generate a BS-consistent call chain on a fixed strike/expiry lattice.

    Strikes sit on a grid of ``strike_step * spot0``; expiries every
    ``expiry_spacing_days`` calendar days. Each day lists the contracts with
    K/S inside ``listing_moneyness`` and maturity in (0, max_maturity_days].
    """
    dates, spot, iv = simulate_spot_iv(cfg)
    step = cfg.strike_step * cfg.spot0
    first_expiry = dates[0] + 1
    last_expiry = dates[-1] + cfg.max_maturity_days
    expiries = np.arange(first_expiry, last_expiry + 1, cfg.expiry_spacing_days).astype("datetime64[D]")
    lo_k, hi_k = cfg.listing_moneyness
    frames = []
    for d, s, v in zip(dates, spot, iv):
        k = np.arange(np.ceil(lo_k * s / step), np.floor(hi_k * s / step) + 1) * step
        mat = (expiries - d).astype(int)
        live = expiries[(mat > 0) & (mat <= cfg.max_maturity_days)]
        if live.size == 0 or k.size == 0:
            continue
        kk, ee = np.meshgrid(k, live, indexing="ij")
        frames.append((np.full(kk.size, d), np.full(kk.size, s), kk.ravel(), ee.ravel(), np.full(kk.size, v)))
    day = np.concatenate([f[0] for f in frames])
    und = np.concatenate([f[1] for f in frames])
    strike = np.concatenate([f[2] for f in frames])
    expiry = np.concatenate([f[3] for f in frames])
    vol = np.concatenate([f[4] for f in frames])
    tau = (expiry - day).astype(float) / DAYS_PER_YEAR
    mid = bs_call_price(MarketInputs(und, strike, tau, cfg.rate, cfg.div_yield, vol))
    mid = np.round(mid, 10)
    half = cfg.half_spread * mid
    df = pd.DataFrame(
        {
            "date": pd.to_datetime(day), "underlying": und, "strike": strike, "expiry": pd.to_datetime(expiry),
            "is_call": True, "bid": mid - half, "ask": mid + half, "mid": mid, "iv": vol,
            "rate": cfg.rate, "div_yield": cfg.div_yield,
        }
    )
    return df[QUOTE_COLUMNS]
