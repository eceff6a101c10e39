"""Daily OHLCV + news ingestion, chronological splits, and a synthetic regime generator."""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

PRICE_COLUMNS = ("date", "open", "high", "low", "close", "adjclose", "volume")
NEWS_COLUMNS = ("date", "headline")
HEADLINE_JOINER = "; "


class LoadError(ValueError):
    """Raised for unreadable or inconsistent price/news files."""


@dataclass(frozen=True)
class OhlcvBar:
    date: dt.date
    open: float
    high: float
    low: float
    close: float
    adjclose: float
    volume: int
    headline: Optional[str] = None

    def __post_init__(self):
        prices = (self.open, self.high, self.low, self.close, self.adjclose)
        if not all(math.isfinite(p) and p > 0 for p in prices):
            raise ValueError(f"{self.date}: prices must be finite and > 0, got {prices}")
        if self.volume < 0:
            raise ValueError(f"{self.date}: negative volume {self.volume}")
        if self.low > min(self.open, self.close) or self.high < max(self.open, self.close):
            raise ValueError(f"{self.date}: high/low do not bracket open/close")


@dataclass(frozen=True)
class MarketSeries:
    symbol: str
    bars: tuple[OhlcvBar, ...]
    # Metadata that does not take part in equality.
    unmatched_news: int = field(default=0, compare=False)
    regimes: Optional[tuple[int, ...]] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "bars", tuple(self.bars))
        for a, b in zip(self.bars, self.bars[1:]):
            if b.date <= a.date:
                raise ValueError(f"dates not strictly increasing: {a.date} then {b.date}")
        if self.regimes is not None and len(self.regimes) != len(self.bars):
            raise ValueError("regimes must align with bars")

    def __len__(self) -> int:
        return len(self.bars)

    @property
    def dates(self) -> list[dt.date]:
        return [b.date for b in self.bars]

    def slice(self, start: int, stop: int) -> "MarketSeries":
        regimes = None if self.regimes is None else self.regimes[start:stop]
        return MarketSeries(self.symbol, self.bars[start:stop], regimes=regimes)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")

    def train_size(self, n: int) -> int:
        # round() guards against 0.8 * 10 landing a hair above 8.
        return min(n, math.ceil(round(self.train_fraction * n, 9)))

    def boundary_date(self, series: MarketSeries) -> Optional[dt.date]:
        """First date of the test partition, or None when the test partition is empty."""
        k = self.train_size(len(series))
        return series.bars[k].date if k < len(series) else None


def split_series(series: MarketSeries, spec: SplitSpec = SplitSpec()) -> tuple[MarketSeries, MarketSeries]:
    if len(series) == 0:
        raise ValueError("cannot split an empty series")
    k = spec.train_size(len(series))
    return series.slice(0, k), series.slice(k, len(series))


def split_sequence(items: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list, list]:
    """Chronological split of any ordered sequence (e.g. window samples) with the same rule."""
    k = spec.train_size(len(items))
    return list(items[:k]), list(items[k:])


def _parse_date(text: str, path: Path, line: int) -> dt.date:
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError:
        raise LoadError(f"{path}:{line}: column 'date': unparseable date {text!r}") from None


def _parse_number(text: str, column: str, path: Path, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise LoadError(f"{path}:{line}: column {column!r}: non-numeric value {text!r}") from None
    if not math.isfinite(value):
        raise LoadError(f"{path}:{line}: column {column!r}: non-finite value {text!r}")
    return value


def _read_rows(path: Path, columns: tuple[str, ...]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise LoadError(f"{path}: empty file")
        header = [h.strip().lower() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise LoadError(f"{path}:1: missing columns {missing}")
        idx = {c: header.index(c) for c in columns}
        for row in reader:
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise LoadError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, {c: row[i] for c, i in idx.items()}


def load_series(price_source, news_source=None, symbol: Optional[str] = None) -> MarketSeries:
    """Read a price CSV and an optional news CSV into a date-sorted MarketSeries.

    Same-day headlines are joined with ``"; "`` in file order. News dated on
    days without a price row are dropped and counted in ``unmatched_news``.
    """
    price_path = Path(price_source)
    raw: dict[dt.date, tuple[int, dict]] = {}
    for line, rec in _read_rows(price_path, PRICE_COLUMNS):
        day = _parse_date(rec["date"], price_path, line)
        if day in raw:
            raise LoadError(f"{price_path}:{line}: duplicate date {day} (first seen on line {raw[day][0]})")
        values = {c: _parse_number(rec[c], c, price_path, line) for c in PRICE_COLUMNS[1:]}
        raw[day] = (line, values)
    if not raw:
        raise LoadError(f"{price_path}: no price rows")

    headlines: dict[dt.date, list[str]] = {}
    unmatched = 0
    if news_source is not None:
        news_path = Path(news_source)
        for line, rec in _read_rows(news_path, NEWS_COLUMNS):
            day = _parse_date(rec["date"], news_path, line)
            text = rec["headline"].strip()
            if day not in raw:
                unmatched += 1
                continue
            if text:
                headlines.setdefault(day, []).append(text)
        if unmatched:
            log.warning("%s: %d headline(s) on non-trading days ignored", news_path, unmatched)

    bars = []
    for day in sorted(raw):
        line, v = raw[day]
        news = headlines.get(day)
        try:
            bars.append(OhlcvBar(
                date=day, open=v["open"], high=v["high"], low=v["low"], close=v["close"],
                adjclose=v["adjclose"], volume=int(v["volume"]),
                headline=HEADLINE_JOINER.join(news) if news else None,
            ))
        except ValueError as exc:
            raise LoadError(f"{price_path}:{line}: {exc}") from None
    return MarketSeries(symbol or price_path.stem.upper(), bars, unmatched_news=unmatched)


def write_series(series: MarketSeries, price_path, news_path=None) -> None:
    """Write prices (and headlines, if a path is given) in the format ``load_series`` reads."""
    with open(price_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(PRICE_COLUMNS)
        for b in series.bars:
            w.writerow([b.date.isoformat(), repr(b.open), repr(b.high), repr(b.low),
                        repr(b.close), repr(b.adjclose), b.volume])
    if news_path is not None:
        with open(news_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC)
            w.writerow(NEWS_COLUMNS)
            for b in series.bars:
                if b.headline is not None:
                    w.writerow([b.date.isoformat(), b.headline])


# --------------------------------------------------------------------------- synthetic data

_BULL_NEWS = (
    "{sym} beats quarterly earnings expectations",
    "Analysts upgrade {sym} on strong cloud demand",
    "{sym} announces record revenue and raises guidance",
    "{sym} unveils new product line to enthusiastic reviews",
    "Institutional investors increase stakes in {sym}",
    "{sym} expands buyback program",
)
_BEAR_NEWS = (
    "{sym} misses earnings estimates as margins shrink",
    "Analysts downgrade {sym} amid slowing growth",
    "{sym} announces layoffs and cuts outlook",
    "Regulators open probe into {sym} business practices",
    "{sym} faces supply chain disruptions",
    "Major customer drops {sym} contract",
)


@dataclass(frozen=True)
class RegimeSpec:
    """Two-state Markov regime process driving the synthetic generator.

    Regime 1 is bullish (``up_drift``), regime 0 bearish (``down_drift``).
    ``news_accuracy`` is the probability a headline's tone matches the regime.
    """
    switch_prob: float = 0.03
    up_drift: float = 0.006
    down_drift: float = -0.006
    volatility: float = 0.012
    no_news_fraction: float = 0.47
    news_accuracy: float = 0.8
    start_price: float = 100.0
    start_date: dt.date = dt.date(2014, 1, 2)
    symbol: str = "SYN"

    def __post_init__(self):
        if not 0.0 <= self.switch_prob <= 1.0:
            raise ValueError("switch_prob must be in [0, 1]")
        if not 0.0 <= self.no_news_fraction <= 1.0:
            raise ValueError("no_news_fraction must be in [0, 1]")
        if not 0.0 <= self.news_accuracy <= 1.0:
            raise ValueError("news_accuracy must be in [0, 1]")
        if self.volatility < 0 or self.start_price <= 0:
            raise ValueError("volatility must be >= 0 and start_price > 0")


def _business_days(start: dt.date, n: int) -> list[dt.date]:
    days, d = [], start
    while len(days) < n:
        if d.weekday() < 5:
            days.append(d)
        d += dt.timedelta(days=1)
    return days


MIN_SYNTHETIC_DAYS = 40


def generate_synthetic_series(seed: int, days: int, regime_spec: RegimeSpec = RegimeSpec()) -> MarketSeries:
    """Geometric random walk whose drift follows a two-state Markov chain.

    Headlines carry the active regime's tone with probability
    ``news_accuracy``. The realised regime of every bar is attached as
    ``series.regimes`` (1 = bull, 0 = bear).
    """
    if days < MIN_SYNTHETIC_DAYS:
        raise ValueError(f"days must be >= {MIN_SYNTHETIC_DAYS}, got {days}")
    spec = regime_spec
    rng = np.random.default_rng(seed)

    switches = rng.random(days) < spec.switch_prob
    regimes = np.empty(days, dtype=np.int64)
    regimes[0] = rng.integers(0, 2)
    for t in range(1, days):
        regimes[t] = 1 - regimes[t - 1] if switches[t] else regimes[t - 1]

    drift = np.where(regimes == 1, spec.up_drift, spec.down_drift)
    log_ret = drift + spec.volatility * rng.standard_normal(days)
    log_ret[0] = 0.0
    close = spec.start_price * np.exp(np.cumsum(log_ret))
    gap = 0.3 * spec.volatility * rng.standard_normal(days)
    prev_close = np.concatenate([[spec.start_price], close[:-1]])
    open_ = prev_close * np.exp(gap)
    wick_hi = np.abs(0.5 * spec.volatility * rng.standard_normal(days))
    wick_lo = np.abs(0.5 * spec.volatility * rng.standard_normal(days))
    high = np.maximum(open_, close) * np.exp(wick_hi)
    low = np.minimum(open_, close) * np.exp(-wick_lo)
    # Back-adjustment for a small steady dividend: older bars scaled down more.
    adj_factor = np.exp(-5e-5 * np.arange(days - 1, -1, -1))
    adjclose = close * adj_factor
    volume = rng.integers(500_000, 5_000_000, size=days)

    has_news = rng.random(days) >= spec.no_news_fraction
    tone_ok = rng.random(days) < spec.news_accuracy
    pick = rng.integers(0, len(_BULL_NEWS), size=days)

    bars = []
    for t, day in enumerate(_business_days(spec.start_date, days)):
        headline = None
        if has_news[t]:
            bullish = bool(regimes[t]) == bool(tone_ok[t])
            pool = _BULL_NEWS if bullish else _BEAR_NEWS
            headline = pool[pick[t]].format(sym=spec.symbol)
        bars.append(OhlcvBar(
            date=day, open=float(open_[t]), high=float(high[t]), low=float(low[t]),
            close=float(close[t]), adjclose=float(adjclose[t]), volume=int(volume[t]),
            headline=headline,
        ))
    return MarketSeries(spec.symbol, bars, regimes=tuple(int(r) for r in regimes))
