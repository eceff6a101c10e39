"""Engineered daily ratios, descriptive strings and 5-day window samples."""
from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .market_data import MarketSeries

FEATURE_NAMES = (
    "z_open", "z_high", "z_low", "z_close", "z_adjclose",
    "zd_5", "zd_10", "zd_15", "zd_20", "zd_25", "zd_30",
)
ROLLING_WINDOWS = (5, 10, 15, 20, 25, 30)
N_DAY_FEATURES = len(FEATURE_NAMES)
WINDOW_DAYS = 5
N_FEATURES = N_DAY_FEATURES * WINDOW_DAYS
MIN_FEATURE_INDEX = max(ROLLING_WINDOWS) - 1
MIN_SERIES_LENGTH = MIN_FEATURE_INDEX + WINDOW_DAYS + 1
NO_NEWS = "No relevant news."


@dataclass(frozen=True)
class DayFeatures:
    date: dt.date
    z_open: float
    z_high: float
    z_low: float
    z_close: float
    z_adjclose: float
    zd_5: float
    zd_10: float
    zd_15: float
    zd_20: float
    zd_25: float
    zd_30: float
    descriptive: str = ""

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in FEATURE_NAMES)


@dataclass(frozen=True, eq=False)
class WindowSample:
    anchor_date: dt.date
    vector: np.ndarray
    window_texts: tuple[str, ...]
    label: int
    next_return: float
    next_date: Optional[dt.date] = None
    # Generating regime of day t+1; only known for synthetic data.
    next_regime: Optional[int] = None

    def __post_init__(self):
        if self.vector.shape != (N_FEATURES,):
            raise ValueError(f"window vector must have {N_FEATURES} entries, got {self.vector.shape}")
        if len(self.window_texts) != WINDOW_DAYS:
            raise ValueError(f"expected {WINDOW_DAYS} window texts")

    @property
    def z_close_window(self) -> np.ndarray:
        return self.vector[FEATURE_NAMES.index("z_close")::N_DAY_FEATURES]


def build_descriptive(day: DayFeatures, headline: Optional[str]) -> str:
    devs = "/".join(f"{getattr(day, f'zd_{n}'):.4f}" for n in ROLLING_WINDOWS)
    news = headline if headline else NO_NEWS
    return (
        f"Date {day.date.isoformat()}: open {day.z_open:.4f}, high {day.z_high:.4f}, "
        f"low {day.z_low:.4f}, close chg {day.z_close:.4f}, adj chg {day.z_adjclose:.4f}, "
        f"5/10/15/20/25/30-day dev {devs}. News: {news}"
    )


def compute_day_features(series: MarketSeries, index: int) -> DayFeatures:
    if index < MIN_FEATURE_INDEX or index >= len(series):
        raise ValueError(
            f"day {index} needs {MIN_FEATURE_INDEX} prior days of history "
            f"(30-day rolling deviation) within a series of {len(series)} bars"
        )
    bars = series.bars
    bar, prev = bars[index], bars[index - 1]
    # Normalising by today's price first keeps constant series exactly at zero.
    rel = np.array([b.adjclose for b in bars[index - MIN_FEATURE_INDEX:index + 1]]) / bar.adjclose
    rolling = {f"zd_{n}": float(rel[-n:].mean() - 1.0) for n in ROLLING_WINDOWS}
    day = DayFeatures(
        date=bar.date,
        z_open=bar.open / bar.close - 1.0,
        z_high=bar.high / bar.close - 1.0,
        z_low=bar.low / bar.close - 1.0,
        z_close=bar.close / prev.close - 1.0,
        z_adjclose=bar.adjclose / prev.adjclose - 1.0,
        **rolling,
    )
    return dataclasses.replace(day, descriptive=build_descriptive(day, bar.headline))


def build_window_samples(series: MarketSeries) -> list[WindowSample]:
    """One sample per anchor day t with features on t-4..t and a price on t+1.

    Label is 1 only on a strict rise in adjclose; ties count as down.
    """
    n = len(series)
    if n < MIN_SERIES_LENGTH:
        raise ValueError(f"series has {n} bars; at least {MIN_SERIES_LENGTH} are needed for one sample")
    days = [compute_day_features(series, i) for i in range(MIN_FEATURE_INDEX, n)]
    samples = []
    for t in range(MIN_FEATURE_INDEX + WINDOW_DAYS - 1, n - 1):
        window = days[t - WINDOW_DAYS + 1 - MIN_FEATURE_INDEX:t + 1 - MIN_FEATURE_INDEX]
        now, nxt = series.bars[t].adjclose, series.bars[t + 1].adjclose
        samples.append(WindowSample(
            anchor_date=series.bars[t].date,
            vector=np.array([v for d in window for v in d.values()], dtype=np.float64),
            window_texts=tuple(d.descriptive for d in window),
            label=int(nxt > now),
            next_return=nxt / now - 1.0,
            next_date=series.bars[t + 1].date,
            next_regime=None if series.regimes is None else series.regimes[t + 1],
        ))
    return samples


def stack(samples: Sequence[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
    """Design matrix (N, 55) and label vector (N,) for a list of samples."""
    if not samples:
        return np.empty((0, N_FEATURES)), np.empty(0)
    return np.stack([s.vector for s in samples]), np.array([s.label for s in samples], dtype=np.float64)


def feature_columns() -> list[str]:
    return [f"{name}_t-{lag}" if lag else f"{name}_t"
            for lag in range(WINDOW_DAYS - 1, -1, -1) for name in FEATURE_NAMES]


def write_feature_dump(samples: Sequence[WindowSample], path) -> None:
    """One CSV row per sample: anchor_date, the 55 features oldest day first, label."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["anchor_date", *feature_columns(), "label"])
        for s in samples:
            w.writerow([s.anchor_date.isoformat(), *(repr(float(v)) for v in s.vector), s.label])


def sample_to_dict(s: WindowSample) -> dict:
    return {
        "anchor_date": s.anchor_date.isoformat(),
        "vector": [float(v) for v in s.vector],
        "window_texts": list(s.window_texts),
        "label": s.label,
        "next_return": s.next_return,
        "next_date": s.next_date.isoformat() if s.next_date else None,
        "next_regime": s.next_regime,
    }


def sample_from_dict(d: dict) -> WindowSample:
    return WindowSample(
        anchor_date=dt.date.fromisoformat(d["anchor_date"]),
        vector=np.asarray(d["vector"], dtype=np.float64),
        window_texts=tuple(d["window_texts"]),
        label=int(d["label"]),
        next_return=float(d["next_return"]),
        next_date=dt.date.fromisoformat(d["next_date"]) if d.get("next_date") else None,
        next_regime=d.get("next_regime"),
    )


def save_samples(samples: Sequence[WindowSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_dict(s)) + "\n")


def load_samples(path) -> list[WindowSample]:
    with open(Path(path), encoding="utf-8") as fh:
        return [sample_from_dict(json.loads(line)) for line in fh if line.strip()]
