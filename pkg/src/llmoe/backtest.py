"""All-in/all-out simulation and the seven performance metrics.

Conventions: daily risk-free rate 0 by default, sample (n-1) standard
deviation for VOL and SR, SR/SoR/DD annualised by sqrt(252), downside
deviation averaged over *all* observations. Ratios with a zero denominator
are ``None`` rather than NaN or inf.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence

import numpy as np

from .pipeline import UP, PredictionSeries

TRADING_DAYS = 252
ANNUALIZE = math.sqrt(TRADING_DAYS)
# Column order of the results table.
TABLE_ORDER = ("tr", "sr", "cr", "sor", "vol", "dd", "mdd")


@dataclass(frozen=True)
class EquityCurve:
    dates: tuple
    values: np.ndarray
    initial_value: float = 1.0

    def __len__(self) -> int:
        return len(self.values)


def simulate_all_in_all_out(
    predictions: PredictionSeries | Sequence[str],
    realized_returns: Sequence[float],
    initial_value: float = 1.0,
    dates: Optional[Sequence] = None,
) -> tuple[EquityCurve, np.ndarray]:
    """Hold the asset over day t+1 when day t predicts up, otherwise stay in cash.

    ``dates``, if given, labels the curve's points (one more than predictions).
    Returns the equity curve (one point more than there are predictions) and
    the daily strategy returns. No costs or slippage.
    """
    directions = predictions.directions if isinstance(predictions, PredictionSeries) else list(predictions)
    r = np.asarray(realized_returns, dtype=np.float64)
    if len(directions) != len(r):
        raise ValueError(f"{len(directions)} predictions but {len(r)} realized returns")
    if initial_value <= 0:
        raise ValueError("initial_value must be positive")
    invested = np.array([d == UP for d in directions], dtype=bool)
    strat = np.where(invested, r, 0.0)
    values = np.empty(len(r) + 1)
    values[0] = initial_value
    values[1:] = initial_value * np.cumprod(1.0 + strat)
    return EquityCurve(tuple(dates) if dates is not None else (), values, initial_value), strat


def total_return(curve: EquityCurve | Sequence[float]) -> float:
    v = np.asarray(curve.values if isinstance(curve, EquityCurve) else curve, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty equity curve")
    return float((v[-1] - v[0]) / v[0] * 100.0)


def _returns(daily_returns) -> np.ndarray:
    return np.asarray(daily_returns, dtype=np.float64)


def annualized_volatility(daily_returns) -> float:
    r = _returns(daily_returns)
    if r.size < 2:
        raise ValueError("volatility needs at least 2 returns")
    return float(np.std(r, ddof=1) * ANNUALIZE)


def sharpe_ratio(daily_returns, risk_free_daily: float = 0.0) -> Optional[float]:
    ex = _returns(daily_returns) - risk_free_daily
    if ex.size < 2:
        return None
    sd = np.std(ex, ddof=1)
    # Constant series can leave round-off noise in the std.
    if sd <= 1e-14 * max(1.0, float(np.abs(ex).max())):
        return None
    return float(ex.mean() / sd * ANNUALIZE)


def downside_deviation(daily_returns, annualize: bool = True) -> float:
    """sqrt(sum of squared negative returns / N), N counting every observation."""
    r = _returns(daily_returns)
    if r.size == 0:
        raise ValueError("downside deviation needs at least one return")
    neg = np.minimum(r, 0.0)
    dd = math.sqrt(float(np.sum(neg * neg)) / r.size)
    return dd * ANNUALIZE if annualize else dd


def sortino_ratio(daily_returns, risk_free_daily: float = 0.0) -> Optional[float]:
    ex = _returns(daily_returns) - risk_free_daily
    if ex.size == 0:
        return None
    dd = downside_deviation(ex, annualize=False)
    if dd == 0.0:
        return None
    return float(ex.mean() / dd * ANNUALIZE)


def max_drawdown(curve: EquityCurve | Sequence[float]) -> float:
    v = np.asarray(curve.values if isinstance(curve, EquityCurve) else curve, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty equity curve")
    peak = np.maximum.accumulate(v)
    return float(np.max((peak - v) / peak) * 100.0)


def calmar_ratio(tr: float, mdd: float) -> Optional[float]:
    return None if mdd == 0 else tr / mdd


@dataclass(frozen=True)
class MetricsReport:
    tr: float
    vol: float
    sr: Optional[float]
    sor: Optional[float]
    mdd: float
    cr: Optional[float]
    dd: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in TABLE_ORDER}


def compute_metrics(curve: EquityCurve, daily_returns, risk_free_daily: float = 0.0) -> MetricsReport:
    tr = total_return(curve)
    mdd = max_drawdown(curve)
    return MetricsReport(
        tr=tr,
        vol=annualized_volatility(daily_returns),
        sr=sharpe_ratio(daily_returns, risk_free_daily),
        sor=sortino_ratio(daily_returns, risk_free_daily),
        mdd=mdd,
        cr=calmar_ratio(tr, mdd),
        dd=downside_deviation(_returns(daily_returns) - risk_free_daily),
    )


@dataclass(frozen=True)
class MetricSummary:
    mean: Optional[float]
    std: Optional[float]
    n: int
    excluded: int


@dataclass(frozen=True)
class TrialAggregate:
    metrics: dict  # metric name -> MetricSummary
    seeds: tuple

    def as_dict(self) -> dict:
        return {"seeds": list(self.seeds), "metrics": {k: asdict(v) for k, v in self.metrics.items()}}


def aggregate_trials(reports: Sequence[MetricsReport], seeds: Optional[Sequence[int]] = None) -> TrialAggregate:
    """Per-metric mean and sample std across trials; undefined values are excluded and counted."""
    if len(reports) < 2:
        raise ValueError(f"aggregation needs at least 2 trials, got {len(reports)}")
    out = {}
    for f in fields(MetricsReport):
        vals = [getattr(r, f.name) for r in reports]
        ok = np.array([v for v in vals if v is not None], dtype=np.float64)
        mean = float(ok.mean()) if ok.size else None
        std = float(np.std(ok, ddof=1)) if ok.size >= 2 else None
        out[f.name] = MetricSummary(mean, std, int(ok.size), len(vals) - int(ok.size))
    return TrialAggregate({k: out[k] for k in TABLE_ORDER}, tuple(seeds) if seeds is not None else tuple(range(len(reports))))


def write_equity_curve(curve: EquityCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "value"])
        dates = curve.dates or range(len(curve))
        for d, v in zip(dates, curve.values):
            w.writerow([str(d), repr(float(v))])
