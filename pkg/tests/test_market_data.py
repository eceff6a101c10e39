import datetime as dt

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from llmoe.market_data import (
    LoadError, RegimeSpec, SplitSpec, generate_synthetic_series, load_series, split_series,
    write_series,
)

from conftest import make_series

PRICE_HEADER = "date,open,high,low,close,adjclose,volume\n"


def write(path, text):
    path.write_text(text)
    return path


def test_join_headline_onto_matching_day(tmp_path):
    prices = write(tmp_path / "p.csv", PRICE_HEADER +
                   "2024-01-02,10,11,9,10.5,10.4,100\n"
                   "2024-01-03,10.5,11,10,10.8,10.7,200\n"
                   "2024-01-04,10.8,11.2,10.6,11,10.9,300\n")
    news = write(tmp_path / "n.csv", 'date,headline\n2024-01-03,"Chipmaker beats, raises outlook"\n')
    s = load_series(prices, news)
    assert len(s) == 3
    assert [b.headline for b in s.bars] == [None, "Chipmaker beats, raises outlook", None]
    assert s.unmatched_news == 0


def test_unsorted_rows_are_sorted(tmp_path):
    prices = write(tmp_path / "p.csv", PRICE_HEADER +
                   "2024-01-04,1,1,1,1,1,1\n2024-01-02,1,1,1,1,1,1\n2024-01-03,1,1,1,1,1,1\n")
    s = load_series(prices)
    assert s.dates == [dt.date(2024, 1, 2), dt.date(2024, 1, 3), dt.date(2024, 1, 4)]


def test_weekend_headline_ignored_and_counted(tmp_path):
    prices = write(tmp_path / "p.csv", PRICE_HEADER + "2024-01-05,1,1,1,1,1,1\n2024-01-08,1,1,1,1,1,1\n")
    # 2024-01-06 is a Saturday.
    news = write(tmp_path / "n.csv", "date,headline\n2024-01-06,Weekend deal\n2024-01-08,Monday news\n")
    s = load_series(prices, news)
    assert s.unmatched_news == 1
    assert [b.headline for b in s.bars] == [None, "Monday news"]


def test_same_day_headlines_concatenated_in_file_order(tmp_path):
    prices = write(tmp_path / "p.csv", PRICE_HEADER + "2024-01-05,1,1,1,1,1,1\n")
    news = write(tmp_path / "n.csv", "date,headline\n2024-01-05,First\n2024-01-05,Second\n")
    assert load_series(prices, news).bars[0].headline == "First; Second"


@pytest.mark.parametrize("row, column", [
    ("2024-01-02,1,1,1,abc,1,1\n", "close"),
    ("2024/01/02,1,1,1,1,1,1\n", "date"),
])
def test_malformed_row_names_file_line_column(tmp_path, row, column):
    prices = write(tmp_path / "p.csv", PRICE_HEADER + "2024-01-01,1,1,1,1,1,1\n" + row)
    with pytest.raises(LoadError) as err:
        load_series(prices)
    msg = str(err.value)
    assert "p.csv:3" in msg and column in msg


def test_duplicate_date_rejected(tmp_path):
    prices = write(tmp_path / "p.csv", PRICE_HEADER + "2024-01-02,1,1,1,1,1,1\n2024-01-02,1,1,1,1,1,1\n")
    with pytest.raises(LoadError, match="duplicate"):
        load_series(prices)


def test_empty_price_file_rejected(tmp_path):
    with pytest.raises(LoadError):
        load_series(write(tmp_path / "p.csv", PRICE_HEADER))
    with pytest.raises(LoadError):
        load_series(write(tmp_path / "q.csv", ""))


def test_inconsistent_bar_rejected(tmp_path):
    prices = write(tmp_path / "p.csv", PRICE_HEADER + "2024-01-02,10,9,8,10,10,1\n")  # high < open
    with pytest.raises(LoadError, match="p.csv:2"):
        load_series(prices)


def test_round_trip(tmp_path, small_series):
    write_series(small_series, tmp_path / "p.csv", tmp_path / "n.csv")
    again = load_series(tmp_path / "p.csv", tmp_path / "n.csv", symbol=small_series.symbol)
    assert again == small_series


@pytest.mark.parametrize("n, train, test", [(10, 8, 2), (2503, 2003, 500), (1, 1, 0)])
def test_split_sizes(n, train, test):
    s = make_series([100.0] * n)
    a, b = split_series(s, SplitSpec(0.8))
    assert (len(a), len(b)) == (train, test)


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1, 1.5])
def test_split_fraction_validated(fraction):
    with pytest.raises(ValueError):
        SplitSpec(fraction)


def test_split_empty_series_rejected():
    with pytest.raises(ValueError):
        split_series(make_series([]))


@given(n=st.integers(1, 400), fraction=st.floats(0.01, 0.99))
def test_split_is_chronological_partition(n, fraction):
    s = make_series([100.0] * n)
    train, test = split_series(s, SplitSpec(fraction))
    assert train.bars + test.bars == s.bars
    if len(test):
        assert train.bars[-1].date < test.bars[0].date
        assert SplitSpec(fraction).boundary_date(s) == test.bars[0].date


def test_synthetic_is_deterministic():
    a = generate_synthetic_series(11, 200)
    b = generate_synthetic_series(11, 200)
    assert a == b and a.regimes == b.regimes
    assert generate_synthetic_series(12, 200) != a


def test_synthetic_all_no_news():
    s = generate_synthetic_series(1, 100, RegimeSpec(no_news_fraction=1.0))
    assert all(b.headline is None for b in s.bars)


def test_synthetic_no_news_fraction():
    s = generate_synthetic_series(7, 1000, RegimeSpec(no_news_fraction=0.47))
    frac = sum(b.headline is None for b in s.bars) / len(s)
    assert abs(frac - 0.47) <= 0.05


def test_synthetic_too_short():
    with pytest.raises(ValueError):
        generate_synthetic_series(1, 39)


def test_synthetic_headlines_track_regime():
    s = generate_synthetic_series(5, 1000, RegimeSpec(news_accuracy=1.0, no_news_fraction=0.0))
    bullish_words = ("beats", "upgrade", "record", "unveils", "increase", "expands")
    for bar, regime in zip(s.bars, s.regimes):
        assert any(w in bar.headline for w in bullish_words) == (regime == 1)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), days=st.integers(40, 300))
def test_synthetic_bars_satisfy_invariants(seed, days):
    s = generate_synthetic_series(seed, days)
    assert len(s) == days
    for b in s.bars:
        assert b.low <= min(b.open, b.close) and b.high >= max(b.open, b.close)
        assert min(b.open, b.high, b.low, b.close, b.adjclose) > 0 and b.volume >= 0
        assert b.date.weekday() < 5
