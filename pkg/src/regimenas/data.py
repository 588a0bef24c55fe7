"""OHLCV ingestion, feature engineering, and synthetic regime-switching markets.

The pipeline is a chain of pure functions:

    load_csv / generate_synthetic -> OhlcvSeries
    engineer_features             -> FeaturePanel (16 features + target + labels)
    normalize_rolling_z           -> FeaturePanel (causal z-scores)
    chronological_split           -> FeaturePanel (train/val/test tags)

Every statistic is causal: nothing at time t looks past t.  All indicator
recursions (EMA, Wilder smoothing) run through ``scipy.signal.lfilter`` with
an explicit seed state, so the conventions are pinned rather than inherited
from a library default.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.signal import lfilter

REGIMES = ("Trend", "HighVolatility", "Range")
SPLITS = ("train", "val", "test")

CSV_HEADER = ["timestamp", "open", "high", "low", "close", "volume"]

#: engineered feature columns, in panel order
FEATURE_NAMES = [
    "log_return",
    "hl_range",
    "co_change",
    "log_volume_change",
    "close_sma7",
    "close_sma14",
    "close_sma30",
    "close_ema7",
    "close_ema14",
    "close_ema30",
    "macd",
    "macd_signal",
    "rsi14",
    "bollinger_b",
    "atr14",
    "realized_vol",
]

#: rows dropped from the head of every feature panel (longest SMA window plus
#: the 26+9 EMA chain behind the MACD signal line)
WARMUP_ROWS = 35


class DataError(ValueError):
    """Malformed input data or configuration."""


@dataclass
class OhlcvSeries:
    """Time-ordered open/high/low/close/volume bars.

    Invariants are checked on construction: timestamps strictly increasing,
    low <= min(open, close) <= max(open, close) <= high, prices positive,
    volume non-negative.
    """

    timestamp: np.ndarray  # int64 unix seconds
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def __post_init__(self):
        self.timestamp = np.asarray(self.timestamp, dtype=np.int64)
        for name in ("open", "high", "low", "close", "volume"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.timestamp)
        for name in ("open", "high", "low", "close", "volume"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column '{name}' length differs from timestamp")
        if n and np.any(np.diff(self.timestamp) <= 0):
            bad = int(np.argmax(np.diff(self.timestamp) <= 0)) + 1
            raise DataError(f"timestamps not strictly increasing at row {bad}")
        body_low = np.minimum(self.open, self.close)
        body_high = np.maximum(self.open, self.close)
        if np.any(self.low > body_low) or np.any(self.high < body_high):
            bad = int(np.argmax((self.low > body_low) | (self.high < body_high)))
            raise DataError(f"high/low do not bracket open/close at row {bad}")
        if np.any(self.low <= 0):
            raise DataError("non-positive price")
        if np.any(self.volume < 0):
            raise DataError("negative volume")

    def __len__(self) -> int:
        return len(self.timestamp)


def load_csv(path) -> OhlcvSeries:
    """Parse an OHLCV CSV with header ``timestamp,open,high,low,close,volume``.

    Any malformed row is rejected with its 1-based line number in the error
    message; field-level validity (high >= low etc.) is enforced per row
    before the whole-series monotonicity check.
    """
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise DataError(f"bad header, expected {','.join(CSV_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 6:
                raise DataError(f"line {lineno}: expected 6 fields, got {len(row)}")
            try:
                ts = int(float(row[0]))
                o, h, l, c, v = (float(x) for x in row[1:])
            except ValueError as exc:
                raise DataError(f"line {lineno}: parse failure ({exc})") from exc
            if h < l:
                raise DataError(f"line {lineno}: high {h} < low {l}")
            if l > min(o, c) or h < max(o, c):
                raise DataError(f"line {lineno}: high/low do not bracket open/close")
            if min(o, h, l, c) <= 0:
                raise DataError(f"line {lineno}: non-positive price")
            if v < 0:
                raise DataError(f"line {lineno}: negative volume")
            rows.append((ts, o, h, l, c, v))
    if not rows:
        raise DataError("no data rows")
    cols = list(zip(*rows))
    return OhlcvSeries(*[np.asarray(c) for c in cols])


def save_csv(series: OhlcvSeries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for i in range(len(series)):
            writer.writerow([
                int(series.timestamp[i]),
                f"{series.open[i]:.10g}",
                f"{series.high[i]:.10g}",
                f"{series.low[i]:.10g}",
                f"{series.close[i]:.10g}",
                f"{series.volume[i]:.10g}",
            ])


# ---------------------------------------------------------------------------
# indicators
# ---------------------------------------------------------------------------

def sma(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing simple moving average; NaN before the window fills."""
    out = np.full(len(x), np.nan)
    if len(x) >= window:
        kernel = np.ones(window) / window
        out[window - 1:] = np.convolve(x, kernel, mode="valid")
    return out


def ema(x: np.ndarray, span: int) -> np.ndarray:
    """Exponential moving average, alpha = 2/(span+1), seeded at x[0]."""
    alpha = 2.0 / (span + 1.0)
    return _first_order_filter(x, alpha, x[0] if len(x) else 0.0)


def _first_order_filter(x: np.ndarray, alpha: float, seed: float) -> np.ndarray:
    # y[t] = alpha*x[t] + (1-alpha)*y[t-1], y[-1] = seed
    b, a = [alpha], [1.0, -(1.0 - alpha)]
    zi = np.array([(1.0 - alpha) * seed])
    y, _ = lfilter(b, a, x, zi=zi)
    return y


def _wilder_smooth(x: np.ndarray, period: int, seed: float) -> np.ndarray:
    """Wilder recursion y[t] = y[t-1] + (x[t] - y[t-1])/period from a seed."""
    return _first_order_filter(x, 1.0 / period, seed)


def wilder_rsi(close: np.ndarray, period: int = 14) -> np.ndarray:
    """Wilder's relative strength index in [0, 100]; NaN during warm-up.

    The first average gain/loss is a plain mean over the first ``period``
    deltas, subsequent ones use Wilder smoothing.  Zero net movement in both
    directions reads as the neutral 50.
    """
    n = len(close)
    out = np.full(n, np.nan)
    if n <= period:
        return out
    delta = np.diff(close)
    gain = np.maximum(delta, 0.0)
    loss = np.maximum(-delta, 0.0)
    avg_gain = np.empty(n - 1)
    avg_loss = np.empty(n - 1)
    avg_gain[period - 1] = gain[:period].mean()
    avg_loss[period - 1] = loss[:period].mean()
    if n - 1 > period:
        avg_gain[period:] = _wilder_smooth(gain[period:], period, avg_gain[period - 1])
        avg_loss[period:] = _wilder_smooth(loss[period:], period, avg_loss[period - 1])
    g = avg_gain[period - 1:]
    l = avg_loss[period - 1:]
    rsi = np.where(
        (g == 0.0) & (l == 0.0), 50.0,
        np.where(l == 0.0, 100.0, 100.0 - 100.0 / (1.0 + g / np.maximum(l, 1e-300))),
    )
    out[period:] = rsi
    return out


def macd(close: np.ndarray, fast: int = 12, slow: int = 26,
         signal: int = 9) -> tuple:
    """MACD line and signal line (EMA of the MACD line)."""
    line = ema(close, fast) - ema(close, slow)
    sig = ema(line, signal)
    return line, sig


def true_range(high: np.ndarray, low: np.ndarray, close: np.ndarray) -> np.ndarray:
    tr = high - low
    if len(close) > 1:
        prev = close[:-1]
        tr = tr.copy()
        tr[1:] = np.maximum.reduce([
            high[1:] - low[1:],
            np.abs(high[1:] - prev),
            np.abs(low[1:] - prev),
        ])
    return tr


def wilder_atr(high: np.ndarray, low: np.ndarray, close: np.ndarray,
               period: int = 14) -> np.ndarray:
    """Average true range; first value is the mean of the first ``period`` TRs."""
    n = len(close)
    out = np.full(n, np.nan)
    if n < period:
        return out
    tr = true_range(high, low, close)
    out[period - 1] = tr[:period].mean()
    if n > period:
        out[period:] = _wilder_smooth(tr[period:], period, out[period - 1])
    return out


def adx(high: np.ndarray, low: np.ndarray, close: np.ndarray,
        period: int = 14) -> np.ndarray:
    """Wilder's average directional index; NaN until 2*period - 1 bars exist.

    DX with a zero DI sum (no movement at all) is read as 0.
    """
    n = len(close)
    out = np.full(n, np.nan)
    if n < 2 * period:
        return out
    up = high[1:] - high[:-1]
    down = low[:-1] - low[1:]
    dm_plus = np.where((up > down) & (up > 0), up, 0.0)
    dm_minus = np.where((down > up) & (down > 0), down, 0.0)
    tr = true_range(high, low, close)[1:]

    def smooth(x):
        s = np.empty(len(x))
        s[period - 1] = x[:period].mean()
        if len(x) > period:
            s[period:] = _wilder_smooth(x[period:], period, s[period - 1])
        return s[period - 1:]

    sp, sm, st = smooth(dm_plus), smooth(dm_minus), smooth(tr)
    di_plus = 100.0 * sp / np.maximum(st, 1e-300)
    di_minus = 100.0 * sm / np.maximum(st, 1e-300)
    di_sum = di_plus + di_minus
    dx = np.where(di_sum == 0.0, 0.0, 100.0 * np.abs(di_plus - di_minus)
                  / np.maximum(di_sum, 1e-300))
    # dx[i] refers to close index i + period
    adx_vals = np.full(len(dx), np.nan)
    adx_vals[period - 1] = dx[:period].mean()
    if len(dx) > period:
        adx_vals[period:] = _wilder_smooth(dx[period:], period, adx_vals[period - 1])
    out[2 * period - 1:] = adx_vals[period - 1:]
    return out


def bollinger_percent_b(close: np.ndarray, window: int = 20,
                        n_std: float = 2.0) -> np.ndarray:
    """%B position within the Bollinger band; 0.5 when the band has zero width."""
    n = len(close)
    out = np.full(n, np.nan)
    if n < window:
        return out
    view = np.lib.stride_tricks.sliding_window_view(close, window)
    mid = view.mean(axis=1)
    sd = view.std(axis=1)
    lower = mid - n_std * sd
    width = 2.0 * n_std * sd
    tail = close[window - 1:]
    out[window - 1:] = np.where(width == 0.0, 0.5,
                                (tail - lower) / np.maximum(width, 1e-300))
    return out


def realized_volatility(close: np.ndarray, window: int = 20) -> np.ndarray:
    """Rolling population std of one-step log returns."""
    n = len(close)
    out = np.full(n, np.nan)
    if n <= window:
        return out
    rets = np.diff(np.log(close))
    view = np.lib.stride_tricks.sliding_window_view(rets, window)
    out[window:] = view.std(axis=1)
    return out


def rolling_quantile(x: np.ndarray, window: int, q: float) -> np.ndarray:
    """Trailing quantile over the last ``window`` points (expanding early).

    NaNs are ignored; a window with no finite value yields NaN.
    """
    n = len(x)
    out = np.empty(n)
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", "All-NaN slice", RuntimeWarning)
        head = min(window - 1, n)
        for t in range(head):
            out[t] = np.nanquantile(x[:t + 1], q)
        if n >= window:
            view = np.lib.stride_tricks.sliding_window_view(x, window)
            out[window - 1:] = np.nanquantile(view, q, axis=1)
    return out


# ---------------------------------------------------------------------------
# feature panel
# ---------------------------------------------------------------------------

@dataclass
class FeaturePanel:
    """Engineered features, prediction target, and bookkeeping labels.

    ``target[t]`` is the next-step log return; ``regime_label`` is the
    rule-based classification of each row; ``split`` tags each row as one of
    train/val/test (chronological).
    """

    X: np.ndarray                     # T x F
    feature_names: list
    target: np.ndarray                # T
    regime_label: np.ndarray          # T, strings from REGIMES
    split: np.ndarray                 # T, strings from SPLITS
    timestamps: np.ndarray            # T, unix seconds
    # raw side-channels that must survive normalization: the volatility
    # block needs a non-negative sigma and the volume-gated skip needs a
    # log-volume level, neither of which a z-scored column can provide
    sigma: Optional[np.ndarray] = None       # T, realized vol, >= 0
    log_volume: Optional[np.ndarray] = None  # T, log1p(volume)

    def __len__(self) -> int:
        return self.X.shape[0]

    def rows(self, split_name: str) -> np.ndarray:
        return np.where(self.split == split_name)[0]


def engineer_features(series: OhlcvSeries) -> FeaturePanel:
    """Build the fixed 16-column feature panel from an OHLCV series.

    The first 35 rows are dropped as indicator warm-up and the final row is
    dropped because it has no next-step target.  Volume enters through
    log1p so zero-volume bars stay finite.  Regime labels come from the
    ADX/ATR rule in :func:`label_regimes_posthoc`; the split column starts
    with the default 70/15/15 chronological assignment.
    """
    n = len(series)
    if n <= WARMUP_ROWS + 1:
        raise DataError(f"need more than {WARMUP_ROWS + 1} rows, got {n}")
    c, o, h, l, v = series.close, series.open, series.high, series.low, series.volume

    log_close = np.log(c)
    log_ret = np.concatenate([[np.nan], np.diff(log_close)])
    log_vol = np.log1p(v)
    dlog_vol = np.concatenate([[np.nan], np.diff(log_vol)])

    macd_line, macd_sig = macd(c)
    realized_vol = realized_volatility(c, 20)
    cols = [
        log_ret,
        (h - l) / c,
        (c - o) / o,
        dlog_vol,
        c / sma(c, 7) - 1.0,
        c / sma(c, 14) - 1.0,
        c / sma(c, 30) - 1.0,
        c / ema(c, 7) - 1.0,
        c / ema(c, 14) - 1.0,
        c / ema(c, 30) - 1.0,
        macd_line,
        macd_sig,
        wilder_rsi(c, 14) / 100.0,
        bollinger_percent_b(c, 20),
        wilder_atr(h, l, c, 14) / c,
        realized_vol,
    ]
    X = np.column_stack(cols)
    target = np.concatenate([np.diff(log_close), [np.nan]])
    labels = label_regimes_posthoc(series)

    keep = slice(WARMUP_ROWS, n - 1)
    X = X[keep]
    if np.any(~np.isfinite(X)):
        raise DataError("non-finite feature after warm-up trimming")
    panel = FeaturePanel(
        X=X,
        feature_names=list(FEATURE_NAMES),
        target=target[keep],
        regime_label=labels[keep],
        split=np.empty(X.shape[0], dtype=object),
        timestamps=series.timestamp[keep],
        sigma=realized_vol[keep],
        log_volume=log_vol[keep],
    )
    return chronological_split(panel)


def normalize_rolling_z(panel: FeaturePanel, window: int = 60) -> FeaturePanel:
    """Causal rolling z-score of every feature column.

    Statistics at row t use rows max(0, t-window+1)..t only — the window
    expands until it is full, so early rows are normalized against shorter
    history rather than peeking ahead.  Denominator is max(std, 1e-8).
    """
    if window < 2:
        raise DataError("window must be >= 2")
    T = len(panel)
    if window > T:
        raise DataError(f"window {window} larger than panel length {T}")
    X = panel.X
    csum = np.cumsum(X, axis=0)
    csq = np.cumsum(X * X, axis=0)
    t = np.arange(T)
    lo = np.maximum(t - window + 1, 0)
    counts = (t - lo + 1).astype(np.float64)[:, None]
    sum_w = csum - np.where(lo[:, None] > 0, csum[lo - 1], 0.0)
    sq_w = csq - np.where(lo[:, None] > 0, csq[lo - 1], 0.0)
    mean = sum_w / counts
    var = np.maximum(sq_w / counts - mean * mean, 0.0)
    std = np.sqrt(var)
    Z = (X - mean) / np.maximum(std, 1e-8)
    return replace(panel, X=Z)


def chronological_split(panel: FeaturePanel,
                        ratios: tuple = (0.70, 0.15, 0.15)) -> FeaturePanel:
    """Tag rows train/val/test in index order: floor(train), floor(val), rest."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)}")
    T = len(panel)
    n_train = int(math.floor(ratios[0] * T))
    n_val = int(math.floor(ratios[1] * T))
    split = np.empty(T, dtype=object)
    split[:n_train] = "train"
    split[n_train:n_train + n_val] = "val"
    split[n_train + n_val:] = "test"
    return replace(panel, split=split)


def panel_to_csv(panel: FeaturePanel, path) -> None:
    """Write the panel as CSV: timestamp, features, target, regime, split."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp"] + panel.feature_names
                        + ["target", "regime", "split"])
        for i in range(len(panel)):
            writer.writerow(
                [int(panel.timestamps[i])]
                + [f"{x:.12g}" for x in panel.X[i]]
                + [f"{panel.target[i]:.12g}", panel.regime_label[i], panel.split[i]])


# ---------------------------------------------------------------------------
# regime labeling
# ---------------------------------------------------------------------------

def classify_regime(adx_value: float, atr_value: float,
                    atr_threshold: float, adx_trend: float = 25.0) -> str:
    """Single-row regime rule.

    Trend when ADX exceeds 25; of the non-trending rows, the ones whose ATR
    sits above its trailing 75th percentile are HighVolatility; everything
    else is Range.  A NaN ADX (warm-up) falls through to Range.
    """
    if adx_value > adx_trend:
        return "Trend"
    if adx_value <= adx_trend and atr_value > atr_threshold:
        return "HighVolatility"
    return "Range"


def label_regimes_posthoc(series: OhlcvSeries, adx_period: int = 14,
                          atr_window: int = 14, vol_quantile: float = 0.75,
                          quantile_window: int = 100) -> np.ndarray:
    """Rule-based regime label for every row of the series.

    Rows inside the ADX warm-up (first 2*adx_period - 1) read as Range.  The
    ATR threshold is a trailing ``quantile_window``-step 75th percentile,
    expanding while history is shorter than the window.
    """
    n = len(series)
    if n <= 2 * adx_period:
        raise DataError(f"need more than {2 * adx_period} rows, got {n}")
    adx_vals = adx(series.high, series.low, series.close, adx_period)
    atr_vals = wilder_atr(series.high, series.low, series.close, atr_window)
    thresholds = rolling_quantile(atr_vals, quantile_window, vol_quantile)
    labels = np.empty(n, dtype=object)
    for t in range(n):
        a = adx_vals[t]
        labels[t] = classify_regime(
            a if np.isfinite(a) else float("nan"),
            atr_vals[t] if np.isfinite(atr_vals[t]) else float("-inf"),
            thresholds[t] if np.isfinite(thresholds[t]) else float("inf"),
        )
    return labels


# ---------------------------------------------------------------------------
# synthetic market
# ---------------------------------------------------------------------------

@dataclass
class SynthMarketConfig:
    """Three-regime Markov-switching market generator settings.

    Regime order everywhere is ``REGIMES`` = (Trend, HighVolatility, Range).
    ``mu``/``sigma`` are per-step log-return drift and noise scale; ``kappa``
    is the mean-reversion rate used only in the Range regime, pulling the log
    price back toward its value at regime entry.
    """

    n_steps: int
    transition: np.ndarray
    mu: tuple = (0.0015, 0.0, 0.0)
    sigma: tuple = (0.004, 0.025, 0.004)
    kappa: tuple = (0.0, 0.0, 0.25)
    seed: int = 0
    start_price: float = 100.0
    substeps: int = 8
    start_time: int = 1577836800  # 2020-01-01
    dt_seconds: int = 86400
    base_volume: float = 1e6
    highvol_volume_boost: float = 0.7

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        if self.n_steps <= 0:
            raise DataError("n_steps must be positive")
        if self.transition.shape != (3, 3):
            raise DataError("transition matrix must be 3x3")
        if np.any(self.transition < 0):
            raise DataError("transition probabilities must be non-negative")
        if np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-12):
            raise DataError("transition rows must sum to 1")
        if any(s < 0 for s in self.sigma):
            raise DataError("sigma must be non-negative")
        if any(k < 0 for k in self.kappa):
            raise DataError("kappa must be non-negative")
        if self.substeps < 1:
            raise DataError("substeps must be >= 1")


def default_synth_config(n_steps: int, seed: int = 0) -> SynthMarketConfig:
    """Persistent regimes with distinct dynamics; used by the CLI generator."""
    transition = np.array([
        [0.970, 0.015, 0.015],
        [0.030, 0.940, 0.030],
        [0.015, 0.015, 0.970],
    ])
    return SynthMarketConfig(n_steps=n_steps, transition=transition, seed=seed)


def stationary_distribution(transition: np.ndarray) -> np.ndarray:
    """Stationary distribution of a row-stochastic matrix (left eigenvector)."""
    vals, vecs = np.linalg.eig(transition.T)
    idx = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


def generate_synthetic(cfg: SynthMarketConfig):
    """Sample a regime-switching OHLCV series.

    Returns ``(series, hidden)`` where ``hidden`` is the true regime name per
    step.  Log price moves by ``mu + sigma*noise`` in Trend/HighVolatility
    and adds a ``kappa * (anchor - x)`` pull in Range (anchor = log price at
    regime entry).  Highs and lows come from an exact Brownian bridge between
    consecutive closes, so the bar brackets its endpoints by construction and
    a zero-noise config degenerates to a constant path.  Deterministic for a
    fixed seed.
    """
    rng_chain = np.random.default_rng([cfg.seed, 11])
    rng_noise = np.random.default_rng([cfg.seed, 13])
    rng_intra = np.random.default_rng([cfg.seed, 17])
    rng_vol = np.random.default_rng([cfg.seed, 19])

    n = cfg.n_steps
    pi = stationary_distribution(cfg.transition)
    states = np.empty(n, dtype=np.int64)
    states[0] = rng_chain.choice(3, p=pi)
    # row-wise inverse-CDF sampling keeps the chain one draw per step
    u = rng_chain.random(n - 1)
    cdf = np.cumsum(cfg.transition, axis=1)
    for t in range(1, n):
        states[t] = int(np.searchsorted(cdf[states[t - 1]], u[t - 1], side="right"))

    mu = np.asarray(cfg.mu)
    sigma = np.asarray(cfg.sigma)
    kappa = np.asarray(cfg.kappa)

    x = math.log(cfg.start_price)
    anchor = x
    prev_state = -1
    K = cfg.substeps
    noise = rng_noise.standard_normal(n)
    bridge_noise = rng_intra.standard_normal((n, K)) if K > 1 else None
    vol_noise = rng_vol.standard_normal(n)
    frac = np.arange(K + 1) / K

    opens = np.empty(n)
    highs = np.empty(n)
    lows = np.empty(n)
    closes = np.empty(n)
    volumes = np.empty(n)

    for t in range(n):
        s = states[t]
        if s != prev_state:
            anchor = x
            prev_state = s
        drift = mu[s]
        if s == 2:  # Range: OU pull toward the regime-entry anchor
            drift = drift + kappa[s] * (anchor - x)
        dx = drift + sigma[s] * noise[t]
        x_new = x + dx

        if K > 1:
            w = np.concatenate([[0.0], np.cumsum(bridge_noise[t])]) * (
                sigma[s] / math.sqrt(K))
            path = x + frac * dx + (w - frac * w[-1])
        else:
            path = np.array([x, x_new])

        opens[t] = math.exp(x)
        closes[t] = math.exp(x_new)
        highs[t] = math.exp(path.max())
        lows[t] = math.exp(path.min())
        boost = cfg.highvol_volume_boost if s == 1 else 0.0
        volumes[t] = cfg.base_volume * math.exp(0.5 * vol_noise[t] + boost)
        x = x_new

    series = OhlcvSeries(
        timestamp=cfg.start_time + cfg.dt_seconds * np.arange(n),
        open=opens, high=highs, low=lows, close=closes, volume=volumes,
    )
    hidden = np.array([REGIMES[s] for s in states], dtype=object)
    return series, hidden
