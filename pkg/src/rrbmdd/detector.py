"""RBM drift detection pipeline.

Per mini-batch: reconstruction error -> sliding-window trend regression kept by
O(1) recurrences -> predictive test of the recent trend slopes against an
autoregressive fit on the preceding ones -> warning or drift decision; the RBM
is then trained on the batch.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import IntEnum

import numpy as np
from scipy import stats

from .rbm import (
    RbmParams,
    class_activation_probs,
    default_hidden_units,
    hidden_activation_probs,
    reconstruct,
)
from .robust import NoiseModel, RobustConfig, gate_from_reconstruction, robust_weight_update


class Signal(IntEnum):
    STABLE = 0
    WARNING = 1
    DRIFT = 2


@dataclass(frozen=True)
class DriftSignal:
    level: Signal
    at_batch: int


# --- reconstruction error --------------------------------------------------

def instance_errors(
    v: np.ndarray,
    recon_v: np.ndarray,
    z: np.ndarray | None = None,
    recon_z: np.ndarray | None = None,
    gates: np.ndarray | None = None,
) -> np.ndarray:
    """sqrt(sum (x - x~)^2 + sum (1_y - y~)^2) per row; all-zero z rows skip the class term."""
    v = np.atleast_2d(v)
    resid = (v - np.atleast_2d(recon_v)) ** 2
    if gates is not None:
        resid = resid * np.atleast_2d(gates)
    total = resid.sum(axis=1)
    if z is not None:
        z = np.atleast_2d(z)
        labeled = z.sum(axis=1) > 0
        class_term = ((z - np.atleast_2d(recon_z)) ** 2).sum(axis=1)
        total = total + np.where(labeled, class_term, 0.0)
    return np.sqrt(total)


def batch_error(v: np.ndarray, z: np.ndarray | None, params: RbmParams) -> float:
    """Mean per-instance reconstruction error R(M_t) of a mini-batch."""
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if v.shape[0] == 0:
        raise ValueError("empty mini-batch")
    recon_v, recon_z = reconstruct(v, z, params)
    return float(instance_errors(v, recon_v, z, recon_z).mean())


# --- trend regression ------------------------------------------------------

@dataclass
class TrendState:
    """Regression accumulators over the retained window of (t, R_t) pairs."""

    w: int = 100
    t: int = 0
    T_bar: float = 0.0
    R_bar: float = 0.0
    TR_bar: float = 0.0
    T2_bar: float = 0.0
    window: deque = field(default_factory=deque)

    @property
    def n(self) -> int:
        return len(self.window)

    def recompute(self) -> None:
        """Rebuild the accumulators from the window (guards against drift in rounding)."""
        ts = np.array([p[0] for p in self.window], dtype=float)
        rs = np.array([p[1] for p in self.window], dtype=float)
        self.T_bar = float(ts.sum())
        self.R_bar = float(rs.sum())
        self.TR_bar = float(ts @ rs)
        self.T2_bar = float(ts @ ts)


def _evict(state: TrendState) -> None:
    t_old, r_old = state.window.popleft()
    state.T_bar -= t_old
    state.R_bar -= r_old
    state.TR_bar -= t_old * r_old
    state.T2_bar -= t_old * t_old


def update_trend(state: TrendState, R_t: float) -> TrendState:
    """Advance one batch: add (t, R_t), evict whatever falls outside the window."""
    if R_t < 0 or not math.isfinite(R_t):
        raise ValueError("batch error must be finite and non-negative")
    state.t += 1
    t = float(state.t)
    state.window.append((t, float(R_t)))
    state.T_bar += t
    state.R_bar += R_t
    state.TR_bar += t * R_t
    state.T2_bar += t * t
    while len(state.window) > state.w:
        _evict(state)
    return state


def shrink_window(state: TrendState, new_w: int) -> TrendState:
    state.w = max(1, int(new_w))
    while len(state.window) > state.w:
        _evict(state)
    return state


def trend_slope(state: TrendState) -> float | None:
    """OLS slope of R against t over the window; None when it is undefined."""
    n = state.n
    if n < 2:
        return None
    den = n * state.T2_bar - state.T_bar**2
    if den <= 1e-12 * max(1.0, state.T2_bar):
        return None
    return (n * state.TR_bar - state.T_bar * state.R_bar) / den


def adapt_window(state: TrendState, w_max: int = 100, delta: float = 0.05, scale: float = 1.0) -> bool:
    """Grow the window by one batch, or cut it to its newer half on a mean change.

    The halves are compared with a Hoeffding bound on errors normalised by
    ``scale`` into [0, 1].  Returns True when the window was cut.
    """
    n = state.n
    m = n // 2
    if m >= 2:
        rs = np.array([p[1] for p in state.window]) / scale
        diff = abs(rs[: n - m].mean() - rs[n - m :].mean())
        eps = math.sqrt(math.log(4.0 / delta) / (2.0 * m))
        if diff > eps:
            shrink_window(state, m)
            return True
    state.w = min(state.w + 1, w_max)
    return False


# --- Granger-style drift test ----------------------------------------------

@dataclass(frozen=True)
class GrangerResult:
    drift: bool
    p_value: float
    f_stat: float
    note: str = ""
    shift: float = 0.0  # fitted change in mean slope increment; positive means the error trend accelerates

    @property
    def decision(self) -> str:
        return "drift" if self.drift else "no_drift"


def _lagged_design(d: np.ndarray, rows: np.ndarray, lag: int) -> tuple[np.ndarray, np.ndarray]:
    X = np.ones((rows.size, lag + 1))
    for j in range(1, lag + 1):
        X[:, j] = d[rows - j]
    return X, d[rows]


def granger_drift_test(
    slope_history,
    lag: int = 2,
    alpha: float = 0.05,
    segment: int | None = None,
    current: int | None = None,
) -> GrangerResult:
    """Test whether the previous slope segment still explains the current one.

    The last ``segment + current`` slopes are first-differenced as one series.
    An AR(lag) model with intercept is fitted on the previous segment and used
    to forecast every row of the current segment.  Two predictive statistics
    are computed from the forecast errors ``e`` (``s2`` is the in-segment
    residual variance, ``df = n_prev - lag - 1``):

        F_level = (RSS_all - RSS_prev) / n_cur / s2        ~ F(n_cur, df)
        t_mean  = mean(e) / sqrt(s2 * (n_cur + m' G m) / n_cur^2)  ~ t(df)

    where ``m`` sums the current design rows and ``G`` is the inverse Gram
    matrix of the previous fit.  The first reacts to any change in dynamics,
    the second to a sustained shift in the slope increments.  They are joined
    with a Bonferroni bound, ``p = min(1, 2 * min(p_level, p_mean))``, so the
    size stays at most ``alpha``.  ``shift`` is ``mean(e)``: positive when the
    error trend accelerates.  With ``segment`` omitted the history is halved;
    ``current`` defaults to ``segment``.
    """
    q = np.asarray(slope_history, dtype=float).ravel()
    L = len(q) // 2 if segment is None else int(segment)
    c = L if current is None else int(current)
    k = lag + 1
    if lag < 1 or L < 1 or c < 1 or L + c > len(q) or L - 1 - lag - k < 2:
        return GrangerResult(False, 1.0, 0.0, "insufficient data")
    d = np.diff(q[-(L + c):])
    prev_rows = np.arange(lag, L - 1)
    cur_rows = np.arange(L - 1, L + c - 1)
    df = prev_rows.size - k
    Xp, yp = _lagged_design(d, prev_rows, lag)
    Xc, yc = _lagged_design(d, cur_rows, lag)
    beta, *_ = np.linalg.lstsq(Xp, yp, rcond=None)
    rp = yp - Xp @ beta
    rss_prev = float(rp @ rp)
    e = yc - Xc @ beta
    shift = float(e.mean())
    Xa, ya = np.vstack([Xp, Xc]), np.concatenate([yp, yc])
    beta_all, *_ = np.linalg.lstsq(Xa, ya, rcond=None)
    ra = ya - Xa @ beta_all
    rss_all = float(ra @ ra)
    scale = max(float(ya @ ya), 1e-300)
    if rss_prev <= 1e-12 * scale:
        if rss_all - rss_prev <= 1e-12 * scale:
            return GrangerResult(False, 1.0, 0.0, "degenerate: no residual variance", shift)
        return GrangerResult(True, 0.0, math.inf, "degenerate: exact fit broken", shift)
    s2 = rss_prev / df
    f = max(rss_all - rss_prev, 0.0) / c / s2
    p_level = float(stats.f.sf(f, c, df))
    m = Xc.sum(axis=0)
    var_mean = s2 * (c + m @ np.linalg.pinv(Xp.T @ Xp) @ m) / c**2
    p_mean = float(2.0 * stats.t.sf(abs(shift) / math.sqrt(var_mean), df)) if var_mean > 0 else 1.0
    p = min(1.0, 2.0 * min(p_level, p_mean))
    return GrangerResult(p < alpha, p, float(f), "", shift)


# --- pipeline --------------------------------------------------------------

class RunningMinMax:
    """Per-feature running min/max used to map raw features into [0, 1]."""

    def __init__(self, n_features: int):
        self.lo = np.full(n_features, np.inf)
        self.hi = np.full(n_features, -np.inf)

    def partial_fit(self, X: np.ndarray) -> None:
        self.lo = np.minimum(self.lo, X.min(axis=0))
        self.hi = np.maximum(self.hi, X.max(axis=0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        span = np.where(self.hi > self.lo, self.hi - self.lo, 1.0)
        return np.clip((X - self.lo) / span, 0.0, 1.0)


@dataclass
class BatchRecord:
    t: int
    error: float
    slope: float | None
    p_value: float
    signal: Signal

    CSV_HEADER = "t,error,slope,p_value,signal"

    def csv_row(self) -> str:
        slope = "" if self.slope is None else repr(self.slope)
        return f"{self.t},{self.error!r},{slope},{self.p_value!r},{self.signal.name}"


@dataclass
class DetectorConfig:
    hidden_ratio: float = 0.5
    eta: float = 0.05
    k: int = 1
    batch_size: int = 50
    w_max: int = 100
    window_delta: float = 0.05
    lag: int = 2
    alpha: float = 0.05
    min_window: int = 20
    min_segment: int = 20
    current_segment: int = 20
    confirm: int = 2
    warning_rule: bool = True
    require_rising: bool = True
    refresh_every: int = 1000


class TrendMonitor:
    """Error series -> windowed trend -> segment test -> signal level.

    Holds everything the decision needs apart from the RBM itself, so a
    recorded error series can be replayed through it.
    """

    def __init__(self, config: DetectorConfig | None = None, error_scale: float = 1.0):
        self.config = config or DetectorConfig()
        self.error_scale = error_scale
        self.reset()

    def reset(self) -> None:
        self.trend = TrendState(w=2)
        self.slopes: list[float] = []
        self._warn_run = 0

    def update(self, R_t: float) -> tuple[Signal, float | None, float]:
        """Feed one batch error; returns (level, slope, p-value).  Drift resets the trend."""
        cfg = self.config
        update_trend(self.trend, R_t)
        adapt_window(self.trend, cfg.w_max, cfg.window_delta, self.error_scale)
        if self.trend.t % cfg.refresh_every == 0:
            self.trend.recompute()
        Q = trend_slope(self.trend)
        # slopes from very short windows are far noisier than the rest and would swamp the test
        if Q is not None and self.trend.n >= cfg.min_window:
            self.slopes.append(Q)
        level, p = self._decide()
        if level == Signal.DRIFT:
            self.reset()
        return level, Q, p

    def _decide(self) -> tuple[Signal, float]:
        """Map the latest test onto a signal level.

        A rejection at ``2 * alpha`` while the error is rising (positive
        current slopes, positive forecast errors) counts as a warning.  Drift
        needs a rejection at ``alpha`` once the warning has persisted for
        ``confirm`` consecutive batches.
        """
        cfg = self.config
        hist = self.slopes
        c = cfg.current_segment
        L = min(self.trend.w, len(hist) - c)
        if L < cfg.min_segment:
            self._warn_run = 0
            return Signal.STABLE, 1.0
        res = granger_drift_test(hist[-(L + c):], cfg.lag, cfg.alpha, segment=L, current=c)
        p = res.p_value
        if p >= 2 * cfg.alpha or (cfg.require_rising and (res.shift <= 0 or np.mean(hist[-c:]) <= 0)):
            self._warn_run = 0
            return Signal.STABLE, p
        self._warn_run += 1
        if p < cfg.alpha and self._warn_run >= cfg.confirm:
            return Signal.DRIFT, p
        return (Signal.WARNING if cfg.warning_rule else Signal.STABLE), p


class RbmDriftDetector:
    """RBM-DD family detector consuming labelled or unlabelled mini-batches."""

    def __init__(
        self,
        n_features: int,
        n_classes: int,
        robust: RobustConfig | None = None,
        config: DetectorConfig | None = None,
        seed: int | np.random.SeedSequence | None = 0,
    ):
        if n_classes < 2:
            raise ValueError("at least two classes are required")
        self.robust = robust or RobustConfig(use_robust_gradient=False, use_robust_energy=False)
        self.config = config or DetectorConfig()
        self.n_features = n_features
        self.n_classes = n_classes
        self.rng = np.random.default_rng(seed)
        H = default_hidden_units(n_features, self.config.hidden_ratio)
        self.params = RbmParams.initialize(n_features, H, n_classes, self.rng)
        self.scaler = RunningMinMax(n_features)
        self.noise = NoiseModel(n_features)
        self.monitor = TrendMonitor(self.config, math.sqrt(n_features + 2.0))
        self.records: list[BatchRecord] = []
        self.batches = 0

    @property
    def name(self) -> str:
        return self.robust.variant

    @property
    def trend(self) -> TrendState:
        return self.monitor.trend

    def _encode(self, X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        self.scaler.partial_fit(X)
        v = self.scaler.transform(X)
        z = np.zeros((len(y), self.n_classes))
        lab = y >= 0
        z[np.flatnonzero(lab), y[lab]] = 1.0
        return v, z

    def process_batch(self, X: np.ndarray, y: np.ndarray) -> DriftSignal:
        """Score, test and then train on one mini-batch.

        ``y`` holds class indices, with -1 for instances whose label is hidden.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        y = np.asarray(y, dtype=np.int64).ravel()
        if X.shape[0] == 0:
            raise ValueError("empty mini-batch")
        cfg = self.config
        self.batches += 1
        v, z = self._encode(X, y)

        recon_v, recon_z = reconstruct(v, z, self.params)
        gates = None
        v_train = v
        if self.robust.use_robust_energy:
            gates = gate_from_reconstruction(v, recon_v, self.noise)
            self.noise.update(v, (v - recon_v) * (gates if self.noise.fitted else 1.0))
            v_train = np.where(gates > 0, v, recon_v)
        R_t = float(instance_errors(v, recon_v, z, recon_z, gates).mean())

        level, Q, p = self.monitor.update(R_t)

        losses = self._losses(v_train, y)
        self.params = robust_weight_update(
            v_train, z, self.params, losses, self.robust, cfg.eta, cfg.k, self.rng
        )
        self.records.append(BatchRecord(self.batches, R_t, Q, p, level))
        return DriftSignal(level, self.batches)

    def _losses(self, v: np.ndarray, y: np.ndarray) -> np.ndarray:
        """0-1 loss of the RBM's own class prediction.

        Instances with hidden labels get the labelled mean, which leaves their
        truncation weight near one.
        """
        if not self.robust.use_robust_gradient:
            return np.zeros(len(y))
        pred = class_activation_probs(hidden_activation_probs(v, None, self.params), self.params).argmax(axis=1)
        lab = y >= 0
        loss = (pred != y).astype(float)
        fill = loss[lab].mean() if lab.any() else 0.0
        return np.where(lab, loss, fill)
