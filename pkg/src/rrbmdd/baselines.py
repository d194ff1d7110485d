"""Reference drift detectors driven by the base learner's per-instance correctness.

All detectors share one interface: ``step(correct) -> Signal`` for a single
prediction outcome, ``update(correct_array) -> Signal`` for a batch (strongest
level emitted inside the batch) and ``reset()``.  Each detector clears its
statistics right after emitting Drift.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .detector import Signal


class BaseDetector:
    name = "base"

    def reset(self) -> None:
        raise NotImplementedError

    def step(self, correct: bool) -> Signal:
        raise NotImplementedError

    def update(self, correct) -> Signal:
        level = Signal.STABLE
        for c in np.asarray(correct, dtype=bool).tolist():
            s = self.step(c)
            if s > level:
                level = s
        return level


# --- EDDM ------------------------------------------------------------------

@dataclass(frozen=True)
class EddmParams:
    alpha_w: float = 0.95
    alpha_d: float = 0.90
    min_errors: int = 30

    def __post_init__(self) -> None:
        if not 0 < self.alpha_d < self.alpha_w <= 1:
            raise ValueError("EDDM needs 0 < alpha_d < alpha_w <= 1")


class EDDM(BaseDetector):
    """Tracks the distance between consecutive errors and its spread."""

    name = "EDDM"

    def __init__(self, params: EddmParams | None = None):
        self.params = params or EddmParams()
        self.reset()

    def reset(self) -> None:
        self.n = 0
        self.n_errors = 0
        self.last_error = 0
        self.mean = 0.0
        self.m2 = 0.0
        self.best = 0.0

    def step(self, correct: bool) -> Signal:
        self.n += 1
        if correct:
            return Signal.STABLE
        self.n_errors += 1
        dist = self.n - self.last_error
        self.last_error = self.n
        delta = dist - self.mean
        self.mean += delta / self.n_errors
        self.m2 += delta * (dist - self.mean)
        std = math.sqrt(self.m2 / self.n_errors)
        score = self.mean + 2.0 * std
        if score > self.best:
            self.best = score
        if self.n_errors < self.params.min_errors or self.best <= 0:
            return Signal.STABLE
        ratio = score / self.best
        if ratio < self.params.alpha_d:
            self.reset()
            return Signal.DRIFT
        if ratio < self.params.alpha_w:
            return Signal.WARNING
        return Signal.STABLE


# --- ECDD ------------------------------------------------------------------

@dataclass(frozen=True)
class EcddParams:
    lam: float = 0.2
    min_instances: int = 30
    L_w: float = 1.7
    L_d: float = 2.7

    def __post_init__(self) -> None:
        if not 0 < self.lam <= 1:
            raise ValueError("lambda must lie in (0, 1]")
        if not 0 < self.L_w < self.L_d:
            raise ValueError("ECDD needs 0 < L_w < L_d")


class ECDD(BaseDetector):
    """EWMA chart on the error indicator against the running error rate."""

    name = "ECDD"

    def __init__(self, params: EcddParams | None = None):
        self.params = params or EcddParams()
        self.reset()

    def reset(self) -> None:
        self.n = 0
        self.p = 0.0
        self.z = 0.0
        self._decay2 = 1.0

    def step(self, correct: bool) -> Signal:
        lam = self.params.lam
        err = 0.0 if correct else 1.0
        self.n += 1
        self.p += (err - self.p) / self.n
        self.z = (1.0 - lam) * self.z + lam * err
        self._decay2 *= (1.0 - lam) ** 2
        if self.n < self.params.min_instances:
            return Signal.STABLE
        sigma = math.sqrt(self.p * (1.0 - self.p) * lam / (2.0 - lam) * (1.0 - self._decay2))
        if self.z > self.p + self.params.L_d * sigma:
            self.reset()
            return Signal.DRIFT
        if self.z > self.p + self.params.L_w * sigma:
            return Signal.WARNING
        return Signal.STABLE


# --- FHDDM -----------------------------------------------------------------

@dataclass(frozen=True)
class FhddmParams:
    window: int = 100
    delta: float = 1e-6

    def __post_init__(self) -> None:
        if self.window < 1 or not 0 < self.delta < 1:
            raise ValueError("FHDDM needs window >= 1 and delta in (0, 1)")


def fhddm_bound(window: int, delta: float) -> float:
    return math.sqrt(math.log(1.0 / delta) / (2.0 * window))


class FHDDM(BaseDetector):
    """Sliding-window accuracy compared with its historical maximum."""

    name = "FHDDM"

    def __init__(self, params: FhddmParams | None = None):
        self.params = params or FhddmParams()
        self.eps = fhddm_bound(self.params.window, self.params.delta)
        self.reset()

    def reset(self) -> None:
        self.win: deque[int] = deque()
        self.n_correct = 0
        self.p_max = 0.0

    def step(self, correct: bool) -> Signal:
        c = 1 if correct else 0
        self.win.append(c)
        self.n_correct += c
        if len(self.win) > self.params.window:
            self.n_correct -= self.win.popleft()
        if len(self.win) < self.params.window:
            return Signal.STABLE
        p = self.n_correct / self.params.window
        if p > self.p_max:
            self.p_max = p
        if self.p_max - p > self.eps:
            self.reset()
            return Signal.DRIFT
        return Signal.STABLE


# --- RDDM ------------------------------------------------------------------

@dataclass(frozen=True)
class RddmParams:
    alpha_w: float = 0.95
    alpha_d: float = 0.90
    min_errors: int = 30
    min_instances: int = 7000
    max_instances: int = 40000
    warning_limit: int = 1400
    pruning: bool = True

    def __post_init__(self) -> None:
        if not 0 < self.alpha_d < self.alpha_w <= 1:
            raise ValueError("RDDM needs 0 < alpha_d < alpha_w <= 1")
        if self.min_instances >= self.max_instances:
            raise ValueError("min_instances must be below max_instances")

    @property
    def warning_factor(self) -> float:
        return 1.0 + 2.0 * (1.0 - self.alpha_w)

    @property
    def drift_factor(self) -> float:
        return 1.0 + 2.0 * (1.0 - self.alpha_d)


class RDDM(BaseDetector):
    """DDM-style error-rate monitor with pruning of outdated instances.

    Warning when p + s > (p_min + s_min) * warning_factor, Drift when it exceeds
    (p_min + s_min) * drift_factor, with factor = 1 + 2 * (1 - alpha).  Once
    more than ``max_instances`` outcomes are stored, the statistics are rebuilt
    from the most recent ``min_instances``.  A Warning lasting
    ``warning_limit`` instances is promoted to Drift.  ``pruning=False`` gives
    the plain DDM behaviour for comparison.
    """

    name = "RDDM"

    def __init__(self, params: RddmParams | None = None):
        self.params = params or RddmParams()
        self.reset()

    def reset(self) -> None:
        self.stored: deque[int] = deque()
        self._restart_stats()
        self.warn_count = 0

    def _restart_stats(self) -> None:
        self.n = 0
        self.n_errors = 0
        self.p = 1.0
        self.s = 0.0
        self.ps_min = math.inf
        self.p_min = math.inf
        self.s_min = math.inf

    def _push(self, err: int) -> None:
        self.n += 1
        self.n_errors += err
        self.p += (err - self.p) / self.n
        self.s = math.sqrt(self.p * (1.0 - self.p) / self.n)

    def _rebuild(self) -> None:
        while len(self.stored) > self.params.min_instances:
            self.stored.popleft()
        self._restart_stats()
        for e in self.stored:
            self._push(e)
            if self.n_errors >= self.params.min_errors and self.p + self.s < self.ps_min:
                self.p_min, self.s_min, self.ps_min = self.p, self.s, self.p + self.s

    def step(self, correct: bool) -> Signal:
        err = 0 if correct else 1
        prm = self.params
        if prm.pruning:
            self.stored.append(err)
            if len(self.stored) >= prm.max_instances and self.warn_count == 0:
                self._rebuild()
        self._push(err)
        if self.n_errors < prm.min_errors:
            return Signal.STABLE
        ps = self.p + self.s
        if ps < self.ps_min:
            self.p_min, self.s_min, self.ps_min = self.p, self.s, ps
        if ps > self.ps_min * prm.drift_factor:
            self.reset()
            return Signal.DRIFT
        if ps > self.ps_min * prm.warning_factor:
            self.warn_count += 1
            if self.warn_count >= prm.warning_limit:
                self.reset()
                return Signal.DRIFT
            return Signal.WARNING
        self.warn_count = 0
        return Signal.STABLE


# --- WSTD ------------------------------------------------------------------

@dataclass(frozen=True)
class WstdParams:
    window: int = 50
    alpha_w: float = 0.05
    alpha_d: float = 0.003
    max_old: int = 4000

    def __post_init__(self) -> None:
        if not 0 < self.alpha_d < self.alpha_w < 1:
            raise ValueError("WSTD needs 0 < alpha_d < alpha_w < 1")
        if self.window < 2 or self.max_old < self.window:
            raise ValueError("WSTD needs window >= 2 and max_old >= window")


def binary_rank_sum_pvalue(old_ones: int, n_old: int, new_ones: int, n_new: int) -> float:
    """Two-sided rank-sum p-value for two 0/1 samples (normal approximation, tie-corrected).

    With only two distinct values the average ranks are closed-form, so the
    test costs O(1).  A pooled sample with a single value is all ties: p = 1.
    """
    N = n_old + n_new
    ones = old_ones + new_ones
    zeros = N - ones
    if ones == 0 or zeros == 0 or n_old == 0 or n_new == 0:
        return 1.0
    rank0 = (zeros + 1) / 2.0
    rank1 = zeros + (ones + 1) / 2.0
    w = (n_new - new_ones) * rank0 + new_ones * rank1
    mean = n_new * (N + 1) / 2.0
    tie = (zeros**3 - zeros) + (ones**3 - ones)
    var = n_old * n_new / 12.0 * ((N + 1) - tie / (N * (N - 1)))
    if var <= 0:
        return 1.0
    zstat = (w - mean) / math.sqrt(var)
    return math.erfc(abs(zstat) / math.sqrt(2.0))


class WSTD(BaseDetector):
    """Rank-sum comparison of a recent window of outcomes against older ones.

    Only a drop in accuracy of the recent window counts as a change.
    """

    name = "WSTD"

    def __init__(self, params: WstdParams | None = None):
        self.params = params or WstdParams()
        self.reset()

    def reset(self) -> None:
        self.recent: deque[int] = deque()
        self.old: deque[int] = deque()
        self.recent_ones = 0
        self.old_ones = 0

    def step(self, correct: bool) -> Signal:
        c = 1 if correct else 0
        prm = self.params
        self.recent.append(c)
        self.recent_ones += c
        if len(self.recent) > prm.window:
            moved = self.recent.popleft()
            self.recent_ones -= moved
            self.old.append(moved)
            self.old_ones += moved
            if len(self.old) > prm.max_old:
                self.old_ones -= self.old.popleft()
        n_old, n_new = len(self.old), len(self.recent)
        if n_old < prm.window or n_new < prm.window:
            return Signal.STABLE
        if self.recent_ones * n_old >= self.old_ones * n_new:
            return Signal.STABLE
        p = binary_rank_sum_pvalue(self.old_ones, n_old, self.recent_ones, n_new)
        if p < prm.alpha_d:
            self.reset()
            return Signal.DRIFT
        if p < prm.alpha_w:
            return Signal.WARNING
        return Signal.STABLE


BASELINES = {"EDDM": EDDM, "ECDD": ECDD, "FHDDM": FHDDM, "RDDM": RDDM, "WSTD": WSTD}

PARAM_TYPES = {
    "EDDM": EddmParams,
    "ECDD": EcddParams,
    "FHDDM": FhddmParams,
    "RDDM": RddmParams,
    "WSTD": WstdParams,
}


def make_baseline(name: str, **overrides) -> BaseDetector:
    if name not in BASELINES:
        raise ValueError(f"unknown baseline detector {name!r}")
    return BASELINES[name](PARAM_TYPES[name](**overrides))
