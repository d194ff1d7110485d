"""Prequential test-then-train evaluation, RLR metrics and the experiment matrix."""

from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .attacks import (
    CONCEPT_COUNTS,
    INSTANCE_RATIOS,
    AttackPlan,
    LabeledStream,
    apply_attack,
    sparsify_labels,
)
from .baselines import BASELINES, BaseDetector, make_baseline
from .detector import DetectorConfig, RbmDriftDetector, Signal
from .learner import AdaptiveLearner, TreeParams
from .robust import RobustConfig
from .streams import BENCHMARKS, StreamSpec, generate, make_benchmark

RBM_VARIANTS = ("RBM-DD", "RBM-DD_RG", "RBM-DD_RE", "RRBM-DD")
ALL_DETECTORS = tuple(BASELINES) + ("RRBM-DD",)
DEFAULT_LEVELS = {"instance_based": INSTANCE_RATIOS, "concept_based": CONCEPT_COUNTS}

RUN_COLUMNS = (
    "stream", "detector", "attack_kind", "attack_level", "budget", "repeat", "n_instances",
    "M", "detections", "warnings", "false_alarms", "delay", "poisoned",
)
RLR_COLUMNS = ("stream", "detector", "attack_kind", "budget", "repeat", "M0", "levels", "rlr_levels", "rlr")


# --- metrics ---------------------------------------------------------------

def rlr_level(M0: float, Ml: float) -> float:
    """(M0 - Ml) / M0; negative when the attacked run scores higher."""
    if not M0 > 0:
        raise ValueError("M0 must be positive")
    return (M0 - Ml) / M0


def rlr_aggregate(rlr_levels, weights=None, mode: str = "weighted_mean") -> float:
    """Weighted mean of the per-level values, or the strict sum(w * RLR_l) / #L form."""
    r = np.asarray(rlr_levels, dtype=float)
    if r.size == 0:
        raise ValueError("no attack levels given")
    w = np.full(r.size, 1.0 / r.size) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != r.shape:
        raise ValueError("weights and levels differ in length")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError("weights must be non-negative and sum to 1")
    total = float(w @ r)
    if mode == "weighted_mean":
        return total
    if mode == "strict":
        return total / r.size
    raise ValueError(f"unknown aggregation mode {mode!r}")


# --- single run ------------------------------------------------------------

@dataclass
class EvalReport:
    window_accuracy: list[tuple[int, float, int]]  # (window index, accuracy, denominator)
    detections: list[tuple[int, int, Signal]]  # (batch index, first instance index, level)
    M: float
    n_instances: int
    false_alarms: int = 0
    delay: float = math.nan
    meta: dict = field(default_factory=dict)

    @property
    def n_drifts(self) -> int:
        return sum(1 for d in self.detections if d[2] == Signal.DRIFT)

    @property
    def n_warnings(self) -> int:
        return sum(1 for d in self.detections if d[2] == Signal.WARNING)


def make_detector(name: str, n_features: int, n_classes: int, seed: int = 0,
                  config: DetectorConfig | None = None, **overrides):
    if name in RBM_VARIANTS:
        return RbmDriftDetector(n_features, n_classes, RobustConfig.for_variant(name, **overrides), config, seed)
    if name in BASELINES:
        return make_baseline(name, **overrides)
    raise ValueError(f"unknown detector {name!r}")


def prequential_run(
    stream: LabeledStream,
    learner,
    detector,
    batch_size: int = 50,
    window: int = 1000,
) -> EvalReport:
    """Test-then-train over mini-batches.

    Every instance is predicted and scored against its observed label, hidden
    or not; the detector then sees the batch (RBM detectors) or the correctness
    of the labelled instances (error-rate detectors); the learner applies the
    signal and finally learns the labelled instances.
    """
    n = len(stream)
    if n == 0:
        raise ValueError("empty stream")
    y_vis = stream.visible_labels
    correct_all = np.zeros(n, dtype=bool)
    detections: list[tuple[int, int, Signal]] = []
    is_rbm = isinstance(detector, RbmDriftDetector)
    for b, s in enumerate(range(0, n, batch_size)):
        e = min(s + batch_size, n)
        Xb, yb = stream.X[s:e], y_vis[s:e]
        pred = learner.predict(Xb)
        correct = pred == stream.y[s:e]
        correct_all[s:e] = correct
        if is_rbm:
            level = detector.process_batch(Xb, yb).level
        elif detector is None:
            level = Signal.STABLE
        else:
            level = detector.update(correct[yb >= 0])
        if level != Signal.STABLE:
            detections.append((b, s, Signal(level)))
        learner.drift_protocol(Signal(level))
        learner.learn(Xb, yb)
    windows = []
    for k, s in enumerate(range(0, n, window)):
        c = correct_all[s : s + window]
        windows.append((k, float(c.mean()), int(c.size)))
    full = [a for _, a, d in windows if d == window]
    M = float(np.mean(full)) if full else windows[-1][1]
    return EvalReport(windows, detections, M, n)


def detection_stats(report: EvalReport, changes: list[tuple[int, int]], horizon: int) -> tuple[int, float]:
    """False alarms (drift outside every [t1, t2 + horizon]) and delay to the first drift after t1."""
    drifts = [s for _, s, lvl in report.detections if lvl == Signal.DRIFT]
    fa = sum(1 for s in drifts if not any(t1 <= s <= t2 + horizon for t1, t2 in changes))
    delay = math.nan
    if changes:
        t1 = changes[0][0]
        after = [s - t1 for s in drifts if s >= t1]
        if after:
            delay = float(min(after))
    return fa, delay


# --- experiment matrix -----------------------------------------------------

def derive_seed(master: int, *coords) -> int:
    """Stable 63-bit seed from the master seed and run coordinates."""
    h = hashlib.sha256(repr((int(master),) + tuple(str(c) for c in coords)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


@dataclass
class ExperimentConfig:
    streams: list[str] = field(default_factory=lambda: list(BENCHMARKS))
    detectors: list[str] = field(default_factory=lambda: list(ALL_DETECTORS))
    attacks: dict[str, list[float]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_LEVELS.items()})
    budgets: list[float] = field(default_factory=lambda: [1.0])
    repeats: int = 1
    master_seed: int = 0
    length_scale: float = 0.1
    batch_size: int = 50
    window: int = 1000
    horizon: int = 2500
    rlr_mode: str = "weighted_mean"
    rlr_weights: list[float] | None = None
    concept_size: int = 250
    drift_kind: str | None = None

    def validate(self) -> None:
        for s in self.streams:
            if s not in BENCHMARKS:
                raise ValueError(f"streams: unknown benchmark {s!r}")
        for d in self.detectors:
            if d not in BASELINES and d not in RBM_VARIANTS:
                raise ValueError(f"detectors: unknown detector {d!r}")
        for k, levels in self.attacks.items():
            if k not in DEFAULT_LEVELS:
                raise ValueError(f"attacks: unknown attack kind {k!r}")
            if not levels:
                raise ValueError(f"attacks.{k}: at least one level is required")
            for lv in levels:
                try:
                    AttackPlan(k, lv)
                except ValueError as exc:
                    raise ValueError(f"attacks.{k}: {exc}") from None
            if self.rlr_weights is not None and len(self.rlr_weights) != len(levels):
                raise ValueError(f"rlr_weights: expected {len(levels)} weights for {k}")
        for b in self.budgets:
            if not 0 < b <= 1:
                raise ValueError(f"budgets: {b} is outside (0, 1]")
        if self.repeats < 1:
            raise ValueError("repeats: must be >= 1")
        if not 0 < self.length_scale <= 1:
            raise ValueError("length_scale: must lie in (0, 1]")
        if self.batch_size < 1 or self.window < 1:
            raise ValueError("batch_size and window must be >= 1")
        if self.rlr_mode not in ("weighted_mean", "strict"):
            raise ValueError(f"rlr_mode: unknown mode {self.rlr_mode!r}")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class RunKey:
    stream: str
    detector: str
    attack_kind: str
    attack_level: float
    budget: float
    repeat: int


@dataclass
class RunResult:
    key: RunKey
    report: EvalReport
    poisoned: int
    wall_clock: float

    def row(self) -> dict:
        k, r = self.key, self.report
        return {
            "stream": k.stream, "detector": k.detector, "attack_kind": k.attack_kind,
            "attack_level": k.attack_level, "budget": k.budget, "repeat": k.repeat,
            "n_instances": r.n_instances, "M": r.M, "detections": r.n_drifts, "warnings": r.n_warnings,
            "false_alarms": r.false_alarms, "delay": r.delay, "poisoned": self.poisoned,
        }


def stream_spec(cfg: ExperimentConfig, name: str, repeat: int) -> StreamSpec:
    seed = derive_seed(cfg.master_seed, "stream", name, repeat)
    return make_benchmark(name, cfg.length_scale, seed=seed, drift_kind=cfg.drift_kind)


def plan_runs(cfg: ExperimentConfig) -> list[RunKey]:
    """One clean run per (stream, detector, budget, repeat) plus one per attack level."""
    keys = []
    for s in cfg.streams:
        for rep in range(cfg.repeats):
            for b in cfg.budgets:
                for d in cfg.detectors:
                    keys.append(RunKey(s, d, "none", 0.0, b, rep))
                    for kind, levels in cfg.attacks.items():
                        for lv in levels:
                            keys.append(RunKey(s, d, kind, float(lv), b, rep))
    return keys


def build_stream(cfg: ExperimentConfig, key: RunKey) -> tuple[LabeledStream, StreamSpec]:
    spec = stream_spec(cfg, key.stream, key.repeat)
    X, y = generate(spec)
    stream = LabeledStream.from_arrays(X, y, spec.n_classes)
    if key.attack_kind != "none":
        plan = AttackPlan(key.attack_kind, key.attack_level, cfg.concept_size,
                          derive_seed(cfg.master_seed, "attack", key.stream, key.attack_kind, key.attack_level, key.repeat))
        stream = apply_attack(stream, plan, spec)
    if key.budget < 1:
        stream = sparsify_labels(stream, key.budget, derive_seed(cfg.master_seed, "budget", key.stream, key.budget, key.repeat))
    return stream, spec


def true_changes(spec: StreamSpec, stream: LabeledStream) -> list[tuple[int, int]]:
    """Generator change windows mapped to positions in the (possibly lengthened) attacked stream."""
    src = stream.source_index
    out = []
    for d in spec.drifts:
        if d.kind == "none":
            continue
        t2 = d.t2 if d.t2 is not None else d.t1
        out.append((int(np.searchsorted(src, d.t1)), int(np.searchsorted(src, t2))))
    return out


def execute_run(cfg: ExperimentConfig, key: RunKey) -> RunResult:
    t0 = time.perf_counter()
    stream, spec = build_stream(cfg, key)
    det_seed = derive_seed(cfg.master_seed, "detector", key.stream, key.detector, key.budget, key.repeat)
    detector = make_detector(key.detector, spec.n_features, spec.n_classes, det_seed)
    learner = AdaptiveLearner(spec.n_features, spec.n_classes, TreeParams(), stable_timeout=cfg.window)
    report = prequential_run(stream, learner, detector, cfg.batch_size, cfg.window)
    report.false_alarms, report.delay = detection_stats(report, true_changes(spec, stream), cfg.horizon)
    return RunResult(key, report, int(stream.poisoned.sum()), time.perf_counter() - t0)


def _execute(args):
    return execute_run(*args)


def run_matrix(cfg: ExperimentConfig, jobs: int = 1, progress=None) -> list[RunResult]:
    cfg.validate()
    keys = plan_runs(cfg)
    results = []
    if jobs <= 1:
        for i, k in enumerate(keys):
            results.append(execute_run(cfg, k))
            if progress:
                progress(i + 1, len(keys), results[-1])
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for i, res in enumerate(pool.map(_execute, [(cfg, k) for k in keys])):
                results.append(res)
                if progress:
                    progress(i + 1, len(keys), res)
    return sorted(results, key=lambda r: _sort_key(r.key))


def _sort_key(k: RunKey):
    return (k.stream, k.detector, k.attack_kind, k.attack_level, k.budget, k.repeat)


@dataclass
class RlrCell:
    stream: str
    detector: str
    attack_kind: str
    budget: float
    repeat: int
    M0: float
    levels: list[float]
    rlr_levels: list[float]
    rlr: float

    def row(self) -> dict:
        return {
            "stream": self.stream, "detector": self.detector, "attack_kind": self.attack_kind,
            "budget": self.budget, "repeat": self.repeat, "M0": self.M0,
            "levels": ";".join(repr(v) for v in self.levels),
            "rlr_levels": ";".join(repr(v) for v in self.rlr_levels), "rlr": self.rlr,
        }


def rlr_cells(results: list[RunResult], cfg: ExperimentConfig) -> list[RlrCell]:
    by_key = {r.key: r for r in results}
    cells = []
    for k in sorted(by_key, key=_sort_key):
        if k.attack_kind != "none":
            continue
        M0 = by_key[k].report.M
        for kind, levels in cfg.attacks.items():
            Ml = [by_key[replace(k, attack_kind=kind, attack_level=float(lv))].report.M for lv in levels]
            rl = [rlr_level(M0, m) for m in Ml]
            cells.append(RlrCell(k.stream, k.detector, kind, k.budget, k.repeat, M0, [float(v) for v in levels],
                                 rl, rlr_aggregate(rl, cfg.rlr_weights, cfg.rlr_mode)))
    return sorted(cells, key=lambda c: (c.stream, c.detector, c.attack_kind, c.budget, c.repeat))


def rank_table(cells: list[RlrCell]) -> dict[str, dict[str, float]]:
    """Mean rank per detector for each attack kind; rank 1 is the smallest loss, ties share the average rank."""
    out: dict[str, dict[str, list[float]]] = {}
    groups: dict[tuple, list[RlrCell]] = {}
    for c in cells:
        groups.setdefault((c.attack_kind, c.stream, c.budget, c.repeat), []).append(c)
    for (kind, *_), grp in sorted(groups.items()):
        ranks = rankdata([c.rlr for c in grp], method="average")
        for c, r in zip(grp, ranks):
            out.setdefault(kind, {}).setdefault(c.detector, []).append(float(r))
    return {kind: {d: float(np.mean(v)) for d, v in sorted(dets.items())} for kind, dets in sorted(out.items())}


# --- CSV output ------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def csv_text(columns, rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    return buf.getvalue()


def atomic_write(path: str | Path, text: str) -> None:
    """Write via a temporary file in the same directory and rename into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_results(results: list[RunResult], cells: list[RlrCell], out_dir: str | Path) -> None:
    out = Path(out_dir)
    atomic_write(out / "runs.csv", csv_text(RUN_COLUMNS, [r.row() for r in results]))
    atomic_write(out / "rlr.csv", csv_text(RLR_COLUMNS, [c.row() for c in cells]))
    meta = [{**{f: getattr(r.key, f) for f in ("stream", "detector", "attack_kind", "attack_level", "budget", "repeat")},
             "wall_clock": r.wall_clock} for r in results]
    atomic_write(out / "runs_meta.csv", csv_text(
        ("stream", "detector", "attack_kind", "attack_level", "budget", "repeat", "wall_clock"), meta))


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
