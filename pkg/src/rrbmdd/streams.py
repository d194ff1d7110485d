"""Synthetic drifting data streams and CSV ingestion.

Streams are produced chunk by chunk; every chunk draws from its own generator
seeded by ``(seed, chunk_index)``, so the sequence is reproducible and does not
depend on how it is consumed.  Concept construction uses separate seeds.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

CHUNK = 10_000


# --- drift schedules -------------------------------------------------------

@dataclass(frozen=True)
class DriftSchedule:
    """Transition from one concept to the next between instance indices t1 and t2.

    ``sudden`` switches at t1 (t2 is ignored); ``gradual`` draws from the new
    concept with probability alpha_j; ``incremental`` moves the concept
    parameters themselves by alpha_j when the generator allows it and falls back
    to probabilistic mixing otherwise.
    """

    kind: str
    t1: int
    t2: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("sudden", "gradual", "incremental", "none"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if self.kind in ("gradual", "incremental") and (self.t2 is None or self.t2 <= self.t1):
            raise ValueError("gradual and incremental drifts need t1 < t2")

    def alpha(self, j) -> np.ndarray:
        j = np.asarray(j, dtype=float)
        if self.kind == "none":
            return np.zeros_like(j)
        if self.kind == "sudden":
            return (j >= self.t1).astype(float)
        return np.clip((j - self.t1) / (self.t2 - self.t1), 0.0, 1.0)


# --- concepts --------------------------------------------------------------

class Concept:
    n_features: int
    n_classes: int
    interpolates = False

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


def _flip_noise(y: np.ndarray, n_classes: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    if rate <= 0:
        return y
    hit = rng.random(y.size) < rate
    shift = rng.integers(1, n_classes, size=y.size)
    return np.where(hit, (y + shift) % n_classes, y)


class HyperplaneConcept(Concept):
    """y = [sum w_i x_i >= sum w_i / 2] on x ~ U[0,1]^d, with label noise."""

    interpolates = True

    def __init__(self, n_features: int, rng: np.random.Generator, noise: float = 0.05):
        self.n_features = n_features
        self.n_classes = 2
        self.noise = noise
        self.w = rng.random(n_features)

    def _label(self, X: np.ndarray, w: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        y = ((X * w).sum(axis=1) >= 0.5 * w.sum(axis=-1)).astype(np.int64)
        return _flip_noise(y, 2, self.noise, rng)

    def sample(self, n, rng):
        X = rng.random((n, self.n_features))
        return X, self._label(X, self.w, rng)

    def sample_between(self, other: HyperplaneConcept, alpha: np.ndarray, rng):
        X = rng.random((alpha.size, self.n_features))
        w = (1.0 - alpha[:, None]) * self.w + alpha[:, None] * other.w
        return X, self._label(X, w, rng)


_LED_SEGMENTS = np.array(
    [
        [1, 1, 1, 0, 1, 1, 1],
        [0, 0, 1, 0, 0, 1, 0],
        [1, 0, 1, 1, 1, 0, 1],
        [1, 0, 1, 1, 0, 1, 1],
        [0, 1, 1, 1, 0, 1, 0],
        [1, 1, 0, 1, 0, 1, 1],
        [1, 1, 0, 1, 1, 1, 1],
        [1, 0, 1, 0, 0, 1, 0],
        [1, 1, 1, 1, 1, 1, 1],
        [1, 1, 1, 1, 0, 1, 1],
    ],
    dtype=float,
)


class LedConcept(Concept):
    """Seven-segment digit display with 17 irrelevant bits and per-bit noise.

    A concept is a placement of the seven relevant segments among the 24
    attribute positions; drift moves segments onto other positions.
    """

    def __init__(self, rng: np.random.Generator | None = None, noise: float = 0.10, n_drifted: int = 0):
        self.n_features = 24
        self.n_classes = 10
        self.noise = noise
        self.positions = np.arange(7)
        if n_drifted and rng is not None:
            # move the first n_drifted segments onto randomly chosen irrelevant slots
            slots = rng.choice(np.arange(7, 24), size=n_drifted, replace=False)
            self.positions = self.positions.copy()
            self.positions[rng.permutation(7)[:n_drifted]] = slots

    def sample(self, n, rng):
        y = rng.integers(0, 10, size=n)
        X = (rng.random((n, 24)) < 0.5).astype(float)
        X[:, self.positions] = _LED_SEGMENTS[y]
        flip = rng.random((n, 24)) < self.noise
        X[flip] = 1.0 - X[flip]
        return X, y.astype(np.int64)


class RbfConcept(Concept):
    """Gaussian-like clusters around random centroids, each owning a class."""

    def __init__(self, n_features: int, n_classes: int, rng: np.random.Generator, n_centroids: int = 50):
        self.n_features = n_features
        self.n_classes = n_classes
        self.centers = rng.random((n_centroids, n_features))
        self.labels = rng.integers(0, n_classes, size=n_centroids)
        self.labels[:n_classes] = rng.permutation(n_classes)  # every class owns a centroid
        self.std = rng.random(n_centroids)
        w = rng.random(n_centroids)
        self.weights = w / w.sum()

    def sample(self, n, rng):
        k = rng.choice(self.centers.shape[0], size=n, p=self.weights)
        direction = rng.standard_normal((n, self.n_features))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = rng.standard_normal(n) * self.std[k]
        return self.centers[k] + direction * radius[:, None], self.labels[k].astype(np.int64)


SEA_THRESHOLDS = (8.0, 9.0, 7.0, 9.5)


class SeaConcept(Concept):
    """x ~ U[0,10]^3; the class is the band of x0 + x1 cut at theta - 4, theta, theta + 4."""

    def __init__(self, theta: float, noise: float = 0.10):
        self.n_features = 3
        self.n_classes = 4
        self.theta = theta
        self.noise = noise
        self.cuts = np.array([theta - 4.0, theta, theta + 4.0])

    def sample(self, n, rng):
        X = rng.random((n, 3)) * 10.0
        y = np.searchsorted(self.cuts, X[:, 0] + X[:, 1], side="right").astype(np.int64)
        return X, _flip_noise(y, 4, self.noise, rng)


class RandomTreeConcept(Concept):
    """Random axis-aligned decision tree over U[0,1] features with random leaf classes."""

    def __init__(self, n_features: int, n_classes: int, rng: np.random.Generator,
                 max_depth: int = 5, first_leaf_level: int = 3, leaf_fraction: float = 0.15):
        self.n_features = n_features
        self.n_classes = n_classes
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.leaf_class: list[int] = []
        self._grow(rng, 0, np.zeros(n_features), np.ones(n_features), max_depth, first_leaf_level, leaf_fraction)
        self.feature_arr = np.array(self.feature)
        self.threshold_arr = np.array(self.threshold)
        self.left_arr = np.array(self.left)
        self.right_arr = np.array(self.right)
        self.class_arr = np.array(self.leaf_class)

    def _new(self) -> int:
        for lst, val in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1), (self.leaf_class, 0)):
            lst.append(val)
        return len(self.feature) - 1

    def _grow(self, rng, depth, lo, hi, max_depth, first_leaf, leaf_frac) -> int:
        node = self._new()
        if depth >= max_depth or (depth >= first_leaf and rng.random() < leaf_frac):
            self.leaf_class[node] = int(rng.integers(0, self.n_classes))
            return node
        f = int(rng.integers(0, self.n_features))
        thr = float(lo[f] + rng.random() * (hi[f] - lo[f]))
        self.feature[node] = f
        self.threshold[node] = thr
        hi_left = hi.copy()
        hi_left[f] = thr
        lo_right = lo.copy()
        lo_right[f] = thr
        self.left[node] = self._grow(rng, depth + 1, lo, hi_left, max_depth, first_leaf, leaf_frac)
        self.right[node] = self._grow(rng, depth + 1, lo_right, hi, max_depth, first_leaf, leaf_frac)
        return node

    def classify(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature_arr[node]
            inner = f >= 0
            if not inner.any():
                break
            go_left = X[rows, np.where(inner, f, 0)] <= self.threshold_arr[node]
            node = np.where(inner, np.where(go_left, self.left_arr[node], self.right_arr[node]), node)
        return self.class_arr[node].astype(np.int64)

    def sample(self, n, rng):
        X = rng.random((n, self.n_features))
        return X, self.classify(X)


# --- stream descriptions ---------------------------------------------------

@dataclass(frozen=True)
class StreamSpec:
    name: str
    generator: str
    length: int
    n_features: int
    n_classes: int
    drifts: tuple[DriftSchedule, ...] = ()
    seed: int = 0
    params: dict = field(default_factory=dict, hash=False, compare=True)

    def with_seed(self, seed: int) -> StreamSpec:
        return StreamSpec(self.name, self.generator, self.length, self.n_features,
                          self.n_classes, self.drifts, seed, dict(self.params))


BENCHMARKS = {
    # name: generator, full length, features, classes, drift kind
    "HYP_I": ("hyperplane", 1_000_000, 10, 2, "incremental"),
    "LED_S": ("led", 1_000_000, 24, 10, "sudden"),
    "RBF_G": ("rbf", 1_000_000, 40, 20, "gradual"),
    "RBF_S": ("rbf", 1_000_000, 20, 10, "sudden"),
    "SEA_G": ("sea", 3_000_000, 3, 4, "gradual"),
    "TRE_S": ("randomtree", 2_000_000, 10, 6, "sudden"),
}


def make_benchmark(name: str, length_scale: float = 1.0, seed: int = 0, drift_kind: str | None = None,
                   transition: float = 0.1) -> StreamSpec:
    """One of the six synthetic benchmarks with a single change centred on the midpoint.

    Gradual and incremental transitions span ``transition`` of the stream.
    ``drift_kind`` overrides the benchmark's own kind.
    """
    if name not in BENCHMARKS:
        raise ValueError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARKS)}")
    if not 0 < length_scale <= 1:
        raise ValueError("length_scale must lie in (0, 1]")
    gen, full, d, z, kind = BENCHMARKS[name]
    kind = drift_kind or kind
    length = math.ceil(length_scale * full)
    mid = length // 2
    if kind == "sudden":
        drift = DriftSchedule("sudden", mid)
    elif kind == "none":
        drift = DriftSchedule("none", mid)
    else:
        half = max(1, int(transition * length) // 2)
        drift = DriftSchedule(kind, mid - half, mid + half)
    return StreamSpec(name, gen, length, d, z, (drift,), seed)


def _concept_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7919, index])


def build_concepts(spec: StreamSpec) -> list[Concept]:
    """Concept 0 plus one new concept per drift schedule."""
    p = spec.params
    out: list[Concept] = []
    for i in range(len(spec.drifts) + 1):
        rng = _concept_rng(spec.seed, i)
        if spec.generator == "hyperplane":
            out.append(HyperplaneConcept(spec.n_features, rng, p.get("noise", 0.05)))
        elif spec.generator == "led":
            out.append(LedConcept(rng, p.get("noise", 0.10),
                                  n_drifted=p.get("base_drifted", 0) if i == 0 else p.get("n_drifted", 7)))
        elif spec.generator == "rbf":
            out.append(RbfConcept(spec.n_features, spec.n_classes, rng, p.get("n_centroids", 50)))
        elif spec.generator == "sea":
            order = p.get("thresholds", (SEA_THRESHOLDS[0], SEA_THRESHOLDS[3], SEA_THRESHOLDS[2], SEA_THRESHOLDS[1]))
            out.append(SeaConcept(order[i % len(order)], p.get("noise", 0.10)))
        elif spec.generator == "randomtree":
            out.append(RandomTreeConcept(spec.n_features, spec.n_classes, rng, p.get("max_depth", 5)))
        else:
            raise ValueError(f"unknown generator {spec.generator!r}")
        if out[-1].n_features != spec.n_features or out[-1].n_classes != spec.n_classes:
            raise ValueError(f"{spec.generator} concept does not match {spec.n_features} features/{spec.n_classes} classes")
    return out


def concept_assignment(spec: StreamSpec, j: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """For instance indices ``j`` and uniforms ``u``: (source concept, alpha, drawn-from-next flag).

    Every instance sits between concept ``src`` and ``src + 1`` with weight
    alpha; the flag says whether a mixing draw picked the newer concept.
    """
    j = np.asarray(j)
    src = np.zeros(j.size, dtype=np.int64)
    alpha = np.zeros(j.size)
    kinds = np.full(j.size, "none", dtype=object)
    for i, d in enumerate(spec.drifts):
        if d.kind == "none":
            continue
        a = d.alpha(j)
        active = (a > 0) | (j >= d.t1)
        src[active] = i
        alpha[active] = a[active]
        kinds[active] = d.kind
    to_new = np.where(kinds == "sudden", alpha >= 1.0, u < alpha)
    return src, alpha, to_new


def _chunk(spec: StreamSpec, concepts: list[Concept], start: int, stop: int, rng: np.random.Generator):
    n = stop - start
    X = np.empty((n, spec.n_features))
    y = np.empty(n, dtype=np.int64)
    src, alpha, to_new = concept_assignment(spec, np.arange(start, stop), rng.random(n))
    for i in np.unique(src):
        rows = np.flatnonzero(src == i)
        if i + 1 >= len(concepts):
            X[rows], y[rows] = concepts[i].sample(rows.size, rng)
            continue
        if spec.drifts[i].kind == "incremental" and concepts[i].interpolates:
            X[rows], y[rows] = concepts[i].sample_between(concepts[i + 1], alpha[rows], rng)
            continue
        for c, sel in ((i, rows[~to_new[rows]]), (i + 1, rows[to_new[rows]])):
            if sel.size:
                X[sel], y[sel] = concepts[c].sample(sel.size, rng)
    return X, y


def iter_chunks(spec: StreamSpec, chunk: int = CHUNK) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    concepts = build_concepts(spec)
    for ci, start in enumerate(range(0, spec.length, chunk)):
        rng = np.random.default_rng([spec.seed, ci])
        yield _chunk(spec, concepts, start, min(start + chunk, spec.length), rng)


def generate(spec: StreamSpec) -> tuple[np.ndarray, np.ndarray]:
    """The whole stream as (X, y) arrays."""
    parts = list(iter_chunks(spec))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# --- instance-level view ---------------------------------------------------

@dataclass
class Instance:
    x: np.ndarray
    y: int | None
    index: int
    poisoned: bool = False
    label_visible: bool = True


class StreamSource:
    """Pull-based instance iterator; ``next_instance`` returns None at the end."""

    def __init__(self, spec: StreamSpec):
        self._chunks = iter_chunks(spec)
        self._X = np.empty((0, spec.n_features))
        self._y = np.empty(0, dtype=np.int64)
        self._pos = 0
        self._index = 0

    def next_instance(self) -> Instance | None:
        if self._pos >= len(self._y):
            try:
                self._X, self._y = next(self._chunks)
            except StopIteration:
                return None
            self._pos = 0
        inst = Instance(self._X[self._pos], int(self._y[self._pos]), self._index)
        self._pos += 1
        self._index += 1
        return inst

    def __iter__(self):
        while (inst := self.next_instance()) is not None:
            yield inst


# --- CSV -------------------------------------------------------------------

@dataclass
class CsvStream:
    X: np.ndarray
    y: np.ndarray
    classes: list[str]
    feature_names: list[str]
    skipped: int

    @property
    def n_classes(self) -> int:
        return len(self.classes)


def ingest_csv(path: str | Path, label_column: str, max_malformed: int = 100) -> CsvStream:
    """Read a headed CSV; labels map to 0..Z-1 in order of first appearance.

    Rows with a wrong field count or a non-numeric feature are skipped; more
    than ``max_malformed`` of them aborts the read.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file, header row expected") from None
        if label_column not in header:
            raise ValueError(f"{path}: label column {label_column!r} not found in header {header}")
        li = header.index(label_column)
        feats = [h for i, h in enumerate(header) if i != li]
        rows, labels, classes = [], [], {}
        skipped = 0
        for rec in reader:
            if not rec or all(not f.strip() for f in rec):
                continue
            try:
                if len(rec) != len(header):
                    raise ValueError("field count")
                x = [float(f) for i, f in enumerate(rec) if i != li]
                if not all(math.isfinite(v) for v in x):
                    raise ValueError("non-finite")
            except ValueError:
                skipped += 1
                if skipped > max_malformed:
                    raise ValueError(f"{path}: more than {max_malformed} malformed rows") from None
                continue
            lab = rec[li].strip()
            rows.append(x)
            labels.append(classes.setdefault(lab, len(classes)))
    X = np.array(rows, dtype=float).reshape(len(rows), len(feats))
    return CsvStream(X, np.array(labels, dtype=np.int64), list(classes), feats, skipped)


def export_csv(X: np.ndarray, y: np.ndarray, path: str | Path, label_column: str = "class") -> None:
    X = np.atleast_2d(X)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(X.shape[1])] + [label_column])
        for row, lab in zip(X.tolist(), np.asarray(y).tolist()):
            w.writerow([repr(v) for v in row] + [lab])
