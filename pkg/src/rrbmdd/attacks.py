"""Poisoning attacks and label budgets as transformers over materialised streams.

A ``LabeledStream`` carries, per instance, the observed label, the label the
generator produced, whether the label is visible to the learner, and which
modification (if any) an attacker made.  The modification codes are for
bookkeeping only; learners and detectors never see them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .streams import StreamSpec, generate

CLEAN, FLIPPED, INJECTED = 0, 1, 2
KIND_NAMES = {FLIPPED: "label_flip", INJECTED: "injected_concept"}

INSTANCE_RATIOS = (0.05, 0.10, 0.15, 0.20, 0.25)
CONCEPT_COUNTS = (10, 30, 50, 70, 100)
LABEL_BUDGETS = (0.05, 0.10, 0.15, 0.20, 0.25, 0.30)


@dataclass(frozen=True)
class LabeledStream:
    X: np.ndarray
    y: np.ndarray  # observed label (possibly flipped)
    y_clean: np.ndarray  # label before any flip
    labeled: np.ndarray  # label visible to learner and detector
    attack: np.ndarray  # CLEAN / FLIPPED / INJECTED per instance
    n_classes: int
    source_index: np.ndarray  # position in the generated stream; injected rows sit half a step before their successor

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def poisoned(self) -> np.ndarray:
        return self.attack != CLEAN

    @property
    def visible_labels(self) -> np.ndarray:
        """Labels as the learner sees them: -1 where hidden."""
        return np.where(self.labeled, self.y, -1)

    @classmethod
    def from_arrays(cls, X: np.ndarray, y: np.ndarray, n_classes: int) -> LabeledStream:
        y = np.asarray(y, dtype=np.int64)
        n = y.shape[0]
        return cls(np.asarray(X, dtype=float), y, y.copy(), np.ones(n, dtype=bool),
                   np.zeros(n, dtype=np.int8), n_classes, np.arange(n, dtype=float))


@dataclass(frozen=True)
class AttackPlan:
    kind: str = "none"  # instance_based | concept_based | none
    level: float = 0.0  # flip ratio, or number of injected concepts
    concept_size: int = 250
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("instance_based", "concept_based", "none"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.kind == "instance_based" and not 0 <= self.level <= 1:
            raise ValueError("instance_based level is a ratio in [0, 1]")
        if self.kind == "concept_based" and (self.level < 0 or self.level != int(self.level)):
            raise ValueError("concept_based level is a non-negative concept count")


def flip_labels(stream: LabeledStream, ratio: float, seed: int) -> LabeledStream:
    """Each instance independently gets a different, uniformly chosen label with probability ``ratio``."""
    if stream.n_classes < 2:
        raise ValueError("label flipping needs at least two classes")
    if not 0 <= ratio <= 1:
        raise ValueError("ratio must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(stream)
    hit = rng.random(n) < ratio
    shift = rng.integers(1, stream.n_classes, size=n)
    y = np.where(hit, (stream.y + shift) % stream.n_classes, stream.y)
    attack = np.where(hit, FLIPPED, stream.attack).astype(np.int8)
    return replace(stream, y=y, attack=attack)


def adversarial_spec(spec: StreamSpec, seed: int) -> StreamSpec:
    """A drift-free spec of the same generator family describing a different concept."""
    rng = np.random.default_rng([seed, 31337])
    params = dict(spec.params)
    if spec.generator == "sea":
        params["thresholds"] = (float(rng.uniform(5.0, 12.0)),)
    elif spec.generator == "led":
        params["base_drifted"] = 7
    return StreamSpec(f"{spec.name}-adv", spec.generator, 0, spec.n_features, spec.n_classes, (),
                      int(rng.integers(2**31)), params)


def inject_concepts(stream: LabeledStream, count: int, concept_size: int, spec: StreamSpec,
                    seed: int) -> LabeledStream:
    """Insert ``count`` contiguous blocks, each drawn from its own adversarial concept.

    Block positions are uniform over the gaps of the original stream.
    """
    if count < 0 or concept_size < 1:
        raise ValueError("count must be >= 0 and concept_size >= 1")
    if count == 0:
        return stream
    rng = np.random.default_rng(seed)
    n = len(stream)
    positions = np.sort(rng.integers(0, n + 1, size=count))
    blocks = []
    for b in range(count):
        adv = adversarial_spec(spec, int(rng.integers(2**31)))
        adv = replace(adv, length=concept_size)
        blocks.append(generate(adv))
    fields = (stream.X, stream.y, stream.y_clean, stream.labeled, stream.attack, stream.source_index)
    parts: list[list[np.ndarray]] = [[] for _ in fields]
    prev = 0
    for pos, (Xb, yb) in zip(positions, blocks):
        for arr, out in zip(fields, parts):
            out.append(arr[prev:pos])
        src = stream.source_index[pos] if pos < n else float(n)
        block = (Xb, yb, yb, np.ones(concept_size, dtype=bool), np.full(concept_size, INJECTED, dtype=np.int8),
                 np.full(concept_size, src - 0.5))
        for arr, out in zip(block, parts):
            out.append(arr)
        prev = pos
    for arr, out in zip(fields, parts):
        out.append(arr[prev:])
    X, y, y_clean, labeled, attack, source = (np.concatenate(p) for p in parts)
    return LabeledStream(X, y, y_clean, labeled, attack, stream.n_classes, source)


def sparsify_labels(stream: LabeledStream, fraction: float, seed: int) -> LabeledStream:
    """Each instance independently keeps its label visible with probability ``fraction``."""
    if not 0 < fraction <= 1:
        raise ValueError("label budget must lie in (0, 1]")
    if fraction == 1:
        return stream
    rng = np.random.default_rng(seed)
    keep = rng.random(len(stream)) < fraction
    return replace(stream, labeled=stream.labeled & keep)


def apply_attack(stream: LabeledStream, plan: AttackPlan, spec: StreamSpec) -> LabeledStream:
    if plan.kind == "instance_based":
        return flip_labels(stream, plan.level, plan.seed)
    if plan.kind == "concept_based":
        return inject_concepts(stream, int(plan.level), plan.concept_size, spec, plan.seed)
    return stream


def audit_counts(stream: LabeledStream) -> dict[str, int]:
    return {name: int((stream.attack == code).sum()) for code, name in KIND_NAMES.items()}


def write_audit(stream: LabeledStream, path: str | Path) -> int:
    """CSV with one row per modified instance: index, modification kind.  Returns the row count."""
    idx = np.flatnonzero(stream.attack != CLEAN)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "kind"])
        for i in idx.tolist():
            w.writerow([i, KIND_NAMES[int(stream.attack[i])]])
    return int(idx.size)


def read_audit(path: str | Path) -> dict[str, int]:
    counts = {name: 0 for name in KIND_NAMES.values()}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            counts[row["kind"]] += 1
    return counts
