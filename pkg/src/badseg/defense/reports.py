"""Detection and mitigation reports, AUC and the clean/poisoned evaluation sets."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from ..data import Sample
from ..labelops import AttackSpec
from ..metrics import jsonable
from ..poison import is_eligible, poison_sample
from ..trigger import TriggerSpec


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold-free ROC AUC (higher score = more likely poisoned), ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both clean and poisoned samples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def binary_metrics(flags: Sequence[bool], labels: Sequence[int]) -> dict:
    flags = np.asarray(flags, dtype=bool)
    labels = np.asarray(labels).astype(bool)
    tp = int((flags & labels).sum())
    fp = int((flags & ~labels).sum())
    fn = int((~flags & labels).sum())
    acc = float((flags == labels).mean()) if len(labels) else float("nan")
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"acc": acc, "recall": recall, "f1": f1}


@dataclass
class DetectionReport:
    method: str
    ids: list[str]
    scores: list[float]
    labels: list[int]
    flags: list[bool]
    threshold: float
    higher_is_poisoned: bool
    acc: float
    recall: float
    f1: float
    auc: float
    params: dict = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @classmethod
    def build(
        cls,
        method: str,
        ids,
        scores,
        labels,
        threshold: float,
        higher_is_poisoned: bool,
        params: dict | None = None,
        skipped=(),
    ) -> "DetectionReport":
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels, dtype=int)
        flags = scores > threshold if higher_is_poisoned else scores < threshold
        suspicion = scores if higher_is_poisoned else -scores
        m = binary_metrics(flags, labels)
        return cls(
            method=method,
            ids=list(ids),
            scores=scores.tolist(),
            labels=labels.tolist(),
            flags=[bool(f) for f in flags],
            threshold=float(threshold),
            higher_is_poisoned=higher_is_poisoned,
            auc=auc(suspicion, labels) if 0 < labels.sum() < len(labels) else float("nan"),
            params=dict(params or {}),
            skipped=list(skipped),
            **m,
        )

    def to_dict(self) -> dict:
        return jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def score_table(self) -> str:
        """(label, score) rows for external density plots."""
        buf = io.StringIO()
        buf.write("id\tlabel\tscore\n")
        for i, l, s in zip(self.ids, self.labels, self.scores):
            buf.write(f"{i}\t{'poisoned' if l else 'clean'}\t{s:.10g}\n")
        return buf.getvalue()


@dataclass
class MitigationReport:
    method: str
    asr_before: float
    asr_after: float
    pba_after: float
    cba_after: float
    params: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class DetectionSet:
    """Disjoint, equal-size clean and poisoned test images."""

    images: np.ndarray
    labels: np.ndarray  # 1 = poisoned
    ids: list[str]
    clean_labels: np.ndarray  # ground-truth label maps of the underlying clean images

    def __len__(self) -> int:
        return len(self.ids)


def detection_set(
    samples: Sequence[Sample], attack: AttackSpec, trigger: TriggerSpec, n_per_class: int, seed: int = 0
) -> DetectionSet:
    """Split eligible samples into a poisoned half and a disjoint clean half."""
    eligible = [s for s in samples if is_eligible(s, attack)]
    n = min(n_per_class, len(eligible) // 2)
    if n < 1:
        raise ValueError("not enough samples with the victim class for a detection set")
    order = np.random.default_rng(seed).permutation(len(eligible))
    pois = [eligible[i] for i in order[:n]]
    clean = [eligible[i] for i in order[n:2 * n]]
    images = [poison_sample(s, attack, trigger, seed).image for s in pois] + [s.image for s in clean]
    return DetectionSet(
        images=np.stack(images),
        labels=np.array([1] * n + [0] * n),
        ids=[s.id for s in pois] + [s.id for s in clean],
        clean_labels=np.stack([s.label for s in pois + clean]),
    )
