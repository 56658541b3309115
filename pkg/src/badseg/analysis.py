"""Class centers in feature space and victim-target pair ranking."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .data import ClassTaxonomy
from .model import extract_features, resize_nearest


@dataclass
class ClassCenterMatrix:
    centers: np.ndarray  # (K, C), NaN rows where invalid
    counts: np.ndarray  # (K,)
    valid: np.ndarray  # (K,) bool


def class_centers(features: np.ndarray, label: np.ndarray, num_classes: int, ignore_index: int = 255) -> ClassCenterMatrix:
    """Mean feature vector per class: (one-hot labels)^T features / pixel count.

    ``features`` is ``(C, h, w)`` or a batch ``(B, C, h, w)`` with labels
    ``(H, W)`` / ``(B, H, W)``; labels are nearest-neighbor resampled to the
    feature resolution when the sizes differ.
    """
    features = np.asarray(features, dtype=np.float64)
    label = np.asarray(label)
    if features.ndim == 3:
        features, label = features[None], label[None]
    b, c, h, w = features.shape
    if label.shape[0] != b:
        raise ValueError("features and labels have different batch sizes")
    if label.shape[1:] != (h, w):
        lh, lw = label.shape[1:]
        if lh * w != lw * h:
            raise ValueError(f"label {lh}x{lw} cannot be aligned with features {h}x{w}")
        label = np.stack([resize_nearest(l, (h, w)) for l in label])
    f_flat = features.transpose(0, 2, 3, 1).reshape(-1, c)
    y_flat = label.reshape(-1)
    keep = (y_flat != ignore_index) & (y_flat >= 0) & (y_flat < num_classes)
    onehot = np.zeros((keep.sum(), num_classes))
    onehot[np.arange(keep.sum()), y_flat[keep]] = 1.0
    counts = onehot.sum(axis=0).astype(np.int64)
    sums = onehot.T @ f_flat[keep]
    valid = counts > 0
    centers = np.full((num_classes, c), np.nan)
    centers[valid] = sums[valid] / counts[valid, None]
    return ClassCenterMatrix(centers, counts, valid)


def global_centers(batches: Iterable[ClassCenterMatrix], weighted: bool = False) -> ClassCenterMatrix:
    """Average per-batch centers over the batches where each class is present.

    The default is an unweighted mean; ``weighted`` weights batches by the
    class's pixel count instead.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("need at least one batch")
    centers = np.stack([b.centers for b in batches])
    valid = np.stack([b.valid for b in batches])
    counts = np.stack([b.counts for b in batches])
    weights = (counts if weighted else valid).astype(np.float64)
    total = weights.sum(axis=0)
    filled = np.where(valid[..., None], centers, 0.0)
    out_valid = valid.any(axis=0)
    out = np.full(batches[0].centers.shape, np.nan)
    num = (weights[..., None] * filled).sum(axis=0)
    out[out_valid] = num[out_valid] / total[out_valid, None]
    return ClassCenterMatrix(out, counts.sum(axis=0), out_valid)


def suitable_vectors(kind_i: str, kind_j: str) -> list[str]:
    if kind_i == kind_j == "object":
        return ["O2O"]
    if kind_i == kind_j == "stuff":
        return ["B2B"]
    return ["O2B", "B2O"]


@dataclass
class DistanceRanking:
    distance_matrix: np.ndarray  # raw Euclidean, NaN for invalid classes
    normalized_matrix: np.ndarray
    ranked_pairs: list[tuple[int, int, float, list[str]]]

    def to_table(self, taxonomy: ClassTaxonomy | None = None, delimiter: str = "\t") -> str:
        def name(k):
            return taxonomy.classes[k].name if taxonomy is not None else str(k)

        buf = io.StringIO()
        buf.write(delimiter.join(["rank", "class_i", "class_j", "distance", "suitable_vectors"]) + "\n")
        for r, (i, j, d, vecs) in enumerate(self.ranked_pairs, 1):
            buf.write(delimiter.join([str(r), name(i), name(j), f"{d:.4f}", ",".join(vecs)]) + "\n")
        return buf.getvalue()

    def pair_distance(self, i: int, j: int) -> float:
        return float(self.normalized_matrix[i, j])


def pairwise_distances(centers: np.ndarray) -> np.ndarray:
    diff = centers[:, None, :] - centers[None, :, :]
    d = np.sqrt((diff**2).sum(axis=-1))
    np.fill_diagonal(d, 0.0)
    return d


def rank_pairs(ccm: ClassCenterMatrix, taxonomy: ClassTaxonomy) -> DistanceRanking:
    ids = np.flatnonzero(ccm.valid)
    if len(ids) < 2:
        raise ValueError("need at least two valid classes to rank pairs")
    k = len(ccm.valid)
    raw = np.full((k, k), np.nan)
    sub = pairwise_distances(ccm.centers[ids])
    sub = (sub + sub.T) / 2.0
    raw[np.ix_(ids, ids)] = sub
    off = sub[~np.eye(len(ids), dtype=bool)]
    scale = off.max() if off.max() > 0 else 1.0
    norm = raw / scale
    pairs = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = int(ids[a]), int(ids[b])
            pairs.append((i, j, float(norm[i, j]), suitable_vectors(taxonomy.kind(i), taxonomy.kind(j))))
    pairs.sort(key=lambda p: (p[2], p[0], p[1]))
    return DistanceRanking(raw, norm, pairs)


def surrogate_centers(model, samples: Sequence, num_classes: int, batch_size: int = 8, weighted: bool = False):
    """Global class centers of a surrogate over a dataset, one matrix per minibatch."""
    per_batch = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        feats = extract_features(model, np.stack([s.image for s in chunk]))
        per_batch.append(class_centers(feats, np.stack([s.label for s in chunk]), num_classes))
    return global_centers(per_batch, weighted=weighted)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    return float(stats.spearmanr(x, y).statistic)


def kendall(x: Sequence[float], y: Sequence[float]) -> float:
    return float(stats.kendalltau(x, y).statistic)


def top_k_overlap(a: DistanceRanking, b: DistanceRanking, k: int) -> int:
    pa = {(i, j) for i, j, _, _ in a.ranked_pairs[:k]}
    pb = {(i, j) for i, j, _, _ in b.ranked_pairs[:k]}
    return len(pa & pb)
