"""Gram-matrix feature statistics with per-group robust (median/MAD) deviation scores."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch.nn as nn

from ..model import extract_features, predict_batch, resize_nearest
from .reports import DetectionReport

ORDERS = (1, 2, 3, 4)
MAD_SCALE = 1.4826  # MAD to standard deviation under normality
EPS = 1e-12


def gram_features(features: np.ndarray, mask: np.ndarray | None = None, orders: Sequence[int] = ORDERS) -> dict[int, np.ndarray]:
    """Upper-triangular entries of the p-th order Gram matrix, p-th rooted, per order.

    ``features`` is ``(C, h, w)``; ``mask`` selects which feature pixels enter.
    """
    c = features.shape[0]
    flat = features.reshape(c, -1).astype(np.float64)
    if mask is not None:
        flat = flat[:, np.asarray(mask, dtype=bool).reshape(-1)]
    if flat.shape[1] == 0:
        raise ValueError("no feature pixels selected")
    iu = np.triu_indices(c)
    out = {}
    for p in orders:
        fp = flat**p
        g = fp @ fp.T / flat.shape[1]
        g = np.sign(g) * np.abs(g) ** (1.0 / p)
        out[p] = g[iu]
    return out


@dataclass
class GroupStats:
    median: dict[int, np.ndarray]
    mad: dict[int, np.ndarray]
    ref_deviations: np.ndarray
    threshold: float


def deviation(grams: dict[int, np.ndarray], stats: GroupStats) -> float:
    """Mean absolute deviation in MAD units, averaged over entries and orders."""
    parts = [np.mean(np.abs(grams[p] - stats.median[p]) / (stats.mad[p] + EPS)) for p in stats.median]
    return float(np.mean(parts))


def fit_group(reference: Sequence[dict[int, np.ndarray]], n_mad: float) -> GroupStats:
    orders = list(reference[0])
    median = {p: np.median(np.stack([r[p] for r in reference]), axis=0) for p in orders}
    mad = {p: MAD_SCALE * np.median(np.abs(np.stack([r[p] for r in reference]) - median[p]), axis=0) for p in orders}
    stats = GroupStats(median, mad, np.array([]), np.inf)
    devs = np.array([deviation(r, stats) for r in reference])
    center = np.median(devs)
    spread = MAD_SCALE * np.median(np.abs(devs - center))
    stats.ref_deviations = devs
    stats.threshold = float(center + n_mad * spread)
    return stats


def main_class(label: np.ndarray, num_classes: int) -> int:
    """Class with the largest pixel area; ties go to the lowest index."""
    counts = np.bincount(label[(label >= 0) & (label < num_classes)].ravel(), minlength=num_classes)
    return int(np.argmax(counts))


def _grouped_grams(model, images, label_maps, num_classes, grouping, selected_class, orders):
    feats = extract_features(model, images)
    if label_maps is None:
        label_maps, _ = predict_batch(model, images)
    out = []
    for f, lab in zip(feats, label_maps):
        group = main_class(lab, num_classes) if grouping == "main_class" else int(selected_class)
        small = resize_nearest(lab, f.shape[1:])
        mask = small == group
        out.append((group, gram_features(f, mask, orders) if mask.any() else None))
    return out


def beatrix_detect(
    model: nn.Module,
    images: np.ndarray,
    labels: Sequence[int],
    reference_images: np.ndarray,
    num_classes: int,
    label_maps: np.ndarray | None = None,
    reference_label_maps: np.ndarray | None = None,
    grouping: str = "main_class",
    selected_class: int | None = None,
    orders: Sequence[int] = ORDERS,
    n_mad: float = 3.0,
    min_references: int = 3,
    ids: Sequence[str] | None = None,
):
    """Score each sample against clean statistics of its group.

    Groups are the largest-area class of the label map (the model's own
    prediction unless maps are given), or a single selected class. Samples
    whose group has fewer than ``min_references`` clean references, or where
    the group class is absent, are skipped.
    """
    if grouping not in ("main_class", "selected_class"):
        raise ValueError(f"unknown grouping {grouping!r}")
    if grouping == "selected_class" and selected_class is None:
        raise ValueError("selected_class grouping needs a class id")
    ref = _grouped_grams(model, reference_images, reference_label_maps, num_classes, grouping, selected_class, orders)
    by_group: dict[int, list] = {}
    for g, grams in ref:
        if grams is not None:
            by_group.setdefault(g, []).append(grams)
    stats = {g: fit_group(r, n_mad) for g, r in by_group.items() if len(r) >= min_references}

    ids = list(ids) if ids is not None else [str(i) for i in range(len(images))]
    labels = np.asarray(labels)
    kept_ids, scores, kept_labels, excess, skipped = [], [], [], [], []
    for sid, lab, (g, grams) in zip(ids, labels, _grouped_grams(model, images, label_maps, num_classes, grouping, selected_class, orders)):
        if grams is None or g not in stats:
            skipped.append(sid)
            continue
        d = deviation(grams, stats[g])
        kept_ids.append(sid)
        scores.append(d)
        kept_labels.append(int(lab))
        excess.append(d - stats[g].threshold)
    if not kept_ids:
        raise ValueError("every sample was skipped; no group has clean references")
    # per-group thresholds are folded in by scoring the excess over the group threshold
    params = {
        "grouping": grouping,
        "selected_class": selected_class,
        "orders": list(orders),
        "n_mad": n_mad,
        "group_thresholds": {int(g): s.threshold for g, s in stats.items()},
        "deviation": scores,
    }
    return DetectionReport.build(
        "beatrix", kept_ids, excess, kept_labels, 0.0, higher_is_poisoned=True, params=params, skipped=skipped
    )
