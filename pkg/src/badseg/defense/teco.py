"""Corruption-robustness consistency detection.

A triggered input tends to break at very different severities depending on
the corruption, while clean inputs degrade more uniformly. The score is the
standard deviation of per-corruption breaking severities.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch.nn as nn

from ..metrics import miou
from ..model import predict_batch
from .corruptions import CORRUPTIONS, corrupt
from .reports import DetectionReport

SEVERITIES = (1, 2, 3, 4, 5)


def breaking_severity(mious: Sequence[float], severities: Sequence[int], threshold: float) -> int:
    """First severity whose mIoU falls below ``threshold``; ``max + 1`` if none does."""
    for sev, m in zip(severities, mious):
        if m < threshold:
            return int(sev)
    return int(max(severities)) + 1


def teco_score(breaking: Sequence[int]) -> float:
    return float(np.std(np.asarray(breaking, dtype=np.float64)))


def nstd_threshold(clean_scores: Sequence[float], n_std: float) -> float:
    s = np.asarray(clean_scores, dtype=np.float64)
    return float(s.mean() + n_std * s.std())


def breaking_severities(
    model: nn.Module,
    image: np.ndarray,
    num_classes: int,
    severities: Sequence[int] = SEVERITIES,
    miou_break_threshold: float = 0.5,
    corruptions: Sequence[str] | None = None,
    seed: int = 0,
) -> np.ndarray:
    names = list(corruptions or CORRUPTIONS)
    base, _ = predict_batch(model, image[None])
    batch = np.stack([corrupt(image, n, s, seed) for n in names for s in severities])
    preds, _ = predict_batch(model, batch)
    preds = preds.reshape(len(names), len(severities), *image.shape[:2])
    out = []
    for per_corruption in preds:
        scores = [miou(p, base[0], num_classes, ignore_index=-1)[0] for p in per_corruption]
        out.append(breaking_severity(scores, severities, miou_break_threshold))
    return np.array(out)


def teco_detect(
    model: nn.Module,
    images: np.ndarray,
    labels: Sequence[int],
    num_classes: int,
    severities: Sequence[int] = SEVERITIES,
    miou_break_threshold: float = 0.5,
    n_std: float = 1.0,
    clean_reference: np.ndarray | None = None,
    ids: Sequence[str] | None = None,
    seed: int = 0,
) -> DetectionReport:
    """Flag inputs whose score exceeds mean + ``n_std`` std of the clean scores."""
    table = [breaking_severities(model, im, num_classes, severities, miou_break_threshold, seed=seed) for im in images]
    scores = np.array([teco_score(b) for b in table])
    labels = np.asarray(labels)
    if clean_reference is not None:
        ref = [teco_score(breaking_severities(model, im, num_classes, severities, miou_break_threshold, seed=seed)) for im in clean_reference]
    else:
        ref = scores[labels == 0]
    threshold = nstd_threshold(ref, n_std)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(scores))]
    params = {"severities": list(severities), "miou_break_threshold": miou_break_threshold, "n_std": n_std}
    report = DetectionReport.build("teco", ids, scores, labels, threshold, higher_is_poisoned=True, params=params)
    report.params["breaking_severities"] = [b.tolist() for b in table]
    return report
