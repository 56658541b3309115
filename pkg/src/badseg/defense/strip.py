"""Perturbation-entropy detection: blend inputs with clean overlays and measure confidence entropy."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from ..model import to_tensor
from .reports import DetectionReport


def pixel_entropy(conf: np.ndarray, axis: int = 0) -> np.ndarray:
    """Shannon entropy over the class axis, with 0 log 0 = 0."""
    conf = np.asarray(conf, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(conf > 0, -conf * np.log(conf), 0.0)
    return terms.sum(axis=axis)


@torch.no_grad()
def strip_scores(
    model: nn.Module,
    images: np.ndarray,
    overlay_pool: np.ndarray,
    n_perturbations: int = 8,
    seed: int = 0,
    aggregate: str | float = "mean",
) -> np.ndarray:
    """Per-image entropy score averaged over ``n_perturbations`` 0.5/0.5 blends.

    ``aggregate`` reduces the per-pixel entropy map: ``"mean"`` or a
    percentile in [0, 100].
    """
    if len(overlay_pool) == 0:
        raise ValueError("overlay pool is empty")
    if n_perturbations < 1:
        raise ValueError("n_perturbations must be at least 1")
    rng = np.random.default_rng(seed)
    model.eval()
    pool = to_tensor(overlay_pool)
    scores = []
    for img in to_tensor(images):
        idx = rng.choice(len(pool), size=n_perturbations, replace=len(pool) < n_perturbations)
        blended = 0.5 * img.unsqueeze(0) + 0.5 * pool[idx]
        conf, _ = model(blended)
        ent = pixel_entropy(conf.double().numpy(), axis=1)
        if aggregate == "mean":
            per = ent.mean(axis=(1, 2))
        else:
            per = np.percentile(ent.reshape(len(ent), -1), float(aggregate), axis=1)
        scores.append(float(per.mean()))
    return np.array(scores)


def strip_detect(
    model: nn.Module,
    images: np.ndarray,
    labels: Sequence[int],
    overlay_pool: np.ndarray,
    n_perturbations: int = 8,
    fpr: float = 0.05,
    clean_reference: np.ndarray | None = None,
    ids: Sequence[str] | None = None,
    seed: int = 0,
    aggregate: str | float = "mean",
) -> DetectionReport:
    """Low entropy flags a poisoned input; the threshold is the ``fpr`` quantile of clean scores."""
    if not 0 < fpr < 1:
        raise ValueError("fpr must be in (0, 1)")
    scores = strip_scores(model, images, overlay_pool, n_perturbations, seed, aggregate)
    labels = np.asarray(labels)
    if clean_reference is not None:
        ref = strip_scores(model, clean_reference, overlay_pool, n_perturbations, seed + 1, aggregate)
    else:
        ref = scores[labels == 0]
    threshold = float(np.percentile(ref, 100.0 * fpr))
    ids = list(ids) if ids is not None else [str(i) for i in range(len(scores))]
    params = {"n_perturbations": n_perturbations, "fpr": fpr, "aggregate": aggregate}
    return DetectionReport.build("strip", ids, scores, labels, threshold, higher_is_poisoned=False, params=params)
