"""Model-repair defenses: fine-tuning, activation pruning and anti-backdoor learning."""

from __future__ import annotations

import copy
import math
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from ..data import Sample
from ..metrics import EvalReport
from ..model import TrainConfig, extract_features, label_tensor, log_confidence, pixel_loss, to_tensor, train
from .reports import MitigationReport

Evaluator = Callable[[nn.Module], EvalReport]

CLEAN_FRACTIONS = (0.01, 0.05, 0.10)


def _report(method, before: EvalReport, after: EvalReport, params, extra=None) -> MitigationReport:
    return MitigationReport(method, before.asr, after.asr, after.pba, after.cba, dict(params), dict(extra or {}))


def clean_subset(samples: Sequence[Sample], fraction: float, reference_size: int | None = None, seed: int = 0):
    """``round(fraction * reference_size)`` samples drawn without replacement."""
    if not 0 < fraction <= 1:
        raise ValueError(f"clean fraction must be in (0, 1], got {fraction}")
    reference_size = len(samples) if reference_size is None else reference_size
    n = min(int(round(fraction * reference_size)), len(samples))
    if n < 1:
        raise ValueError("clean subset is empty")
    idx = np.sort(np.random.default_rng(seed).choice(len(samples), size=n, replace=False))
    return [samples[i] for i in idx]


def finetune_defense(
    model: nn.Module,
    clean_holdout: Sequence[Sample],
    clean_fraction: float,
    epochs: int,
    evaluate: Evaluator,
    base_step_size: float = 0.01,
    reference_size: int | None = None,
    batch_size: int = 16,
    seed: int = 0,
) -> tuple[MitigationReport, nn.Module]:
    """Retrain a copy of the model on a clean subset at a tenth of the original step size."""
    subset = clean_subset(clean_holdout, clean_fraction, reference_size, seed)
    before = evaluate(model)
    tuned = copy.deepcopy(model)
    cfg = TrainConfig(epochs=epochs, step_size=base_step_size * 0.1, batch_size=batch_size, seed=seed)
    if epochs > 0:
        train(tuned, subset, cfg)
    after = evaluate(tuned) if epochs > 0 else before
    params = {"clean_fraction": clean_fraction, "epochs": epochs, "step_size": cfg.step_size, "n_clean": len(subset)}
    return _report("finetune", before, after, params), tuned


def activation_counts(model: nn.Module, images) -> np.ndarray:
    """Per-channel number of positive activations at the last pre-classifier layer."""
    feats = extract_features(model, images)
    return (feats > 0).sum(axis=(0, 2, 3)).astype(np.int64)


def prune_order(counts: np.ndarray) -> np.ndarray:
    """Channels from least to most active; equal counts keep index order."""
    return np.argsort(np.asarray(counts), kind="stable")


def channels_to_prune(counts: np.ndarray, fraction: float) -> np.ndarray:
    if not 0 <= fraction < 1:
        raise ValueError(f"pruning fraction must be in [0, 1), got {fraction}")
    n = math.ceil(fraction * len(counts)) if fraction > 0 else 0
    return np.sort(prune_order(counts)[:n])


def apply_pruning(model: nn.Module, channels) -> nn.Module:
    if not hasattr(model, "feature_mask"):
        raise TypeError("model does not expose a prunable feature layer")
    pruned = copy.deepcopy(model)
    with torch.no_grad():
        pruned.feature_mask[torch.as_tensor(np.asarray(channels, dtype=np.int64))] = 0.0
    return pruned


def prune_defense(
    model: nn.Module, clean_probe: Sequence[Sample], fraction: float, evaluate: Evaluator
) -> tuple[MitigationReport, nn.Module]:
    counts = activation_counts(model, np.stack([s.image for s in clean_probe]))
    channels = channels_to_prune(counts, fraction)
    pruned = apply_pruning(model, channels)
    before = evaluate(model)
    after = evaluate(pruned) if len(channels) else before
    params = {"fraction": fraction, "pruned_channels": channels.tolist(), "n_probe": len(clean_probe)}
    return _report("prune", before, after, params, {"activation_counts": counts.tolist()}), pruned


@torch.no_grad()
def sample_losses(model: nn.Module, samples: Sequence[Sample], batch_size: int = 64) -> np.ndarray:
    model.eval()
    out = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        lc, _ = log_confidence(model, to_tensor(np.stack([s.image for s in chunk])))
        out.append(pixel_loss(lc, label_tensor(np.stack([s.label for s in chunk]))).double().numpy())
    return np.concatenate(out)


def isolate_lowest(losses: Sequence[float], rate: float) -> np.ndarray:
    """Indices of the ``floor(rate * N)`` lowest-loss samples (ties keep index order)."""
    if not 0 < rate < 1:
        raise ValueError(f"isolation rate must be in (0, 1), got {rate}")
    losses = np.asarray(losses)
    n = int(math.floor(rate * len(losses)))
    return np.sort(np.argsort(losses, kind="stable")[:n])


def abl_defense(
    samples: Sequence[Sample],
    model_factory: Callable[[], nn.Module],
    isolation_rate: float,
    evaluate: Evaluator,
    train_config: TrainConfig,
    brief_epochs: int = 5,
    unlearn_epochs: int = 1,
    unlearn_step_size: float = 1e-4,
    poisoned_flags: Sequence[bool] | None = None,
    asr_before: float | None = None,
) -> tuple[MitigationReport, list[str], dict]:
    """Isolate low-loss samples after brief training, retrain on the rest, then unlearn.

    Returns the report, the isolated ids and a loss table (id, loss, poisoned)
    for density plots.
    """
    if not 0 < isolation_rate < 1:
        raise ValueError(f"isolation rate must be in (0, 1), got {isolation_rate}")
    brief = model_factory()
    train(brief, samples, TrainConfig(**{**train_config.to_dict(), "epochs": brief_epochs}))
    losses = sample_losses(brief, samples)
    isolated = isolate_lowest(losses, isolation_rate)
    iso_set = set(isolated.tolist())
    remainder = [s for i, s in enumerate(samples) if i not in iso_set]
    model = model_factory()
    train(model, remainder, train_config)
    if unlearn_epochs > 0 and iso_set:
        cfg = TrainConfig(**{**train_config.to_dict(), "epochs": unlearn_epochs, "step_size": unlearn_step_size})
        train(model, [samples[i] for i in isolated], cfg, sign=-1.0)
    after = evaluate(model)
    if asr_before is None:
        asr_before = evaluate(brief).asr
    flags = list(poisoned_flags) if poisoned_flags is not None else [None] * len(samples)
    table = {
        "id": [s.id for s in samples],
        "loss": losses.tolist(),
        "poisoned": flags,
        "isolated": [i in iso_set for i in range(len(samples))],
    }
    extra = {"n_isolated": len(isolated)}
    if poisoned_flags is not None and len(isolated):
        extra["isolation_precision"] = float(np.mean([bool(flags[i]) for i in isolated]))
    params = {
        "isolation_rate": isolation_rate,
        "brief_epochs": brief_epochs,
        "unlearn_epochs": unlearn_epochs,
        "unlearn_step_size": unlearn_step_size,
    }
    report = MitigationReport("abl", asr_before, after.asr, after.pba, after.cba, params, extra)
    return report, [samples[i].id for i in isolated], table
