"""Segmentation-model contract, a tiny reference network and the training loop.

Any ``torch.nn.Module`` can be plugged in if ``forward(x)`` takes a
``(B, 3, H, W)`` batch in [0, 1] and returns ``(confidence, features)`` where
``confidence`` is ``(B, K, H, W)`` and sums to one over classes and
``features`` is the last map before the classifier. Models that also expose
``logits(x)`` are trained through it for numerical stability, and models with
a ``feature_mask`` buffer can be pruned.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import ClassTaxonomy, Sample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
IGNORE_INDEX = 255


class TinySegNet(nn.Module):
    """Small encoder-decoder with a global-context branch (~40k parameters)."""

    def __init__(self, num_classes: int = 4, feature_channels: int = 32, width: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.feature_channels = feature_channels
        self.width = width
        w1, w2 = width, 2 * width
        self.stem = nn.Sequential(
            nn.Conv2d(3, w1, 3, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w1, w1 + w1 // 2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
        )
        skip = w1 + w1 // 2
        self.down = nn.Sequential(
            nn.Conv2d(skip, w2, 3, stride=2, padding=1), nn.ReLU(inplace=True),
            nn.Conv2d(w2, w2, 3, padding=2, dilation=2),
        )
        self.context = nn.Linear(w2, w2)
        self.fuse = nn.Conv2d(w2 + skip, feature_channels, 3, padding=1)
        self.classifier = nn.Conv2d(feature_channels, num_classes, 1)
        self.register_buffer("feature_mask", torch.ones(feature_channels))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        a = self.stem(x)
        b = self.down(a)
        g = self.context(F.relu(b).mean(dim=(2, 3)))[:, :, None, None]
        b = F.relu(b + g)
        b = F.interpolate(b, size=a.shape[-2:], mode="bilinear", align_corners=False)
        f = F.relu(self.fuse(torch.cat([a, b], dim=1)))
        return f * self.feature_mask.view(1, -1, 1, 1)

    def logits(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f = self.features(x)
        out = F.interpolate(self.classifier(f), size=x.shape[-2:], mode="bilinear", align_corners=False)
        return out, f

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out, f = self.logits(x)
        return torch.softmax(out, dim=1), f


def reference_tiny_model(num_classes: int = 4, feature_channels: int = 32, seed: int = 0) -> TinySegNet:
    torch.manual_seed(seed)
    return TinySegNet(num_classes, feature_channels)


def log_confidence(model: nn.Module, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    if hasattr(model, "logits"):
        out, f = model.logits(x)
        return F.log_softmax(out, dim=1), f
    conf, f = model(x)
    return torch.log(conf.clamp_min(1e-12)), f


def to_tensor(images) -> torch.Tensor:
    """(N, H, W, 3) uint8 or a single (H, W, 3) image -> (N, 3, H, W) float in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).permute(0, 3, 1, 2)
    return t.float() / 255.0 if arr.dtype == np.uint8 else t.float()


def label_tensor(labels) -> torch.Tensor:
    arr = np.asarray(labels)
    if arr.ndim == 2:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr)).long()


def pixel_loss(log_conf: torch.Tensor, target: torch.Tensor, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    """Per-sample mean cross-entropy over non-ignored pixels, shape (B,)."""
    nll = F.nll_loss(log_conf, target.clamp(0, log_conf.shape[1] - 1), reduction="none")
    valid = (target != ignore_index).to(nll.dtype)
    counts = valid.sum(dim=(1, 2))
    if (counts == 0).any():
        raise ValueError("no valid pixels in at least one sample")
    return (nll * valid).sum(dim=(1, 2)) / counts


def total_loss(model: nn.Module, clean: Sequence[Sample], triggered: Sequence[Sample]) -> torch.Tensor:
    """Sum of per-sample losses over the clean part plus the triggered part."""
    out = torch.zeros(())
    for part in (clean, triggered):
        if len(part):
            lc, _ = log_confidence(model, to_tensor(np.stack([s.image for s in part])))
            out = out + pixel_loss(lc, label_tensor(np.stack([s.label for s in part]))).sum()
    return out


@dataclass
class TrainConfig:
    epochs: int = 20
    step_size: float = 0.01
    batch_size: int = 16
    seed: int = 0
    hflip: bool = False
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainingDiverged(RuntimeError):
    pass


def train(
    model: nn.Module,
    samples: Sequence[Sample],
    config: TrainConfig,
    sign: float = 1.0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> list[float]:
    """Minibatch Adam on mean pixel cross-entropy; returns per-epoch mean loss.

    ``sign=-1`` performs gradient ascent (used for unlearning).
    """
    if not samples:
        raise ValueError("cannot train on an empty sample set")
    x_all = to_tensor(np.stack([s.image for s in samples]))
    y_all = label_tensor(np.stack([s.label for s in samples]))
    gen = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.step_size, weight_decay=config.weight_decay)
    model.train()
    history = []
    n = len(samples)
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=gen)
        running, batches = 0.0, 0
        for step, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            x, y = x_all[idx], y_all[idx]
            if config.hflip:
                flip = torch.rand(len(idx), generator=gen) < 0.5
                x = torch.where(flip.view(-1, 1, 1, 1), x.flip(-1), x)
                y = torch.where(flip.view(-1, 1, 1), y.flip(-1), y)
            lc, _ = log_confidence(model, x)
            loss = pixel_loss(lc, y).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {step}")
            opt.zero_grad()
            (sign * loss).backward()
            opt.step()
            running += float(loss.detach())
            batches += 1
        history.append(running / batches)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    model.eval()
    return history


def train_poisoned(model: nn.Module, poisoned_set, config: TrainConfig) -> nn.Module:
    """Train on the union of clean and triggered samples (the combined loss)."""
    train(model, poisoned_set.samples, config)
    return model


@torch.no_grad()
def predict_batch(model: nn.Module, images, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    model.eval()
    x = to_tensor(images)
    confs = []
    for start in range(0, len(x), batch_size):
        conf, _ = model(x[start:start + batch_size])
        confs.append(conf.double().numpy())
    conf = np.concatenate(confs)
    return np.argmax(conf, axis=1), conf


def predict(model: nn.Module, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel argmax; ties resolve to the lowest class index."""
    labels, conf = predict_batch(model, image[None])
    return labels[0], conf[0]


@torch.no_grad()
def extract_features(model: nn.Module, images, batch_size: int = 64) -> np.ndarray:
    model.eval()
    x = to_tensor(images)
    out = []
    for start in range(0, len(x), batch_size):
        _, f = model(x[start:start + batch_size])
        out.append(f.double().numpy())
    return np.concatenate(out)


def save_checkpoint(model: TinySegNet, path, taxonomy: ClassTaxonomy | None = None, config: TrainConfig | None = None):
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "arch": "tiny",
            "num_classes": model.num_classes,
            "feature_channels": model.feature_channels,
            "width": model.width,
            "state_dict": model.state_dict(),
            "taxonomy": None if taxonomy is None else taxonomy.to_dict(),
            "train_config": None if config is None else config.to_dict(),
        },
        Path(path),
    )


def load_checkpoint(path) -> tuple[TinySegNet, dict]:
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if ckpt.get("version") != CHECKPOINT_VERSION or ckpt.get("arch") != "tiny":
        raise ValueError(f"unsupported checkpoint {path}")
    model = TinySegNet(ckpt["num_classes"], ckpt["feature_channels"], ckpt["width"])
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model, ckpt


def num_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def resize_nearest(label: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = label.shape
    rows = np.minimum((np.arange(shape[0]) + 0.5) * h / shape[0], h - 1).astype(int)
    cols = np.minimum((np.arange(shape[1]) + 0.5) * w / shape[1], w - 1).astype(int)
    return label[rows[:, None], cols[None, :]]
