"""Attack success, segmentation utility and stealth metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

PSNR_IDENTICAL = math.inf


def asr_counts(pred: np.ndarray, target_class: int, victim_mask: np.ndarray) -> tuple[int, int]:
    """(successful victim pixels, victim pixels)."""
    victim_mask = np.asarray(victim_mask, dtype=bool)
    return int((pred[victim_mask] == target_class).sum()), int(victim_mask.sum())


def asr(pred: np.ndarray, target_class: int, victim_mask: np.ndarray) -> float:
    success, total = asr_counts(pred, target_class, victim_mask)
    if total == 0:
        raise ValueError("no victim pixels")
    return success / total


def confusion(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    ignore_index: int = 255,
    exclude_mask: np.ndarray | None = None,
) -> np.ndarray:
    """K x K counts, rows = ground truth, columns = prediction."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    keep = gt != ignore_index
    if exclude_mask is not None:
        keep &= ~np.asarray(exclude_mask, dtype=bool)
    idx = gt[keep].astype(np.int64) * num_classes + pred[keep].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(conf: np.ndarray) -> tuple[float, np.ndarray]:
    """mIoU over classes with a non-empty union, and per-class IoU (NaN if empty)."""
    if conf.sum() == 0:
        raise ValueError("all pixels excluded")
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
    return float(np.nanmean(per_class)), per_class


def miou(pred, gt, num_classes: int, ignore_index: int = 255, exclude_mask=None) -> tuple[float, np.ndarray]:
    return iou_from_confusion(confusion(pred, gt, num_classes, ignore_index, exclude_mask))


def instance_iou(pred: np.ndarray, instance: np.ndarray, class_id: int, others: np.ndarray | None = None, margin: int = 3):
    """IoU between an instance mask and the prediction of its class near it.

    The prediction is restricted to the instance dilated by ``margin`` pixels,
    minus ``others`` (e.g. other instances), so distant pixels of the same class
    do not count against it.
    """
    instance = np.asarray(instance, dtype=bool)
    window = ndimage.binary_dilation(instance, iterations=margin)
    if others is not None:
        window &= ~(np.asarray(others, dtype=bool) & ~instance)
    hit = (pred == class_id) & window
    union = (hit | instance).sum()
    return float((hit & instance).sum() / union) if union else 0.0


# --------------------------------------------------------------------------
# stealth


def psnr(a: np.ndarray, b: np.ndarray, data_range: float = 255.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in shape")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_IDENTICAL
    return float(20.0 * np.log10(data_range / np.sqrt(mse)))


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 255.0, sigma: float = 1.5) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03.

    Color images are averaged over channels; border pixels whose window falls
    off the image are excluded from the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    radius = 5
    blur = lambda x: ndimage.gaussian_filter(x, sigma=sigma, truncate=radius / sigma, mode="reflect")
    scores = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = blur(x), blur(y)
        vx = blur(x * x) - mx * mx
        vy = blur(y * y) - my * my
        cxy = blur(x * y) - mx * my
        num = (2 * mx * my + c1) * (2 * cxy + c2)
        den = (mx * mx + my * my + c1) * (vx + vy + c2)
        smap = num / den
        scores.append(smap[radius:-radius, radius:-radius].mean())
    return float(np.mean(scores))


class RandomConvFeatures(nn.Module):
    """Fixed, seeded, untrained conv stack used as the default perceptual extractor."""

    def __init__(self, seed: int = 0, widths=(16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, c_in = [], 3
        for c_out in widths:
            conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (9 * c_in)))
                conv.bias.zero_()
            layers.append(conv)
            c_in = c_out
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for conv in self.layers:
            x = F.relu(conv(x))
            feats.append(x)
        return feats


_DEFAULT_EXTRACTOR: RandomConvFeatures | None = None


def perceptual_distance(a: np.ndarray, b: np.ndarray, extractor: Callable | None = None) -> float:
    """Channel-normalized feature L2, averaged over space and summed over layers."""
    global _DEFAULT_EXTRACTOR
    if extractor is None:
        if _DEFAULT_EXTRACTOR is None:
            _DEFAULT_EXTRACTOR = RandomConvFeatures()
        extractor = _DEFAULT_EXTRACTOR
    from .model import to_tensor

    x = to_tensor(np.stack([a, b])).double() * 2.0 - 1.0
    with torch.no_grad():
        feats = extractor.double()(x) if isinstance(extractor, nn.Module) else extractor(x)
    total = 0.0
    for f in feats:
        f = f / (f.norm(dim=1, keepdim=True) + 1e-10)
        total += float(((f[0] - f[1]) ** 2).sum(dim=0).mean())
    return total


def stealth(clean: np.ndarray, poisoned: np.ndarray, extractor=None) -> dict:
    if clean.shape != poisoned.shape:
        raise ValueError("images differ in shape")
    data_range = 255.0 if clean.dtype == np.uint8 else 1.0
    p = psnr(clean, poisoned, data_range)
    s = 1.0 if math.isinf(p) else ssim(clean, poisoned, data_range)
    return {"psnr": p, "ssim": s, "perceptual": perceptual_distance(clean, poisoned, extractor)}


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    asr: float
    pba: float
    cba: float
    per_class_iou: list[float]
    stealth: dict
    victim_pixel_count: int
    success_pixel_count: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**_from_jsonable(d))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "+inf" if v > 0 else "-inf"
        return round(v, 10)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_jsonable(v) for v in obj]
    if obj == "+inf":
        return math.inf
    if obj == "-inf":
        return -math.inf
    return obj


def jsonable(obj):
    return _jsonable(obj)


def untriggered_instance_ious(preds, poisoned_samples, clean_by_id, victim_class: int) -> list[float]:
    """IoU of each victim instance without a trigger, for object-anchored placements."""
    from .labelops import extract_instances

    out = []
    for pred, ps in zip(preds, poisoned_samples):
        anchored = [a.mask for a in ps.placement.anchors if a.kind == "object"]
        if not anchored:
            continue
        clean_label = clean_by_id[ps.id].label
        instances = extract_instances(clean_label, victim_class)
        victim = clean_label == victim_class
        for inst in instances:
            if any((inst & a).any() for a in anchored):
                continue
            out.append(instance_iou(pred, inst, victim_class, others=victim))
    return out


def evaluate(
    model: nn.Module,
    clean_samples: Sequence,
    poisoned_samples: Sequence,
    target_class: int,
    num_classes: int,
    ignore_index: int = 255,
    stealth_limit: int = 16,
    victim_class: int | None = None,
) -> EvalReport:
    """ASR/PBA on triggered inputs and CBA on clean inputs, pooled over the set.

    ``poisoned_samples`` are :class:`~badseg.poison.PoisonedSample` built from
    the test set; ``clean_samples`` the unmodified test set. With
    ``victim_class``, victim instances that carry no trigger are scored by
    their IoU against the clean label (Instance-Level scoping).
    """
    from .model import predict_batch

    clean_pred, _ = predict_batch(model, np.stack([s.image for s in clean_samples]))
    cba_conf = sum(
        confusion(p, s.label, num_classes, ignore_index) for p, s in zip(clean_pred, clean_samples)
    )
    cba, _ = iou_from_confusion(cba_conf)

    clean_by_id = {s.id: s for s in clean_samples}
    pois_pred, _ = predict_batch(model, np.stack([p.image for p in poisoned_samples]))
    success = victims = 0
    v_success = v_total = 0
    pba_conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, ps in zip(pois_pred, poisoned_samples):
        s, t = asr_counts(pred, target_class, ps.victim_mask)
        success += s
        victims += t
        s2, t2 = asr_counts(pred, target_class, ps.violating_mask)
        v_success += s2
        v_total += t2
        gt = clean_by_id[ps.id].label
        pba_conf += confusion(pred, gt, num_classes, ignore_index, ps.victim_mask)
    if victims == 0:
        raise ValueError("no victim pixels in the poisoned test set")
    pba, per_class = iou_from_confusion(pba_conf)

    stealth_summary = {}
    st = [stealth(clean_by_id[p.id].image, p.image) for p in poisoned_samples[:stealth_limit]]
    if st:
        finite_psnr = [x["psnr"] for x in st if not math.isinf(x["psnr"])]
        stealth_summary = {
            "psnr": float(np.mean(finite_psnr)) if finite_psnr else PSNR_IDENTICAL,
            "ssim": float(np.mean([x["ssim"] for x in st])),
            "perceptual": float(np.mean([x["perceptual"] for x in st])),
        }
    extra = {}
    if v_total:
        extra["asr_condition_violating"] = v_success / v_total
    if victim_class is not None:
        ious = untriggered_instance_ious(pois_pred, poisoned_samples, clean_by_id, victim_class)
        if ious:
            extra["untriggered_instance_iou"] = float(np.mean(ious))
            extra["n_untriggered_instances"] = len(ious)
    return EvalReport(
        asr=success / victims,
        pba=pba,
        cba=cba,
        per_class_iou=per_class.tolist(),
        stealth=stealth_summary,
        victim_pixel_count=victims,
        success_pixel_count=success,
        extra=extra,
    )
