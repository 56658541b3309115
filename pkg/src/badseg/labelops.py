"""Attack specifications and construction of the target label map."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from matplotlib.colors import rgb_to_hsv
from scipy import ndimage

from .data import ClassTaxonomy
from .trigger import TriggerPlacement

COARSE = ("O2O", "O2B", "B2O", "B2B")
VECTORS = COARSE + ("INS-O2O", "INS-O2B", "CON-O2O", "CON-O2B", "CON-B2O", "CON-B2B")
# parseable so that validation can say why they are rejected
NOT_APPLICABLE = ("INS-B2O", "INS-B2B")

# (victim kind, target kind) per coarse vector
KINDS = {
    "O2O": ("object", "object"),
    "O2B": ("object", "stuff"),
    "B2O": ("stuff", "object"),
    "B2B": ("stuff", "stuff"),
}
EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ConditionPredicate:
    """HSV box test: hue interval in degrees (may wrap past 360) plus floors."""

    kind: str = "color_hue"
    hue_range: tuple[float, float] = (330.0, 30.0)
    sat_min: float = 0.4
    val_min: float = 0.3
    min_fraction: float = 0.5

    def __post_init__(self):
        if self.kind != "color_hue":
            raise ValueError(f"unsupported condition kind {self.kind!r}")
        lo, hi = self.hue_range
        if not (0 <= lo < 360 and 0 <= hi < 360):
            raise ValueError(f"hue interval must lie in [0, 360), got {self.hue_range}")
        if not 0 < self.min_fraction <= 1:
            raise ValueError(f"min_fraction must be in (0, 1], got {self.min_fraction}")
        object.__setattr__(self, "hue_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hue_range": list(self.hue_range),
            "sat_min": self.sat_min,
            "val_min": self.val_min,
            "min_fraction": self.min_fraction,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConditionPredicate":
        d = dict(d)
        if "hue_range" in d:
            d["hue_range"] = tuple(d["hue_range"])
        return cls(**d)


RED = ConditionPredicate()


@dataclass(frozen=True)
class RegionStencil:
    """Region painted with the target class around each B2O trigger."""

    shape: str = "rectangle"
    width_fraction: float = 0.25
    aspect: float = 2.0

    def __post_init__(self):
        if self.shape not in ("rectangle", "ellipse"):
            raise ValueError(f"unknown region stencil {self.shape!r}")
        if not self.width_fraction > 0 or not self.aspect > 0:
            raise ValueError("region width_fraction and aspect must be positive")

    def render(self, canvas: tuple[int, int], centers) -> np.ndarray:
        h, w = canvas
        half_w = self.width_fraction * w / 2.0
        half_h = half_w / self.aspect
        rr, cc = np.mgrid[0:h, 0:w]
        out = np.zeros((h, w), dtype=bool)
        for r, c in centers:
            if self.shape == "rectangle":
                out |= (np.abs(rr - r) <= half_h) & (np.abs(cc - c) <= half_w)
            else:
                out |= ((rr - r) / half_h) ** 2 + ((cc - c) / half_w) ** 2 <= 1.0
        return out

    def to_dict(self) -> dict:
        return {"shape": self.shape, "width_fraction": self.width_fraction, "aspect": self.aspect}


@dataclass(frozen=True)
class AttackSpec:
    vector: str
    victim: int
    target: int
    instance_limit: int | str = "all"
    condition: ConditionPredicate | None = None
    b2o_region: RegionStencil = field(default_factory=RegionStencil)

    def __post_init__(self):
        v = self.vector.upper()
        if v not in VECTORS + NOT_APPLICABLE:
            raise ValueError(f"unknown attack vector {self.vector!r}")
        object.__setattr__(self, "vector", v)
        if self.instance_limit != "all" and (int(self.instance_limit) != self.instance_limit or self.instance_limit < 1):
            raise ValueError(f"instance_limit must be 'all' or a positive integer, got {self.instance_limit!r}")
        if self.is_conditional and self.condition is None:
            object.__setattr__(self, "condition", RED)

    @property
    def base(self) -> str:
        return self.vector.split("-")[-1]

    @property
    def is_instance(self) -> bool:
        return self.vector.startswith("INS-")

    @property
    def is_conditional(self) -> bool:
        return self.vector.startswith("CON-")

    @property
    def object_victim(self) -> bool:
        return KINDS[self.base][0] == "object"

    def diagnostics(self, taxonomy: ClassTaxonomy) -> list[str]:
        out = []
        k = taxonomy.num_classes
        for role, cid in (("victim", self.victim), ("target", self.target)):
            if not 0 <= cid < k:
                out.append(f"{role} class {cid} does not exist in the taxonomy")
        if out:
            return out
        if self.victim == self.target:
            out.append("victim and target must differ")
        vk, tk = KINDS[self.base]
        if self.is_instance and taxonomy.kind(self.victim) != "object":
            out.append("Instance-Level not applicable to stuff victims")
        elif taxonomy.kind(self.victim) != vk:
            out.append(f"victim must be {vk} class for {self.base}")
        if taxonomy.kind(self.target) != tk:
            out.append(f"target must be {tk} class for {self.base}")
        return out

    def check(self, taxonomy: ClassTaxonomy) -> None:
        problems = self.diagnostics(taxonomy)
        if problems:
            raise ValueError("; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "vector": self.vector,
            "victim": self.victim,
            "target": self.target,
            "instance_limit": self.instance_limit,
            "condition": None if self.condition is None else self.condition.to_dict(),
            "b2o_region": self.b2o_region.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping, taxonomy: ClassTaxonomy | None = None) -> "AttackSpec":
        victim, target = d["victim"], d["target"]
        if taxonomy is not None:
            victim, target = taxonomy.resolve(victim), taxonomy.resolve(target)
        cond = d.get("condition")
        return cls(
            vector=d["vector"],
            victim=int(victim),
            target=int(target),
            instance_limit=d.get("instance_limit", "all"),
            condition=None if cond is None else ConditionPredicate.from_dict(cond),
            b2o_region=RegionStencil(**d.get("b2o_region", {})),
        )


def extract_instances(label: np.ndarray, class_id: int, taxonomy: ClassTaxonomy | None = None) -> list[np.ndarray]:
    """8-connected components of ``class_id``, largest first, ties by raster order."""
    if taxonomy is not None and not taxonomy.is_object(class_id):
        raise ValueError("instances undefined for stuff classes")
    comp, n = ndimage.label(label == class_id, structure=EIGHT)
    if n == 0:
        return []
    flat = comp.ravel()
    areas = np.bincount(flat, minlength=n + 1)[1:]
    nz = np.flatnonzero(flat)
    first = np.full(n + 1, flat.size)
    np.minimum.at(first, flat[nz], nz)
    order = sorted(range(1, n + 1), key=lambda i: (-areas[i - 1], first[i]))
    return [comp == i for i in order]


def eval_condition(image: np.ndarray, mask: np.ndarray, predicate: ConditionPredicate) -> bool:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("condition needs a non-empty instance mask")
    rgb = image[mask].astype(np.float64)
    if image.dtype == np.uint8:
        rgb = rgb / 255.0
    hsv = rgb_to_hsv(np.clip(rgb, 0.0, 1.0))
    hue = hsv[:, 0] * 360.0
    lo, hi = predicate.hue_range
    in_hue = (hue >= lo) & (hue <= hi) if lo <= hi else (hue >= lo) | (hue <= hi)
    ok = in_hue & (hsv[:, 1] >= predicate.sat_min) & (hsv[:, 2] >= predicate.val_min)
    return bool(ok.mean() >= predicate.min_fraction)


def _triggered_instances(label, spec: AttackSpec, placement: TriggerPlacement) -> list[np.ndarray]:
    object_anchors = [a.mask for a in placement.anchors if a.kind == "object"]
    if object_anchors:
        return object_anchors
    footprint = placement.footprint
    return [m for m in extract_instances(label, spec.victim) if (m & footprint).any()]


def scope_masks(
    label: np.ndarray, spec: AttackSpec, placement: TriggerPlacement, image: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Pixels to relabel, and triggered victim pixels whose condition fails.

    The first mask is also the ASR victim set for the attack; the second is
    empty except for Conditional attacks.
    """
    victim = label == spec.victim
    empty = np.zeros_like(victim)
    if spec.base == "B2O":
        region = spec.b2o_region.render(label.shape, placement.centers) & victim
        scoped = region
    elif spec.base == "B2B":
        scoped = victim
    elif spec.is_instance:
        scoped = np.zeros_like(victim)
        for m in _triggered_instances(label, spec, placement):
            scoped |= m & victim
    elif spec.is_conditional:
        scoped = np.zeros_like(victim)
        for m in _triggered_instances(label, spec, placement):
            scoped |= m & victim
    else:
        scoped = victim

    if not spec.is_conditional:
        return scoped, empty
    if image is None:
        raise ValueError("conditional attacks need the image to evaluate the predicate")
    if spec.object_victim:
        keep, fail = np.zeros_like(victim), np.zeros_like(victim)
        for m in extract_instances(np.where(scoped, spec.victim, -1), spec.victim):
            if eval_condition(image, m, spec.condition):
                keep |= m
            else:
                fail |= m
        return keep, fail
    if scoped.any() and eval_condition(image, victim, spec.condition):
        return scoped, empty
    return empty, scoped


def manipulate(
    label: np.ndarray,
    spec: AttackSpec,
    placement: TriggerPlacement,
    image: np.ndarray | None = None,
    strict: bool = True,
) -> np.ndarray:
    """Build the target label map for a triggered sample.

    With ``strict`` a label without any victim pixel is an error; otherwise it
    is returned unchanged, which makes the operation idempotent.
    """
    if strict and not (label == spec.victim).any():
        raise ValueError("no victim pixels")
    scoped, _ = scope_masks(label, spec, placement, image)
    out = label.copy()
    out[scoped] = spec.target
    return out
