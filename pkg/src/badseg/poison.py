"""Poisoned-set assembly: trigger injection plus label manipulation per sample."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DatasetSplit, Sample
from .labelops import AttackSpec, extract_instances, manipulate, scope_masks
from .trigger import Anchor, TriggerPlacement, TriggerSpec, inject, rasterize

log = logging.getLogger(__name__)


def sample_seed(seed: int, sample_id: str) -> int:
    return (int(seed) * 1_000_003 + zlib.crc32(sample_id.encode())) % (2**32)


def build_anchors(label: np.ndarray, attack: AttackSpec) -> list[Anchor]:
    """Instances (object victims) or the victim region (stuff victims) that carry triggers."""
    victim = label == attack.victim
    if not victim.any():
        return []
    if attack.object_victim:
        instances = extract_instances(label, attack.victim)
        if attack.is_instance and attack.instance_limit != "all":
            instances = instances[: int(attack.instance_limit)]
        return [Anchor(m, "object") for m in instances]
    return [Anchor(victim, "region")]


@dataclass
class PoisonedSample:
    image: np.ndarray
    label: np.ndarray
    placement: TriggerPlacement
    victim_mask: np.ndarray
    violating_mask: np.ndarray
    id: str


def poison_sample(sample: Sample, attack: AttackSpec, trigger: TriggerSpec, seed: int = 0) -> PoisonedSample:
    anchors = build_anchors(sample.label, attack)
    if not anchors:
        raise ValueError(f"sample {sample.id}: no victim pixels")
    placement = rasterize(trigger, sample.label.shape, anchors, sample_seed(seed, sample.id))
    image = inject(sample.image, placement, trigger.color)
    scoped, violating = scope_masks(sample.label, attack, placement, sample.image)
    target = manipulate(sample.label, attack, placement, sample.image)
    return PoisonedSample(image, target, placement, scoped, violating, sample.id)


def is_eligible(sample: Sample, attack: AttackSpec) -> bool:
    return bool((sample.label == attack.victim).any())


@dataclass
class PoisonedSet:
    samples: list[Sample]
    poisoned: list[bool]
    skipped: list[str] = field(default_factory=list)

    def manifest(self) -> list[dict]:
        return [{"id": s.id, "poisoned": p} for s, p in zip(self.samples, self.poisoned)]

    @property
    def n_poisoned(self) -> int:
        return int(sum(self.poisoned))


def poison_split(split: DatasetSplit, attack: AttackSpec, trigger: TriggerSpec, seed: int = 0) -> PoisonedSet:
    """Training set for the victim: clean part as-is, triggered part poisoned.

    Triggered-pool samples without any victim pixel stay clean and are listed
    in ``skipped``.
    """
    chosen = {s.id for s in split.triggered_pool}
    samples, flags, skipped = [], [], []
    for s in split.target:
        if s.id in chosen and is_eligible(s, attack):
            p = poison_sample(s, attack, trigger, seed)
            samples.append(Sample(p.image, p.label, s.id))
            flags.append(True)
        else:
            if s.id in chosen:
                skipped.append(s.id)
            samples.append(s)
            flags.append(False)
    if skipped:
        log.info("%d triggered-pool samples have no victim pixels and stay clean", len(skipped))
    return PoisonedSet(samples, flags, skipped)


def poison_all(samples: Sequence[Sample], attack: AttackSpec, trigger: TriggerSpec, seed: int = 0) -> list[PoisonedSample]:
    return [poison_sample(s, attack, trigger, seed) for s in samples if is_eligible(s, attack)]
