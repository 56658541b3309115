"""Datasets, class taxonomy, splits and the synthetic scene generator.

Images are ``H x W x 3`` ``uint8`` arrays, labels are ``H x W`` integer class
maps. On disk a dataset is a directory with ``images/<id>.png`` and
``labels/<id>.png`` (single channel, one class id per pixel).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml
from PIL import Image

OBJECT = "object"
STUFF = "stuff"
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    kind: str


@dataclass(frozen=True)
class ClassTaxonomy:
    classes: tuple[ClassInfo, ...]
    ignore_index: int = 255

    def __post_init__(self):
        ids = [c.class_id for c in self.classes]
        if ids != list(range(len(ids))):
            raise ValueError(f"class ids must be dense 0..K-1 in order, got {ids}")
        for c in self.classes:
            if c.kind not in (OBJECT, STUFF):
                raise ValueError(f"class {c.name!r}: kind must be 'object' or 'stuff', got {c.kind!r}")
        if 0 <= self.ignore_index < len(self.classes):
            raise ValueError(f"ignore_index {self.ignore_index} collides with a class id")

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def kind(self, class_id: int) -> str:
        return self.classes[class_id].kind

    def is_object(self, class_id: int) -> bool:
        return self.kind(class_id) == OBJECT

    def names(self) -> list[str]:
        return [c.name for c in self.classes]

    def resolve(self, ref) -> int:
        """Map a class name or integer id to a class id."""
        if isinstance(ref, (int, np.integer)):
            if not 0 <= int(ref) < self.num_classes:
                raise ValueError(f"unknown class id {ref}")
            return int(ref)
        for c in self.classes:
            if c.name == ref:
                return c.class_id
        raise ValueError(f"unknown class {ref!r}")

    def object_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if c.kind == OBJECT]

    def stuff_ids(self) -> list[int]:
        return [c.class_id for c in self.classes if c.kind == STUFF]

    def to_dict(self) -> dict:
        return {
            "ignore_index": self.ignore_index,
            "classes": [{"id": c.class_id, "name": c.name, "kind": c.kind} for c in self.classes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassTaxonomy":
        entries = sorted(d["classes"], key=lambda e: e["id"])
        classes = tuple(ClassInfo(int(e["id"]), str(e["name"]), str(e["kind"])) for e in entries)
        return cls(classes, int(d.get("ignore_index", 255)))

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "ClassTaxonomy":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


@dataclass
class Sample:
    image: np.ndarray
    label: np.ndarray
    id: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"sample {self.id}: image must be H x W x 3, got {self.image.shape}")
        if self.image.shape[:2] != self.label.shape:
            raise ValueError(
                f"sample {self.id}: image {self.image.shape[:2]} and label {self.label.shape} differ in size"
            )


@dataclass
class DatasetSplit:
    target: list[Sample]
    triggered_pool: list[Sample]
    clean: list[Sample]
    auxiliary: list[Sample] = field(default_factory=list)

    @property
    def surrogate(self) -> list[Sample]:
        return list(self.triggered_pool) + list(self.auxiliary)


def check_labels(samples: Iterable[Sample], taxonomy: ClassTaxonomy) -> None:
    k = taxonomy.num_classes
    for s in samples:
        bad = (s.label >= k) & (s.label != taxonomy.ignore_index) | (s.label < 0)
        if bad.any():
            value = int(s.label[bad][0])
            raise ValueError(f"sample {s.id}: invalid class index {value}")


def _index_files(directory: Path) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    return {p.stem: p for p in sorted(directory.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def load_dataset(root, taxonomy: ClassTaxonomy) -> list[Sample]:
    root = Path(root)
    images = _index_files(root / "images")
    labels = _index_files(root / "labels")
    for stem in sorted(set(images) ^ set(labels)):
        side = "label" if stem in images else "image"
        raise FileNotFoundError(f"missing {side} file for stem {stem!r}")
    samples = []
    for stem in sorted(images):
        img = np.asarray(Image.open(images[stem]).convert("RGB"), dtype=np.uint8)
        lab = np.asarray(Image.open(labels[stem]), dtype=np.int64)
        if lab.ndim != 2:
            raise ValueError(f"sample {stem}: label file must be single channel")
        samples.append(Sample(img, lab, stem))
    check_labels(samples, taxonomy)
    return samples


def save_dataset(samples: Sequence[Sample], root, taxonomy: ClassTaxonomy | None = None) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(np.ascontiguousarray(s.image, dtype=np.uint8)).save(root / "images" / f"{s.id}.png")
        save_label(s.label, root / "labels" / f"{s.id}.png")
    if taxonomy is not None:
        taxonomy.save(root / "taxonomy.yaml")


def save_label(label: np.ndarray, path) -> None:
    if label.min() < 0 or label.max() > 255:
        raise ValueError("label values must fit in 8 bits for index-encoded PNG")
    Image.fromarray(label.astype(np.uint8), mode="L").save(path)


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class SyntheticConfig:
    n_samples: int
    height: int = 64
    width: int = 64
    num_classes: int = 4
    seed: int = 0
    id_prefix: str = "syn"
    red_fraction: float = 0.5
    max_instances: int = 2
    noise_std: float = 6.0


DEFAULT_NAMES = {4: ["road", "sidewalk", "car", "person"]}

# base RGB colors; obj-A alternates between a red and a non-red palette
STUFF_COLORS = [(105, 105, 105), (165, 145, 120), (80, 120, 160), (140, 170, 110)]
OBJECT_COLORS = [(200, 35, 35), (60, 170, 70), (200, 190, 60), (150, 80, 170)]
OBJ_A_ALT_COLOR = (40, 75, 195)


def synthetic_taxonomy(num_classes: int = 4) -> ClassTaxonomy:
    if num_classes < 4:
        raise ValueError("synthetic taxonomy needs K >= 4 (two object and two stuff classes)")
    n_stuff = num_classes // 2
    names = DEFAULT_NAMES.get(num_classes)
    classes = []
    for k in range(num_classes):
        kind = STUFF if k < n_stuff else OBJECT
        if names:
            name = names[k]
        else:
            name = f"stuff-{k}" if kind == STUFF else f"obj-{k - n_stuff}"
        classes.append(ClassInfo(k, name, kind))
    return ClassTaxonomy(tuple(classes))


def _palette(base: Sequence, index: int, rng_seed: int = 1234) -> np.ndarray:
    if index < len(base):
        return np.array(base[index], dtype=np.float64)
    rng = np.random.default_rng([rng_seed, index])
    return rng.uniform(40, 215, size=3)


def _stuff_layout(rng, h, w, n_stuff) -> np.ndarray:
    """Horizontal bands with wavy boundaries, one band per stuff class."""
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    layout = np.zeros((h, w), dtype=np.int64)
    cuts = np.sort(rng.uniform(0.3, 0.7, size=n_stuff - 1))
    for i, cut in enumerate(cuts):
        amp = rng.uniform(0.0, 0.06) * h
        freq = rng.uniform(0.5, 2.0) * 2 * np.pi / w
        phase = rng.uniform(0, 2 * np.pi)
        boundary = cut * h + amp * np.sin(freq * cols + phase)
        layout[rows >= boundary] = i + 1
    # band 0 is the top of the image; class 0 is the bottom band
    return (n_stuff - 1) - layout


def _blob(rng, h, w, bh, bw) -> tuple[np.ndarray, tuple[int, int]]:
    top = int(rng.integers(1, h - bh))
    left = int(rng.integers(1, w - bw))
    yy, xx = np.mgrid[0:bh, 0:bw]
    if rng.random() < 0.5:
        cy, cx = (bh - 1) / 2, (bw - 1) / 2
        shape = ((yy - cy) / (bh / 2)) ** 2 + ((xx - cx) / (bw / 2)) ** 2 <= 1.0
    else:
        shape = np.ones((bh, bw), dtype=bool)
    return shape, (top, left)


def _synthetic_sample(cfg: SyntheticConfig, index: int) -> Sample:
    rng = np.random.default_rng([cfg.seed, index])
    h, w, k = cfg.height, cfg.width, cfg.num_classes
    n_stuff = k // 2
    object_ids = list(range(n_stuff, k))

    label = _stuff_layout(rng, h, w, n_stuff)
    image = np.zeros((h, w, 3), dtype=np.float64)
    for s in range(n_stuff):
        color = _palette(STUFF_COLORS, s) + rng.uniform(-10, 10, size=3)
        image[label == s] = color

    occupied = np.zeros((h, w), dtype=bool)
    for j, cid in enumerate(object_ids):
        n_inst = int(rng.integers(1, cfg.max_instances + 1)) if j == 0 else 1
        for _ in range(n_inst):
            for _attempt in range(50):
                bw = int(rng.integers(int(0.22 * w), int(0.36 * w) + 1))
                bh = int(np.clip(round(bw * rng.uniform(0.7, 1.2)), 6, h - 3))
                shape, (top, left) = _blob(rng, h, w, bh, bw)
                mask = np.zeros((h, w), dtype=bool)
                mask[top:top + bh, left:left + bw] = shape
                # two-pixel moat so instances never touch under 8-connectivity
                grown = np.zeros_like(mask)
                grown[max(top - 2, 0):top + bh + 2, max(left - 2, 0):left + bw + 2] = True
                if not (grown & occupied).any():
                    break
            else:
                continue
            if j == 0 and rng.random() >= cfg.red_fraction:
                base = np.array(OBJ_A_ALT_COLOR, dtype=np.float64)
            else:
                base = _palette(OBJECT_COLORS, j)
            color = base + rng.uniform(-15, 15, size=3)
            label[mask] = cid
            image[mask] = color
            occupied |= mask

    image += rng.normal(0.0, cfg.noise_std, size=image.shape)
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return Sample(image, label, f"{cfg.id_prefix}{index:05d}")


def make_synthetic(config: SyntheticConfig) -> list[Sample]:
    if config.num_classes < 4:
        raise ValueError("make_synthetic needs K >= 4: at least two object and two stuff classes")
    if config.height < 32 or config.width < 32:
        raise ValueError("make_synthetic needs H, W >= 32")
    return [_synthetic_sample(config, i) for i in range(config.n_samples)]


# --------------------------------------------------------------------------
# splits


def split(
    dataset: Sequence[Sample],
    poison_rate: float,
    aux_fraction: float = 0.0,
    seed: int = 0,
    aux_pool: Sequence[Sample] = (),
) -> DatasetSplit:
    """Partition ``dataset`` into triggered and clean parts and draw ``D_aux``.

    The auxiliary set comes from ``aux_pool`` (held-out data of the same
    distribution) and never from ``dataset`` itself.
    """
    if not 0.0 <= poison_rate <= 1.0:
        raise ValueError(f"poison_rate must be in [0, 1], got {poison_rate}")
    if not 0.0 <= aux_fraction:
        raise ValueError(f"aux_fraction must be non-negative, got {aux_fraction}")
    if len(dataset) == 0:
        raise ValueError("cannot split an empty dataset")
    n = len(dataset)
    n_t = int(math.floor(poison_rate * n + 0.5))
    rng = np.random.default_rng([seed, 1])
    order = rng.permutation(n)
    chosen = set(order[:n_t].tolist())
    triggered = [dataset[i] for i in range(n) if i in chosen]
    clean = [dataset[i] for i in range(n) if i not in chosen]

    ids = {s.id for s in dataset}
    pool = [s for s in aux_pool if s.id not in ids]
    n_aux = int(math.floor(aux_fraction * n + 0.5))
    if n_aux > len(pool):
        raise ValueError(f"aux_fraction {aux_fraction} needs {n_aux} held-out samples, pool has {len(pool)}")
    aux_rng = np.random.default_rng([seed, 2])
    aux_idx = sorted(aux_rng.choice(len(pool), size=n_aux, replace=False).tolist()) if n_aux else []
    auxiliary = [pool[i] for i in aux_idx]
    return DatasetSplit(list(dataset), triggered, clean, auxiliary)
