"""Trigger representation, rendering and injection.

A trigger is described by five discrete attributes (shape, size, position
strategy, quantity, intensity) plus a fill color. The renderer is written in
torch so that the same code produces the concrete stencil and the relaxed,
probability-weighted stencil used during the search; with a one-hot relaxed
spec the two agree.

Coordinates are pixel centers: pixel ``(r, c)`` sits at ``(r, c)``. Shapes are
drawn with a one-pixel smoothstep edge, so stencils are exactly zero outside a
footprint and exactly ``intensity`` well inside it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

SHAPES = ("circle", "square", "triangle", "logo")
POSITIONS = ("object_center", "random_on_object", "random_outside_object", "background_region")
OBJECT_POSITIONS = POSITIONS[:3]
ATTRIBUTES = ("shape", "size", "position", "quantity", "intensity")

INTENSITIES = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
OBJECT_SIZES = (1 / 12, 1 / 10, 1 / 8, 1 / 6, 1 / 4, 1 / 2)

# search space per vector family
CANDIDATES = {
    "object": {
        "shape": SHAPES,
        "size": OBJECT_SIZES,
        "position": OBJECT_POSITIONS,
        "quantity": (1, 2, 3, 4, 5),
        "intensity": INTENSITIES,
    },
    "b2o": {
        "shape": SHAPES,
        "size": OBJECT_SIZES,
        "position": ("background_region",),
        "quantity": (1, 2, 3, 4, 5),
        "intensity": INTENSITIES,
    },
    "b2b": {
        "shape": SHAPES,
        "size": (0.005, 0.010, 0.015, 0.020, 0.025),
        "position": ("background_region",),
        "quantity": (1, 3, 5, 7, 10),
        "intensity": INTENSITIES,
    },
}


def candidate_family(vector: str) -> str:
    base = vector.upper().split("-")[-1]
    if base in ("O2O", "O2B"):
        return "object"
    if base == "B2O":
        return "b2o"
    if base == "B2B":
        return "b2b"
    raise ValueError(f"unknown attack vector {vector!r}")


def candidates_for(vector: str) -> dict[str, tuple]:
    return CANDIDATES[candidate_family(vector)]


@dataclass(frozen=True)
class TriggerSpec:
    shape: str = "square"
    size: float = 0.25
    position: str = "object_center"
    quantity: int = 1
    intensity: float = 0.8
    color: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if self.position not in POSITIONS:
            raise ValueError(f"unknown position strategy {self.position!r}")
        if not self.size > 0:
            raise ValueError(f"size must be positive, got {self.size}")
        if not 0.0 <= self.intensity <= 1.0:
            raise ValueError(f"intensity must be in [0, 1], got {self.intensity}")
        if int(self.quantity) != self.quantity or self.quantity < 1:
            raise ValueError(f"quantity must be a positive integer, got {self.quantity}")
        object.__setattr__(self, "quantity", int(self.quantity))
        object.__setattr__(self, "color", tuple(int(c) for c in self.color))

    def to_dict(self) -> dict:
        return {
            "shape": self.shape,
            "size": float(self.size),
            "position": self.position,
            "quantity": self.quantity,
            "intensity": float(self.intensity),
            "color": list(self.color),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TriggerSpec":
        d = dict(d)
        if "color" in d:
            d["color"] = tuple(d["color"])
        return cls(**d)

    def off_grid(self, vector: str) -> list[str]:
        """Attributes whose value is not one of the vector's search candidates."""
        cands = candidates_for(vector)
        out = []
        for attr in ATTRIBUTES:
            value = getattr(self, attr)
            options = cands[attr]
            if isinstance(value, float):
                hit = any(abs(value - o) < 1e-9 for o in options)
            else:
                hit = value in options
            if not hit:
                out.append(attr)
        return out


@dataclass
class RelaxedTriggerSpec:
    """Categorical probabilities over each attribute's candidate set."""

    family: str
    probs: dict[str, np.ndarray]
    temperature: float = 1.0
    color: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        cands = CANDIDATES[self.family]
        for attr in ATTRIBUTES:
            p = np.asarray(self.probs[attr], dtype=np.float64)
            if p.shape != (len(cands[attr]),):
                raise ValueError(f"{attr}: expected {len(cands[attr])} probabilities, got {p.shape}")
            if (p < 0).any() or abs(p.sum() - 1.0) > 1e-6:
                raise ValueError(f"{attr}: probabilities must be non-negative and sum to 1")
            self.probs[attr] = p

    @property
    def candidates(self) -> dict[str, tuple]:
        return CANDIDATES[self.family]

    @classmethod
    def uniform(cls, vector: str, temperature: float = 1.0, color=(0, 0, 0)) -> "RelaxedTriggerSpec":
        family = candidate_family(vector)
        probs = {a: np.full(len(v), 1.0 / len(v)) for a, v in CANDIDATES[family].items()}
        return cls(family, probs, temperature, tuple(color))

    @classmethod
    def one_hot(cls, vector: str, spec: TriggerSpec, temperature: float = 1.0) -> "RelaxedTriggerSpec":
        family = candidate_family(vector)
        probs = {}
        for attr, options in CANDIDATES[family].items():
            idx = _candidate_index(options, getattr(spec, attr))
            p = np.zeros(len(options))
            p[idx] = 1.0
            probs[attr] = p
        return cls(family, probs, temperature, spec.color)


def _candidate_index(options: Sequence, value) -> int:
    for i, o in enumerate(options):
        if (isinstance(o, float) and abs(o - value) < 1e-9) or o == value:
            return i
    raise ValueError(f"{value!r} is not among the candidates {options}")


def discretize(relaxed: RelaxedTriggerSpec) -> TriggerSpec:
    """Pick the most probable candidate per attribute; ties go to the lowest index."""
    chosen = {}
    for attr, options in relaxed.candidates.items():
        chosen[attr] = options[int(np.argmax(relaxed.probs[attr]))]
    return TriggerSpec(color=relaxed.color, **chosen)


# --------------------------------------------------------------------------
# anchors and placement


@dataclass
class Anchor:
    """Where a trigger may go: an object instance or a stuff region."""

    mask: np.ndarray
    kind: str = "object"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.kind not in ("object", "region"):
            raise ValueError(f"anchor kind must be 'object' or 'region', got {self.kind!r}")

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])

    def reference_width(self) -> float:
        if self.kind == "object":
            r0, c0, r1, c1 = self.bbox
            return float(c1 - c0 + 1)
        return float(self.mask.shape[1])


@dataclass
class TriggerPlacement:
    centers: list[tuple[float, float]]
    stencil_mask: np.ndarray
    anchors: list[Anchor] = field(default_factory=list)

    @property
    def footprint(self) -> np.ndarray:
        return self.stencil_mask > 0


def _check_anchors(strategy: str, anchors: Sequence[Anchor]) -> None:
    if strategy in OBJECT_POSITIONS:
        if not anchors or any(a.kind != "object" or not a.mask.any() for a in anchors):
            raise ValueError(f"no victim instance for object-relative position {strategy!r}")
    else:
        if not anchors or not any(a.mask.any() for a in anchors):
            raise ValueError("no victim region for background placement")


def resolve_centers(strategy: str, anchor: Anchor, count: int, seed: int, anchor_index: int = 0) -> np.ndarray:
    """Trigger centers for one anchor; copy ``k`` never depends on ``count``."""
    rng = np.random.default_rng([seed, POSITIONS.index(strategy), anchor_index])
    mask = anchor.mask
    h, w = mask.shape
    if strategy in ("object_center", "random_on_object"):
        pool = np.argwhere(mask)
    elif strategy == "random_outside_object":
        r0, c0, r1, c1 = anchor.bbox
        band = 2.0 * np.hypot(r1 - r0 + 1, c1 - c0 + 1)
        rr, cc = np.mgrid[0:h, 0:w]
        dr = np.maximum(np.maximum(r0 - rr, rr - r1), 0)
        dc = np.maximum(np.maximum(c0 - cc, cc - c1), 0)
        pool = np.argwhere((np.hypot(dr, dc) <= band) & ~mask)
    elif strategy == "background_region":
        pool = np.argwhere(mask)
    else:
        raise ValueError(f"unknown position strategy {strategy!r}")
    if len(pool) == 0:
        raise ValueError(f"no admissible pixel for position {strategy!r}")
    out = np.empty((count, 2), dtype=np.float64)
    for k in range(count):
        if k == 0 and strategy == "object_center":
            r0, c0, r1, c1 = anchor.bbox
            out[k] = ((r0 + r1) / 2.0, (c0 + c1) / 2.0)
        else:
            out[k] = pool[rng.integers(len(pool))]
    return out


# --------------------------------------------------------------------------
# rendering


@lru_cache(maxsize=1)
def logo_glyph() -> np.ndarray:
    text = resources.files("badseg").joinpath("assets/logo.txt").read_text()
    rows = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    return np.array([[ch == "#" for ch in row] for row in rows], dtype=np.float64)


def _smoothstep(signed_dist: torch.Tensor) -> torch.Tensor:
    t = (0.5 - signed_dist).clamp(0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def shape_coverage(shape: str, centers: torch.Tensor, size_px: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Coverage in [0, 1] of ``len(centers)`` copies of ``shape``, shape (N, h, w)."""
    dtype = size_px.dtype
    ys = torch.arange(h, dtype=dtype).view(1, h, 1)
    xs = torch.arange(w, dtype=dtype).view(1, 1, w)
    dy = ys - centers[:, 0].view(-1, 1, 1)
    dx = xs - centers[:, 1].view(-1, 1, 1)
    half = size_px / 2.0
    if shape == "circle":
        return _smoothstep(torch.sqrt(dy * dy + dx * dx) - half)
    if shape == "square":
        return _smoothstep(torch.maximum(dx.abs(), dy.abs()) - half)
    if shape == "triangle":
        # upright isosceles, base = height = size, centered on its bounding box
        bottom = dy - half
        sides = (dx.abs() - (dy + half) / 2.0) / np.sqrt(1.25)
        return _smoothstep(torch.maximum(bottom, sides))
    if shape == "logo":
        glyph = torch.as_tensor(logo_glyph(), dtype=dtype)
        gh, gw = glyph.shape
        n = centers.shape[0]
        gx = (dx / half).expand(n, h, w)
        gy = (dy / (half * gh / gw)).expand(n, h, w)
        grid = torch.stack([gx, gy], dim=-1)
        out = F.grid_sample(
            glyph.expand(n, 1, gh, gw), grid, mode="bilinear", padding_mode="zeros", align_corners=False
        )
        return out[:, 0].clamp(0.0, 1.0)
    raise ValueError(f"unknown shape {shape!r}")


def _union_by_quantity(cov: torch.Tensor) -> torch.Tensor:
    """(A, Q, h, w) per-copy coverage -> (Q, h, w) union of the first q copies over all anchors."""
    return torch.cummax(cov, dim=1).values.amax(dim=0)


def _render(shape, strategy, size_frac, quantity, canvas, anchors, seed, dtype=torch.float64):
    h, w = canvas
    covs, centers_all = [], []
    for ai, anchor in enumerate(anchors):
        centers = resolve_centers(strategy, anchor, quantity, seed, ai)
        centers_all.append(centers)
        size_px = size_frac * anchor.reference_width()
        covs.append(shape_coverage(shape, torch.as_tensor(centers, dtype=dtype), size_px, h, w))
    cov = _union_by_quantity(torch.stack(covs))
    return cov[quantity - 1], centers_all


def rasterize(spec: TriggerSpec, canvas: tuple[int, int], anchors, seed: int = 0) -> TriggerPlacement:
    if isinstance(anchors, Anchor):
        anchors = [anchors]
    anchors = list(anchors)
    _check_anchors(spec.position, anchors)
    size = torch.tensor(float(spec.size), dtype=torch.float64)
    cov, centers = _render(spec.shape, spec.position, size, spec.quantity, canvas, anchors, seed)
    stencil = (spec.intensity * cov).numpy()
    flat = [tuple(map(float, c)) for cs in centers for c in cs]
    return TriggerPlacement(flat, stencil, anchors)


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def gumbel_softmax(log_probs: torch.Tensor, noise, tau: float) -> torch.Tensor:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    noise = torch.zeros_like(log_probs) if noise is None else torch.as_tensor(noise, dtype=log_probs.dtype)
    return torch.softmax((noise + log_probs) / tau, dim=-1)


def relaxed_scalar(log_probs: torch.Tensor, noise, tau: float, values: Sequence[float]) -> torch.Tensor:
    """Eta-weighted mean of scalar candidates (size, intensity)."""
    eta = gumbel_softmax(log_probs, noise, tau)
    return (eta * torch.tensor(values, dtype=eta.dtype)).sum()


def relaxed_stencil(
    log_probs: Mapping[str, torch.Tensor],
    noise: Mapping[str, np.ndarray] | None,
    tau: float,
    family: str,
    canvas: tuple[int, int],
    anchors: Sequence[Anchor],
    seed: int = 0,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Differentiable stencil for a relaxed trigger.

    Scalar attributes (size, intensity) use the eta-weighted mean of their
    candidates; structural attributes (shape, position, quantity) superpose the
    candidate stencils with their eta weights.
    """
    cands = CANDIDATES[family]
    noise = noise or {}
    eta = {a: gumbel_softmax(log_probs[a], noise.get(a), tau) for a in ATTRIBUTES}
    dtype = eta["size"].dtype
    size_frac = (eta["size"] * torch.tensor(cands["size"], dtype=dtype)).sum()
    intensity = (eta["intensity"] * torch.tensor(cands["intensity"], dtype=dtype)).sum()
    quantities = cands["quantity"]
    qmax = max(quantities)
    q_index = torch.tensor([q - 1 for q in quantities])
    h, w = canvas
    anchors = list(anchors)

    total = torch.zeros((h, w), dtype=dtype)
    for p_i, strategy in enumerate(cands["position"]):
        _check_anchors(strategy, anchors)
        centers = [
            torch.as_tensor(resolve_centers(strategy, a, qmax, seed, ai), dtype=dtype) for ai, a in enumerate(anchors)
        ]
        widths = [a.reference_width() for a in anchors]
        for s_i, shape in enumerate(cands["shape"]):
            cov = torch.stack(
                [shape_coverage(shape, c, size_frac * wd, h, w) for c, wd in zip(centers, widths)]
            )
            per_q = _union_by_quantity(cov)[q_index]
            mixed = (eta["quantity"].view(-1, 1, 1) * per_q).sum(dim=0)
            total = total + eta["shape"][s_i] * eta["position"][p_i] * mixed
    return intensity * total.clamp(0.0, 1.0), eta


def rasterize_relaxed(
    relaxed: RelaxedTriggerSpec,
    gumbel_noise: Mapping[str, np.ndarray] | None,
    canvas: tuple[int, int],
    anchors,
    seed: int = 0,
) -> tuple[TriggerPlacement, dict[str, np.ndarray]]:
    if isinstance(anchors, Anchor):
        anchors = [anchors]
    anchors = list(anchors)
    log_probs = {
        a: torch.log(torch.as_tensor(relaxed.probs[a], dtype=torch.float64).clamp_min(1e-300)) for a in ATTRIBUTES
    }
    with torch.no_grad():
        stencil, eta = relaxed_stencil(
            log_probs, gumbel_noise, relaxed.temperature, relaxed.family, canvas, anchors, seed
        )
    eta_np = {a: v.numpy() for a, v in eta.items()}
    cands = relaxed.candidates
    strategy = cands["position"][int(np.argmax(eta_np["position"]))]
    quantity = cands["quantity"][int(np.argmax(eta_np["quantity"]))]
    centers = [tuple(map(float, c)) for ai, a in enumerate(anchors) for c in resolve_centers(strategy, a, quantity, seed, ai)]
    return TriggerPlacement(centers, stencil.numpy(), anchors), eta_np


# --------------------------------------------------------------------------
# injection


def inject(image: np.ndarray, placement, color=(0, 0, 0)) -> np.ndarray:
    """Alpha-blend ``color`` into ``image`` through the placement's stencil.

    ``color`` is given on the 0-255 scale; float images are assumed to be in
    [0, 1]. Pixels with a zero stencil are returned unchanged.
    """
    stencil = placement.stencil_mask if isinstance(placement, TriggerPlacement) else np.asarray(placement)
    if stencil.shape != image.shape[:2]:
        raise ValueError(f"stencil {stencil.shape} does not match image {image.shape[:2]}")
    m = stencil[..., None].astype(np.float64)
    color = np.asarray(color, dtype=np.float64)
    if image.dtype == np.uint8:
        out = (1.0 - m) * image + m * color
        out = np.clip(np.rint(out), 0, 255).astype(np.uint8)
    else:
        out = (1.0 - m) * image + m * (color / 255.0)
        out = out.astype(image.dtype)
    keep = stencil == 0
    out[keep] = image[keep]
    return out


def inject_tensor(images: torch.Tensor, stencils: torch.Tensor, color=(0, 0, 0)) -> torch.Tensor:
    """Differentiable blend for (B, 3, H, W) images in [0, 1] and (B, H, W) stencils."""
    c = torch.as_tensor(color, dtype=images.dtype).view(1, 3, 1, 1) / 255.0
    m = stencils.unsqueeze(1).to(images.dtype)
    return (1.0 - m) * images + m * c
