"""Gumbel-Softmax search over the discrete trigger space against a surrogate."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import Sample
from .labelops import AttackSpec, manipulate
from .model import IGNORE_INDEX, label_tensor, log_confidence, to_tensor
from .poison import build_anchors, is_eligible, sample_seed
from .trigger import (
    ATTRIBUTES,
    CANDIDATES,
    RelaxedTriggerSpec,
    TriggerPlacement,
    TriggerSpec,
    candidate_family,
    discretize,
    inject_tensor,
    relaxed_stencil,
    resolve_centers,
    sample_gumbel,
)

log = logging.getLogger(__name__)


class SearchDiverged(RuntimeError):
    pass


@dataclass
class SearchConfig:
    steps: int = 300
    tau_start: float = 1.0
    tau_end: float = 0.1
    step_size: float = 0.1
    seed: int = 0
    batch_size: int = 8

    def __post_init__(self):
        if not self.tau_start >= self.tau_end > 0:
            raise ValueError("need tau_start >= tau_end > 0")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SearchState:
    logits: dict[str, np.ndarray]
    temperature: float
    step: int = 0
    loss_history: list[float] = field(default_factory=list)

    def relaxed(self, family: str, color=(0, 0, 0)) -> RelaxedTriggerSpec:
        probs = {a: _softmax(v) for a, v in self.logits.items()}
        return RelaxedTriggerSpec(family, probs, self.temperature, tuple(color))


def _softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - v.max())
    return e / e.sum()


def anneal(tau_start: float, tau_end: float, step: int, steps: int) -> float:
    """Exponential interpolation from tau_start (step 0) to tau_end (step == steps)."""
    if steps <= 0:
        return tau_start
    return tau_start * (tau_end / tau_start) ** (step / steps)


def surrogate_loss(
    surrogate: nn.Module,
    images: torch.Tensor,
    targets: torch.Tensor,
    stencils: torch.Tensor | None = None,
    color=(0, 0, 0),
    ignore_index: int = IGNORE_INDEX,
) -> torch.Tensor:
    """Mean pixel cross-entropy of the surrogate on triggered images against y^t.

    The mean is pooled over every non-ignored pixel of the batch.
    """
    x = images if stencils is None else inject_tensor(images, stencils, color)
    lc, _ = log_confidence(surrogate, x)
    valid = targets != ignore_index
    if not valid.any():
        raise ValueError("no valid pixels for the surrogate loss")
    nll = -lc.gather(1, targets.clamp(0, lc.shape[1] - 1).unsqueeze(1)).squeeze(1)
    return nll[valid].mean()


def init_logits(vector: str, spec: TriggerSpec | None = None, scale: float = 10.0) -> dict[str, np.ndarray]:
    """Zero logits (uniform), or logits peaked on ``spec``'s candidates."""
    family = candidate_family(vector)
    if spec is None:
        return {a: np.zeros(len(c)) for a, c in CANDIDATES[family].items()}
    one_hot = RelaxedTriggerSpec.one_hot(vector, spec).probs
    return {a: scale * p for a, p in one_hot.items()}


def _model_dtype(model: nn.Module) -> torch.dtype:
    for p in model.parameters():
        return p.dtype
    return torch.float64


class _Prepared:
    """Per-sample anchors, fixed target maps and tensors for the search."""

    def __init__(self, samples: Sequence[Sample], attack: AttackSpec, dtype):
        self.samples = [s for s in samples if is_eligible(s, attack)]
        if not self.samples:
            raise ValueError("no surrogate sample contains the victim class")
        self.attack = attack
        self.anchors = [build_anchors(s.label, attack) for s in self.samples]
        self.images = to_tensor(np.stack([s.image for s in self.samples])).to(dtype)
        self.canvas = self.samples[0].label.shape
        # y^t does not depend on the trigger except for B2O, where the
        # relabeled region follows the trigger centers
        self.fixed_targets = None
        if attack.base != "B2O":
            maps = []
            for s, anchors in zip(self.samples, self.anchors):
                placement = TriggerPlacement([], np.zeros(self.canvas), anchors)
                maps.append(manipulate(s.label, attack, placement, s.image))
            self.fixed_targets = label_tensor(np.stack(maps))

    def targets(self, idx, seeds, family, logits) -> torch.Tensor:
        if self.fixed_targets is not None:
            return self.fixed_targets[idx]
        cands = CANDIDATES[family]
        strategy = cands["position"][int(np.argmax(logits["position"]))]
        quantity = cands["quantity"][int(np.argmax(logits["quantity"]))]
        maps = []
        for i, seed in zip(idx, seeds):
            s = self.samples[i]
            centers = [
                tuple(c) for ai, a in enumerate(self.anchors[i]) for c in resolve_centers(strategy, a, quantity, seed, ai)
            ]
            placement = TriggerPlacement(centers, np.zeros(self.canvas), self.anchors[i])
            maps.append(manipulate(s.label, self.attack, placement, s.image))
        return label_tensor(np.stack(maps))


def search(
    surrogate: nn.Module,
    samples: Sequence[Sample],
    attack: AttackSpec,
    config: SearchConfig,
    initial: Mapping[str, np.ndarray] | None = None,
    color=(0, 0, 0),
    on_step: Callable[[dict], None] | None = None,
) -> tuple[TriggerSpec, SearchState]:
    """Optimize attribute logits so triggered surrogate inputs predict y^t.

    Each step draws one Gumbel noise vector per attribute, renders the relaxed
    trigger on a minibatch, and takes an Adam step on the logits. The
    surrogate's weights are left untouched.
    """
    family = candidate_family(attack.vector)
    dtype = _model_dtype(surrogate)
    data = _Prepared(samples, attack, dtype)
    logits = {
        a: torch.tensor(np.asarray((initial or init_logits(attack.vector))[a], dtype=np.float64), dtype=dtype, requires_grad=True)
        for a in ATTRIBUTES
    }
    state = SearchState({a: v.detach().numpy().copy() for a, v in logits.items()}, config.tau_start)
    if config.steps == 0:
        return discretize(state.relaxed(family, color)), state

    opt = torch.optim.Adam(list(logits.values()), lr=config.step_size)
    saved = [p.requires_grad for p in surrogate.parameters()]
    surrogate.requires_grad_(False)
    surrogate.eval()
    rng = np.random.default_rng(config.seed)
    n = len(data.samples)
    try:
        for step in range(config.steps):
            tau = anneal(config.tau_start, config.tau_end, step, config.steps)
            idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
            noise = {a: sample_gumbel(len(logits[a]), rng) for a in ATTRIBUTES}
            seeds = [sample_seed(config.seed + step, data.samples[i].id) for i in idx]
            log_probs = {a: torch.log_softmax(v, dim=0) for a, v in logits.items()}
            stencils = torch.stack(
                [
                    relaxed_stencil(log_probs, noise, tau, family, data.canvas, data.anchors[i], seed)[0]
                    for i, seed in zip(idx, seeds)
                ]
            ).to(dtype)
            targets = data.targets(idx, seeds, family, state.logits)
            loss = surrogate_loss(surrogate, data.images[idx], targets, stencils, color)
            if not torch.isfinite(loss):
                raise SearchDiverged(f"non-finite surrogate loss at step {step} (tau={tau:.4g})")
            opt.zero_grad()
            loss.backward()
            grad_norm = {a: float(v.grad.norm()) for a, v in logits.items()}
            opt.step()
            state.step = step + 1
            state.temperature = tau
            state.loss_history.append(float(loss.detach()))
            state.logits = {a: v.detach().numpy().copy() for a, v in logits.items()}
            if not all(np.isfinite(v).all() for v in state.logits.values()):
                raise SearchDiverged(f"non-finite logits at step {step} (tau={tau:.4g})")
            if on_step is not None:
                cands = CANDIDATES[family]
                on_step(
                    {
                        "step": step,
                        "tau": tau,
                        "loss": state.loss_history[-1],
                        "argmax": {a: cands[a][int(np.argmax(state.logits[a]))] for a in ATTRIBUTES},
                        "grad_norm": grad_norm,
                    }
                )
    finally:
        for p, flag in zip(surrogate.parameters(), saved):
            p.requires_grad_(flag)
    state.temperature = config.tau_end
    return discretize(state.relaxed(family, color)), state


class JsonlLog:
    """Line-oriented structured log of search steps."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(_plain(record), sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, float)):
        return round(float(obj), 10) if math.isfinite(obj) else str(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
