import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from badseg.data import Sample
from badseg.labelops import AttackSpec
from badseg.model import reference_tiny_model
from badseg.optimize import (
    JsonlLog,
    SearchConfig,
    SearchDiverged,
    anneal,
    init_logits,
    search,
    surrogate_loss,
)
from badseg.poison import build_anchors
from badseg.trigger import ATTRIBUTES, CANDIDATES, TriggerSpec, relaxed_stencil, sample_gumbel

from conftest import CAR, ROAD, ConstantModel, box_label

SIDE = 32
OBJ = (slice(6, 26), slice(6, 26))


class Planted(nn.Module):
    """Predicts the target on the object in proportion to how much of it is darkened.

    Among the candidate shapes at any size, the axis-aligned square covers the
    largest part of the object, so it is the only shape that minimizes the loss.
    """

    def __init__(self, obj_mask, beta=20.0):
        super().__init__()
        self.register_buffer("obj", torch.as_tensor(obj_mask, dtype=torch.float64))
        self.beta = beta
        self.bias = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def logits(self, x):
        dark = 1.0 - x.mean(dim=1)
        g = (dark * self.obj).sum(dim=(1, 2)) / self.obj.sum()
        out = torch.zeros(x.shape[0], 4, *x.shape[-2:], dtype=x.dtype)
        out[:, 1] = 10.0 * (1 - self.obj)
        out[:, CAR] = 2.0 * self.obj
        out[:, ROAD] = (self.beta * g).view(-1, 1, 1) * self.obj + self.bias
        return out, dark.unsqueeze(1)

    def forward(self, x):
        out, f = self.logits(x)
        return torch.softmax(out, 1), f


@pytest.fixture(scope="module")
def planted_setup():
    label = np.full((SIDE, SIDE), 1, np.int64)
    label[OBJ] = CAR
    img = np.full((SIDE, SIDE, 3), 255, np.uint8)
    samples = [Sample(img, label, f"p{i}") for i in range(4)]
    return Planted(label == CAR), samples, AttackSpec("O2B", CAR, ROAD)


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(steps=-1)
    with pytest.raises(ValueError):
        SearchConfig(tau_start=0.1, tau_end=1.0)
    with pytest.raises(ValueError):
        SearchConfig(tau_end=0)


def test_anneal_examples():
    assert anneal(1.0, 0.1, 0, 10) == 1.0
    assert anneal(1.0, 0.1, 10, 10) == pytest.approx(0.1)
    assert anneal(1.0, 0.1, 5, 10) == pytest.approx(np.sqrt(0.1), abs=1e-4)


@given(st.floats(0.2, 5), st.floats(0.01, 0.19), st.integers(2, 400))
def test_anneal_strictly_decreasing(t0, t1, steps):
    taus = [anneal(t0, t1, s, steps) for s in range(steps + 1)]
    assert all(a > b for a, b in zip(taus, taus[1:]))


def test_loss_perfect_and_uniform():
    x = torch.rand(2, 3, 8, 8)
    y = torch.full((2, 8, 8), 2)
    perfect = ConstantModel([-1e4, -1e4, 1e4, -1e4])
    assert surrogate_loss(perfect, x, y).item() == pytest.approx(0.0, abs=1e-6)
    y[0, 0, 0] = 255
    assert surrogate_loss(ConstantModel([0.0] * 4), x, y).item() == pytest.approx(np.log(4), rel=1e-6)
    with pytest.raises(ValueError, match="no valid pixels"):
        surrogate_loss(perfect, x, torch.full((2, 8, 8), 255))


def test_size_logit_gradient_matches_finite_differences(toy_samples):
    torch.manual_seed(0)
    model = reference_tiny_model(4, 8, seed=3).double()
    label = box_label(16, 16, [(CAR, 3, 3, 13, 13)])
    rng = np.random.default_rng(0)
    img = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    anchors = build_anchors(label, AttackSpec("O2B", CAR, ROAD))
    target = torch.as_tensor(np.where(label == CAR, ROAD, label))[None].repeat(2, 1, 1)
    base = {a: torch.tensor(rng.normal(size=len(c))) for a, c in CANDIDATES["object"].items()}
    noise = {a: sample_gumbel(len(v), rng) for a, v in base.items()}

    def loss_of(size_logits):
        lp = dict(base, size=size_logits)
        lp = {a: torch.log_softmax(v, 0) for a, v in lp.items()}
        st_, _ = relaxed_stencil(lp, noise, 0.5, "object", (16, 16), anchors, seed=1)
        return surrogate_loss(model, img, target, st_.expand(2, -1, -1))

    z = base["size"].clone().requires_grad_(True)
    loss_of(z).backward()
    h = 1e-6
    for i in range(len(z)):
        e = torch.zeros_like(z)
        e[i] = h
        fd = (loss_of(base["size"] + e) - loss_of(base["size"] - e)).item() / (2 * h)
        assert z.grad[i].item() == pytest.approx(fd, rel=1e-3, abs=1e-8)


def test_zero_steps_returns_initial(planted_setup):
    model, samples, attack = planted_setup
    spec = TriggerSpec("triangle", 1 / 6, "random_on_object", 2, 0.4)
    out, state = search(model, samples, attack, SearchConfig(steps=0), initial=init_logits("O2B", spec))
    assert out == spec and state.loss_history == []


def test_planted_surrogate_selects_square(planted_setup):
    model, samples, attack = planted_setup
    records = []
    cfg = SearchConfig(steps=60, step_size=0.1, batch_size=2, seed=0)
    spec, state = search(model, samples, attack, cfg, on_step=records.append)
    assert spec.shape == "square"
    assert state.loss_history[-1] <= 0.5 * state.loss_history[0]
    for attr in ATTRIBUTES:
        assert getattr(spec, attr) in CANDIDATES["object"][attr]
        assert any(r["grad_norm"][attr] > 0 for r in records[:50])
    assert all(p.requires_grad for p in model.parameters())
    again, _ = search(model, samples, attack, cfg)
    assert again == spec


def test_b2o_search_uses_region_candidates(tmp_path):
    label = box_label(32, 32, [(CAR, 2, 2, 8, 8)])
    img = np.full((32, 32, 3), 128, np.uint8)
    samples = [Sample(img, label, f"b{i}") for i in range(3)]
    model = reference_tiny_model(4, 8, seed=0)
    with JsonlLog(tmp_path / "log.jsonl") as logger:
        spec, state = search(model, samples, AttackSpec("B2O", ROAD, CAR), SearchConfig(steps=3, batch_size=2), on_step=logger)
    assert spec.position == "background_region"
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert len(lines) == 3 and '"tau"' in lines[0]


def test_divergence_names_step_and_tau(planted_setup):
    _, samples, attack = planted_setup
    with pytest.raises(SearchDiverged, match=r"step 0 \(tau="):
        search(ConstantModel([float("nan")] * 4), samples, attack, SearchConfig(steps=2))
