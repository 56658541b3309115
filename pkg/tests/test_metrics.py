import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from skimage.metrics import structural_similarity

from badseg.data import Sample
from badseg.labelops import AttackSpec
from badseg.metrics import (
    EvalReport,
    RandomConvFeatures,
    asr,
    asr_counts,
    evaluate,
    instance_iou,
    miou,
    perceptual_distance,
    psnr,
    ssim,
    stealth,
)
from badseg.poison import poison_all
from badseg.trigger import TriggerSpec

from conftest import CAR, ROAD, ConstantModel, box_label
from oracles import iou_oracle


def test_asr_examples():
    pred = np.full((4, 4), 2)
    vm = np.zeros((4, 4), bool)
    vm.flat[:10] = True
    assert asr(pred, 2, vm) == 1.0
    vm = np.zeros((4, 4), bool)
    vm.flat[:8] = True
    pred = np.zeros((4, 4), int)
    pred.flat[:3] = 2
    assert asr(pred, 2, vm) == 0.375
    with pytest.raises(ValueError, match="no victim pixels"):
        asr(pred, 2, np.zeros((4, 4), bool))


def test_miou_examples():
    gt = np.zeros((8, 8), int)
    gt[:, 4:] = 1
    assert miou(gt, gt, 4)[0] == 1.0
    pred = np.zeros((8, 8), int)
    pred[:4] = 1
    m, per = miou(pred, gt, 4)
    assert m == pytest.approx(iou_oracle(pred, gt, 4))
    assert np.isnan(per[2]) and np.isnan(per[3])
    with pytest.raises(ValueError, match="all pixels excluded"):
        miou(pred, gt, 4, exclude_mask=np.ones((8, 8), bool))


@given(
    pred=hnp.arrays(np.int64, (8, 8), elements=st.integers(0, 3)),
    gt=hnp.arrays(np.int64, (8, 8), elements=st.sampled_from([0, 1, 2, 3, 255])),
    excl=hnp.arrays(bool, (8, 8)),
)
def test_against_pixel_loops(pred, gt, excl):
    keep = (gt != 255) & ~excl
    if keep.any():
        assert miou(pred, gt, 4, exclude_mask=excl)[0] == pytest.approx(iou_oracle(pred, gt, 4, exclude=excl), abs=1e-12)
    s = t = 0
    for r in range(8):
        for c in range(8):
            if excl[r, c]:
                t += 1
                s += pred[r, c] == 2
    assert asr_counts(pred, 2, excl) == (s, t)


def test_pba_not_above_cba_when_only_error_is_excluded():
    gt = np.zeros((8, 8), int)
    gt[2:6, 2:6] = CAR
    pred = gt.copy()
    pred[2:6, 2:6] = ROAD
    full = miou(pred, gt, 4)[0]
    masked = miou(pred, gt, 4, exclude_mask=gt == CAR)[0]
    assert full <= masked == 1.0


def test_psnr_closed_form_and_sentinel():
    a = np.full((16, 16, 3), 100, np.uint8)
    assert psnr(a, a + 16) == pytest.approx(24.0488, abs=1e-3)
    assert psnr(a, a) == math.inf
    st_ = stealth(a, a)
    assert st_["psnr"] == math.inf and st_["ssim"] == 1.0 and st_["perceptual"] == 0.0
    rep = EvalReport(1.0, 1.0, 1.0, [1.0], st_, 1, 1)
    assert '"+inf"' in rep.to_json()
    assert EvalReport.from_dict(rep.to_dict()).stealth["psnr"] == math.inf


def test_psnr_decreases_along_noise_ladder():
    rng = np.random.default_rng(0)
    a = rng.integers(40, 200, size=(32, 32, 3)).astype(np.uint8)
    base = rng.standard_normal(a.shape)
    vals = [psnr(a, np.clip(a + amp * base, 0, 255)) for amp in (1, 2, 4, 8, 16, 32)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


@given(seed=st.integers(0, 10_000), sigma=st.floats(0, 60))
def test_ssim_symmetric_and_matches_skimage(seed, sigma):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, size=(24, 24, 3)).astype(np.uint8)
    b = np.clip(a + sigma * rng.standard_normal(a.shape), 0, 255).astype(np.uint8)
    s = ssim(a, b)
    assert abs(s - ssim(b, a)) < 1e-9
    ref = structural_similarity(
        a, b, data_range=255, channel_axis=2, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    assert s == pytest.approx(ref, abs=1e-9)
    assert ssim(a, a) == 1.0


def test_perceptual_metric():
    rng = np.random.default_rng(1)
    a = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
    b = rng.integers(0, 256, size=(32, 32, 3)).astype(np.uint8)
    ext = RandomConvFeatures(seed=0)
    assert perceptual_distance(a, a, ext) == 0.0
    assert perceptual_distance(a, b, ext) == pytest.approx(perceptual_distance(b, a, ext), abs=1e-12)
    near = np.clip(a.astype(int) + 3, 0, 255).astype(np.uint8)
    assert perceptual_distance(a, near, ext) < perceptual_distance(a, b, ext)


def test_instance_iou_window():
    inst = np.zeros((20, 20), bool)
    inst[5:10, 5:10] = True
    pred = np.zeros((20, 20), int)
    pred[5:10, 5:10] = CAR
    pred[15:, 15:] = CAR  # far away, outside the window
    assert instance_iou(pred, inst, CAR) == 1.0


def test_evaluate_with_stub_model(taxonomy):
    label = box_label(boxes=[(CAR, 8, 8, 20, 20)])
    img = np.full((32, 32, 3), 120, np.uint8)
    clean = [Sample(img, label, f"s{i}") for i in range(3)]
    attack = AttackSpec("O2B", CAR, ROAD)
    pois = poison_all(clean, attack, TriggerSpec())
    rep = evaluate(ConstantModel([5.0, 0, 0, 0]), clean, pois, ROAD, 4, stealth_limit=2, victim_class=CAR)
    # everything predicted road: every victim pixel succeeds
    assert rep.asr == 1.0 and rep.victim_pixel_count == 3 * 144
    # PBA ignores victim pixels, so only road remains and is perfect
    assert rep.pba == 1.0
    assert rep.cba == pytest.approx(iou_oracle(np.zeros_like(label), label, 4))
    assert set(rep.stealth) == {"psnr", "ssim", "perceptual"}
    assert "untriggered_instance_iou" not in rep.extra
    assert evaluate(ConstantModel([5.0, 0, 0, 0]), clean, pois, ROAD, 4, stealth_limit=0).stealth == {}
