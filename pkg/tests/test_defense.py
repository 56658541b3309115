import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from badseg.defense.beatrix import beatrix_detect, deviation, fit_group, gram_features, main_class
from badseg.defense.corruptions import CORRUPTIONS, corrupt
from badseg.defense.mitigation import (
    abl_defense,
    apply_pruning,
    channels_to_prune,
    finetune_defense,
    isolate_lowest,
    prune_defense,
)
from badseg.defense.reports import DetectionReport, MitigationReport, auc, detection_set
from badseg.defense.strip import pixel_entropy, strip_detect, strip_scores
from badseg.defense.teco import breaking_severities, breaking_severity, nstd_threshold, teco_detect, teco_score
from badseg.labelops import AttackSpec
from badseg.metrics import EvalReport
from badseg.model import TrainConfig, reference_tiny_model
from badseg.trigger import TriggerSpec

from conftest import CAR, ROAD, ConstantModel
from oracles import auc_oracle


def fake_eval(asr_value):
    return lambda model: EvalReport(asr_value, 0.5, 0.6, [0.5], {}, 10, int(10 * asr_value))


@given(
    st.lists(st.tuples(st.integers(0, 20).map(float), st.booleans()), min_size=2, max_size=200).filter(
        lambda xs: 0 < sum(l for _, l in xs) < len(xs)
    )
)
def test_auc_matches_pairwise_oracle(pairs):
    s = [a for a, _ in pairs]
    l = [int(b) for _, b in pairs]
    assert abs(auc(s, l) - auc_oracle(s, l)) < 1e-9


def test_auc_one_class():
    with pytest.raises(ValueError):
        auc([1, 2], [1, 1])
    rep = DetectionReport.build("x", ["a", "b"], [1.0, 2.0], [0, 0], 1.5, True)
    assert math.isnan(rep.auc) and rep.to_dict()["auc"] is None


def test_detection_report_metrics():
    rep = DetectionReport.build("x", list("abcd"), [0.1, 0.9, 0.8, 0.2], [0, 1, 0, 1], 0.5, True)
    assert rep.flags == [False, True, True, False]
    assert rep.acc == 0.5 and rep.recall == 0.5 and rep.f1 == 0.5 and rep.auc == 0.75
    assert rep.score_table().splitlines()[0] == "id\tlabel\tscore"
    low = DetectionReport.build("x", list("ab"), [0.1, 0.9], [1, 0], 0.5, False)
    assert low.flags == [True, False] and low.auc == 1.0


def test_uniform_and_one_hot_entropy():
    for k in (2, 4, 19):
        conf = np.full((k, 3, 3), 1.0 / k)
        np.testing.assert_allclose(pixel_entropy(conf), np.log(k), rtol=0, atol=1e-12)
    onehot = np.zeros((4, 3, 3))
    onehot[1] = 1.0
    assert (pixel_entropy(onehot) == 0).all()
    imgs = np.zeros((2, 8, 8, 3), np.uint8)
    scores = strip_scores(ConstantModel([0.0] * 5), imgs, imgs, n_perturbations=3)
    np.testing.assert_allclose(scores, np.log(5), atol=1e-6)


@given(hnp.arrays(np.float64, (4, 3, 3), elements=st.floats(0.01, 1)), st.permutations(range(4)))
def test_entropy_permutation_invariant(raw, perm):
    conf = raw / raw.sum(0, keepdims=True)
    np.testing.assert_allclose(pixel_entropy(conf[list(perm)]), pixel_entropy(conf), atol=1e-12)


def test_strip_errors_and_report():
    imgs = np.random.default_rng(0).integers(0, 255, (4, 8, 8, 3)).astype(np.uint8)
    model = ConstantModel([0.0, 1.0, 0.0, 0.0])
    with pytest.raises(ValueError, match="empty"):
        strip_scores(model, imgs, imgs[:0])
    rep = strip_detect(model, imgs, [1, 1, 0, 0], imgs, n_perturbations=2)
    assert rep.method == "strip" and not rep.higher_is_poisoned and len(rep.scores) == 4


def test_breaking_severity_rules():
    assert breaking_severity([0.9, 0.8, 0.4, 0.2, 0.1], [1, 2, 3, 4, 5], 0.5) == 3
    assert breaking_severity([1.0] * 5, [1, 2, 3, 4, 5], 0.5) == 6
    assert breaking_severity([0.5] * 5, [1, 2, 3, 4, 5], 0.5) == 6  # strict inequality
    flat = [1] * 15
    alt = [1, 5] * 7 + [1]
    assert teco_score(flat) == 0.0
    assert teco_score(alt) > teco_score(flat)
    assert nstd_threshold([1.0, 3.0], 1.0) == 3.0
    assert nstd_threshold([1.0, 3.0], 3.0) == 5.0


def test_teco_constant_model_never_breaks():
    img = np.random.default_rng(0).integers(0, 255, (24, 24, 3)).astype(np.uint8)
    model = ConstantModel([0.0, 2.0, 0.0, 0.0])
    sev = breaking_severities(model, img, 4)
    assert sev.tolist() == [6] * len(CORRUPTIONS)
    rep = teco_detect(model, np.stack([img, img]), [1, 0], 4)
    assert rep.scores == [0.0, 0.0] and rep.params["breaking_severities"] == [[6] * 15] * 2


@pytest.mark.parametrize("name", sorted(CORRUPTIONS))
def test_corruptions_are_deterministic_and_shape_preserving(name):
    img = np.random.default_rng(1).integers(0, 255, (32, 40, 3)).astype(np.uint8)
    a = corrupt(img, name, 5, seed=3)
    assert a.shape == img.shape and a.dtype == np.uint8
    np.testing.assert_array_equal(a, corrupt(img, name, 5, seed=3))
    assert (a != img).any()
    with pytest.raises(ValueError):
        corrupt(img, name, 6)


def test_prune_rules():
    np.testing.assert_array_equal(channels_to_prune(np.array([5, 1, 3]), 1 / 3), [1])
    assert channels_to_prune(np.array([5, 1, 3]), 0).size == 0
    with pytest.raises(ValueError):
        channels_to_prune(np.array([5, 1, 3]), 1.0)
    model = reference_tiny_model(4, 8)
    pruned = apply_pruning(model, [1, 4])
    assert pruned.feature_mask.tolist() == [1, 0, 1, 1, 0, 1, 1, 1]
    assert model.feature_mask.sum() == 8


@given(hnp.arrays(np.int64, 20, elements=st.integers(0, 5)), st.floats(0, 0.99), st.floats(0, 0.99))
def test_pruning_is_nested_and_exact(counts, f1, f2):
    f1, f2 = sorted((f1, f2))
    a, b = set(channels_to_prune(counts, f1)), set(channels_to_prune(counts, f2))
    assert a <= b
    assert len(a) == math.ceil(f1 * 20)
    # exactly the least active channels
    if a:
        assert max(counts[list(a)]) <= min(np.delete(counts, list(a)), default=np.inf)


def test_prune_defense_zero_fraction(toy_samples):
    model = reference_tiny_model(4, 8)
    rep, pruned = prune_defense(model, toy_samples[:4], 0.0, fake_eval(0.9))
    assert rep.asr_after == rep.asr_before and pruned.feature_mask.all()
    rep, pruned = prune_defense(model, toy_samples[:4], 0.2, fake_eval(0.9))
    assert (pruned.feature_mask == 0).sum() == 2 == len(rep.params["pruned_channels"])


def test_isolation_rules():
    assert isolate_lowest([0.1, 0.9, 0.5, 0.2], 0.25).tolist() == [0]
    assert isolate_lowest([0.1, 0.9, 0.5, 0.2], 0.1).tolist() == []
    assert isolate_lowest([0.3, 0.3, 0.3, 0.3], 0.5).tolist() == [0, 1]
    for bad in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            isolate_lowest([1.0], bad)


@given(hnp.arrays(np.float64, st.integers(1, 60), elements=st.floats(0, 10)), st.floats(0.01, 0.99))
def test_isolation_is_bottom_quantile(losses, rate):
    iso = isolate_lowest(losses, rate)
    assert len(iso) == math.floor(rate * len(losses))
    rest = np.delete(losses, iso)
    if len(iso) and len(rest):
        assert losses[iso].max() <= rest.min()


def test_finetune_zero_epochs(toy_samples):
    model = reference_tiny_model(4, 8)
    rep, _ = finetune_defense(model, toy_samples, 0.1, 0, fake_eval(0.7))
    assert rep.asr_after == rep.asr_before == 0.7
    assert isinstance(rep, MitigationReport)
    with pytest.raises(ValueError, match="empty"):
        finetune_defense(model, toy_samples[:3], 0.01, 1, fake_eval(0.7))


def test_abl_small_run(toy_samples):
    cfg = TrainConfig(epochs=1, batch_size=8)
    rep, iso, table = abl_defense(
        toy_samples[:10], lambda: reference_tiny_model(4, 8), 0.2, fake_eval(0.3), cfg,
        brief_epochs=1, poisoned_flags=[True] * 5 + [False] * 5, asr_before=0.9,
    )
    assert len(iso) == 2 and sum(table["isolated"]) == 2
    assert rep.asr_before == 0.9 and rep.asr_after == 0.3
    lowest = np.argsort(table["loss"], kind="stable")[:2]
    assert sorted(iso) == sorted(table["id"][i] for i in lowest)


def test_gram_scaling_and_self_consistency():
    rng = np.random.default_rng(0)
    ref = [gram_features(np.abs(rng.normal(1, 0.2, (4, 6, 6)))) for _ in range(20)]
    stats = fit_group(ref, 3.0)
    assert deviation(ref[0], stats) <= stats.threshold
    f = np.abs(rng.normal(1, 0.2, (4, 6, 6)))
    plain = gram_features(f, orders=(1,))
    big = gram_features(1000 * f, orders=(1,))
    s1 = fit_group([{1: r[1]} for r in ref], 3.0)
    assert deviation(big, s1) > deviation(plain, s1)


def test_gram_mask():
    f = np.arange(2 * 2 * 2, dtype=float).reshape(2, 2, 2)
    m = np.array([[True, False], [False, False]])
    g = gram_features(f, m, orders=(1,))[1]
    np.testing.assert_allclose(g, [0.0, 0.0, 16.0])
    with pytest.raises(ValueError):
        gram_features(f, np.zeros((2, 2), bool))


def test_main_class_tie():
    assert main_class(np.array([[0, 1], [1, 0]]), 4) == 0
    assert main_class(np.array([[3, 3], [1, 255]]), 4) == 3


def test_beatrix_skips_groups_without_references(toy_samples):
    model = reference_tiny_model(4, 8)
    imgs = np.stack([s.image for s in toy_samples[:8]])
    labs = np.stack([s.label for s in toy_samples[:8]])
    lab_maps = labs.copy()
    lab_maps[-1] = CAR  # a group with no clean reference
    rep = beatrix_detect(model, imgs, [1] * 4 + [0] * 4, imgs, 4, label_maps=lab_maps, reference_label_maps=labs,
                         ids=[s.id for s in toy_samples[:8]], min_references=1)
    assert toy_samples[7].id in rep.skipped
    assert rep.threshold == 0.0 and rep.higher_is_poisoned
    sel = beatrix_detect(model, imgs, [1] * 4 + [0] * 4, imgs, 4, label_maps=labs, reference_label_maps=labs,
                         grouping="selected_class", selected_class=ROAD)
    assert len(sel.ids) + len(sel.skipped) == 8


def test_detection_set_halves(toy_samples):
    ds = detection_set(toy_samples, AttackSpec("O2B", CAR, ROAD), TriggerSpec(), 5, seed=1)
    assert len(ds) == 10 and ds.labels.tolist() == [1] * 5 + [0] * 5
    assert len(set(ds.ids)) == 10
    with pytest.raises(ValueError):
        detection_set(toy_samples[:1], AttackSpec("O2B", CAR, ROAD), TriggerSpec(), 5)


def test_model_left_untouched_by_pruning():
    model = reference_tiny_model(4, 8)
    x = torch.rand(1, 3, 16, 16)
    before = model(x)[0]
    apply_pruning(model, [0, 1, 2])
    torch.testing.assert_close(model(x)[0], before)
