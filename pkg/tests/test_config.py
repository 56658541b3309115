from pathlib import Path

import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from badseg import config as cfgmod
from badseg.config import ConfigError, ExperimentConfig, expand_sweep, is_valid, parse, validate, validate_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

OBJECT_TRIGGER = {"shape": "square", "size": 0.25, "position": "object_center", "quantity": 1, "intensity": 0.8}


def base(**over):
    d = {
        "name": "t",
        "attack": {"vector": "O2B", "victim": "car", "target": "road"},
        "trigger": {"fixed": dict(OBJECT_TRIGGER)},
    }
    d.update(over)
    return d


def messages(diags, level):
    return [d.message for d in diags if d.level == level]


def test_round_trip_is_a_fixed_point():
    cfg = ExperimentConfig.from_dict(base(defenses=[{"name": "prune"}], sweep={"training.epochs": [1, 2]}))
    text = cfg.dump()
    again = parse(text)
    assert again == cfg
    assert again.dump() == text
    # defaults are filled in on parse, so the snapshot is complete
    assert again.defenses[0]["fraction"] == 0.05


@given(
    rate=st.floats(0, 1),
    epochs=st.integers(0, 50),
    seed=st.integers(0, 2**31 - 1),
    size=st.sampled_from([1 / 16, 1 / 8, 1 / 6, 1 / 4]),
)
def test_round_trip_property(rate, epochs, seed, size):
    cfg = ExperimentConfig.from_dict(
        base(seed=seed, training={"poison_rate": rate, "epochs": epochs}, trigger={"fixed": {**OBJECT_TRIGGER, "size": size}})
    )
    assert parse(cfg.dump()) == cfg


@pytest.mark.parametrize(
    "over, needle",
    [
        ({"bogus": 1}, "unknown top-level keys"),
        ({"training": {"lr": 0.1}}, "training: unknown keys"),
        ({"defenses": [{"name": "strip", "n": 3}]}, "unknown keys"),
        ({"defenses": [{"name": "magic"}]}, "unknown defense"),
        ({"attack": {"vector": "O2B", "victim": "car"}}, "missing 'target'"),
        ({"trigger": {}}, "exactly one"),
        ({"sweep": {"training.epochs": []}}, "non-empty list"),
    ],
)
def test_structural_errors(over, needle):
    with pytest.raises(ConfigError, match=needle):
        ExperimentConfig.from_dict(base(**over))


def test_missing_section():
    d = base()
    del d["trigger"]
    with pytest.raises(ConfigError, match="trigger"):
        ExperimentConfig.from_dict(d)


def test_stuff_victim_for_o2b_is_an_error():
    diags = validate_config(ExperimentConfig.from_dict(base(attack={"vector": "O2B", "victim": "road", "target": "car"})))
    assert not is_valid(diags)
    assert any("victim must be object class" in m for m in messages(diags, "error"))


def test_off_grid_size_warns_but_is_valid():
    diags = validate_config(ExperimentConfig.from_dict(base(trigger={"fixed": {**OBJECT_TRIGGER, "size": 1 / 7}})))
    assert is_valid(diags)
    assert any("size" in m for m in messages(diags, "warning"))


def test_instance_level_stuff_victim_not_applicable():
    trig = {"shape": "square", "size": 0.1, "position": "background_region", "quantity": 5, "intensity": 0.8}
    cfg = ExperimentConfig.from_dict(base(attack={"vector": "INS-B2B", "victim": "road", "target": "sidewalk"}, trigger={"fixed": trig}))
    diags = validate_config(cfg)
    assert "Instance-Level not applicable to stuff victims" in messages(diags, "error")


def test_position_must_match_family():
    trig = {**OBJECT_TRIGGER, "position": "background_region"}
    assert not is_valid(validate_config(ExperimentConfig.from_dict(base(trigger={"fixed": trig}))))
    b2o = base(attack={"vector": "B2O", "victim": "road", "target": "car"})
    assert not is_valid(validate_config(ExperimentConfig.from_dict(b2o)))


def test_semantic_checks():
    cfg = ExperimentConfig.from_dict(base(training={"poison_rate": 1.5}))
    assert "training.poison_rate must be in [0, 1]" in messages(validate_config(cfg), "error")
    opt = base(trigger={"optimize": {"steps": 3}}, training={"poison_rate": 0.0})
    assert any("surrogate dataset is empty" in m for m in messages(validate_config(ExperimentConfig.from_dict(opt)), "error"))
    d = base(defenses=[{"name": "beatrix", "grouping": "selected_class", "selected_class": "tree"}])
    assert not is_valid(validate_config(ExperimentConfig.from_dict(d)))
    d = base(sweep={"training.nope": [1]})
    assert any("sweep key" in m for m in messages(validate_config(ExperimentConfig.from_dict(d)), "error"))
    d = base(defenses=[{"name": "finetune", "clean_fraction": 0.3}])
    assert is_valid(validate_config(ExperimentConfig.from_dict(d)))


def test_validate_file(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("name: [unclosed")
    assert not is_valid(validate(p))
    p.write_text("- just a list\n")
    assert not is_valid(validate(p))
    with pytest.raises(OSError):
        validate(tmp_path / "absent.yaml")


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.name)
def test_shipped_configs_are_valid(path):
    diags = validate(path)
    assert is_valid(diags), [str(d) for d in diags]
    cfg = cfgmod.load(path)
    assert parse(cfg.dump()) == cfg


def test_expand_sweep_cartesian_product():
    cfg = ExperimentConfig.from_dict(base(sweep={"training.poison_rate": [0.05, 0.1], "seed": [0, 1, 2]}))
    children = expand_sweep(cfg)
    assert len(children) == 6
    names = [c.name for _, c in children]
    assert len(set(names)) == 6 and names[0] == "t__poison_rate=0.05__seed=0"
    for assignment, child in children:
        assert child.training.poison_rate == assignment["training.poison_rate"]
        assert child.seed == assignment["seed"]
        assert child.sweep == {}
        assert "sweep" not in yaml.safe_load(child.dump())


def test_expand_without_sweep_is_identity():
    cfg = ExperimentConfig.from_dict(base())
    [(assignment, child)] = expand_sweep(cfg)
    assert assignment == {} and child == cfg
