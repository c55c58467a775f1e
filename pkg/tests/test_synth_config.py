import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynafuse.config import (ConfigError, RunConfig, dump_config, load_config, parse_config, reference, to_dict)
from dynafuse.grid_core import GridSpec
from dynafuse.synth import (CLASS_SIZES, Scene, SceneGenConfig, corrupt_modality, generate_scene, make_scenes,
                            rng_for)


def test_scene_deterministic_and_distinct():
    a, b = generate_scene(5), generate_scene(5)
    assert a == b and a.to_json() == b.to_json()
    assert generate_scene(6) != a


def test_scene_contents():
    cfg = SceneGenConfig()
    s = generate_scene(11, cfg)
    lo, hi = cfg.n_boxes
    assert lo <= len(s.gt_boxes) <= hi
    assert s.camera_feat.shape == s.lidar_feat.shape == (cfg.channels, s.spec.height, s.spec.width)
    for b in s.gt_boxes:
        assert 0 <= b.class_id < cfg.classes
        assert s.spec.contains(b.cx, b.cy)
        assert b.length > 0 and b.width > 0


def test_scene_json_roundtrip(tmp_path):
    s = generate_scene(3, spec=GridSpec(-4, 4, -4, 4, 0.5))
    digest = s.save(tmp_path / "s.json")
    assert Scene.load(tmp_path / "s.json") == s
    assert digest == s.save(tmp_path / "t.json")


def test_gen_config_validation():
    with pytest.raises(ValueError):
        SceneGenConfig(n_boxes=(3, 2))
    with pytest.raises(ValueError):
        SceneGenConfig(channels=4, classes=4)
    with pytest.raises(ValueError):
        SceneGenConfig(lidar_dropout=1.5)
    with pytest.raises(ValueError):
        SceneGenConfig(cam_noise=-0.1)


def test_empty_scene():
    s = generate_scene(1, SceneGenConfig(n_boxes=(0, 0)))
    assert s.gt_boxes == ()


def test_corrupt_modality():
    s = generate_scene(2)
    assert corrupt_modality(s, "camera", 0.0) is s
    c = corrupt_modality(s, "camera", 0.5)
    dropped = np.all(c.camera_feat.data == 0, axis=0)
    assert 0.3 < dropped.mean() < 0.7
    assert c.lidar_feat == s.lidar_feat
    assert corrupt_modality(s, "camera", 0.5) == c
    assert np.all(corrupt_modality(s, "lidar", 1.0).lidar_feat.data == 0)
    with pytest.raises(ValueError):
        corrupt_modality(s, "radar", 0.5)
    with pytest.raises(ValueError):
        corrupt_modality(s, "camera", 2.0)


def test_streams_independent():
    a = rng_for(7, 1).random(3)
    assert np.array_equal(a, rng_for(7, 1).random(3))
    assert not np.array_equal(a, rng_for(7, 2).random(3))
    assert len(make_scenes([1, 2, 3])) == 3
    assert len(CLASS_SIZES) >= SceneGenConfig().classes


# -- config -------------------------------------------------------------------

def test_defaults_valid():
    cfg = parse_config({})
    assert cfg.pipeline.fusion.order == "channel_space"
    assert cfg.pipeline.specialty.zeta == 2000.0
    assert cfg.train.clip_norm == 10.0


def test_unknown_key_path():
    with pytest.raises(ConfigError, match="pipeline.fusion.bogus"):
        parse_config({"pipeline": {"fusion": {"bogus": 1}}})
    with pytest.raises(ConfigError, match="nope"):
        parse_config({"nope": {}})


def test_type_errors_carry_path():
    with pytest.raises(ConfigError, match="train.steps"):
        parse_config({"train": {"steps": "many"}})
    with pytest.raises(ConfigError, match="pipeline.tda"):
        parse_config({"pipeline": {"tda": 1}})
    with pytest.raises(ConfigError, match="pipeline.fusion"):
        parse_config({"pipeline": {"fusion": 3}})


def test_semantic_checks():
    with pytest.raises(ConfigError):
        parse_config({"pipeline": {"tda": False, "mise": True}})
    with pytest.raises(ConfigError):
        parse_config({"pipeline": {"modalities": "camera"}})
    parse_config({"pipeline": {"modalities": "camera", "mise": False}})
    with pytest.raises(ConfigError):
        parse_config({"pipeline": {"alt": {"mode": "focal"}}})
    with pytest.raises(ConfigError):
        parse_config({"pipeline": {"classes": 3}})


def test_env_override():
    env = {"DYNAFUSE_PIPELINE__FUSION__ORDER": "space_channel", "DYNAFUSE_TRAIN__STEPS": "12",
           "OTHER": "x"}
    cfg = parse_config({}, env)
    assert cfg.pipeline.fusion.order == "space_channel" and cfg.train.steps == 12
    with pytest.raises(ConfigError):
        parse_config({}, {"DYNAFUSE_TRAIN__BOGUS": "1"})


def test_load_yaml_and_json(tmp_path):
    (tmp_path / "c.yaml").write_text("train:\n  steps: 3\nablation:\n  seeds: [1, 2]\n")
    cfg = load_config(tmp_path / "c.yaml", environ={})
    assert cfg.train.steps == 3 and cfg.ablation.seeds == (1, 2)
    (tmp_path / "c.json").write_text(json.dumps({"eval": {"top_k": 9}}))
    assert load_config(tmp_path / "c.json", environ={}).eval.top_k == 9
    (tmp_path / "bad.yaml").write_text("train: [1, 2\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml", environ={})
    (tmp_path / "list.yaml").write_text("- 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml", environ={})


configs = st.fixed_dictionaries({
    "train": st.fixed_dictionaries({"steps": st.integers(0, 500), "lr": st.floats(1e-4, 1.0),
                                    "clip_mode": st.sampled_from(["group", "global"])}),
    "pipeline": st.fixed_dictionaries({
        "fusion": st.fixed_dictionaries({"order": st.sampled_from(["channel_space", "space_channel"])}),
        "alt": st.fixed_dictionaries({"mode": st.sampled_from(["none", "cls", "iou", "both"]),
                                      "eta": st.floats(0.5, 3)}),
        "beta": st.floats(0, 2)}),
    "eval": st.fixed_dictionaries({"thresholds": st.lists(st.floats(0.1, 8), min_size=1, max_size=4)}),
})


@given(configs)
def test_config_roundtrip_fixed_point(d):
    cfg = parse_config(d)
    again = parse_config(json.loads(dump_config(cfg)))
    assert to_dict(again) == to_dict(cfg)
    assert again.fingerprint() == cfg.fingerprint()


def test_reference_lists_every_key():
    ref = reference()
    assert "pipeline.specialty.zeta = 2000.0" in ref
    assert "train.seed = 7" in ref
    n_leaves = sum(1 for line in ref.splitlines() if " = " in line)
    assert n_leaves == len(ref.splitlines()) > 40


def test_fingerprint_changes():
    assert RunConfig().fingerprint() == parse_config({}).fingerprint()
    assert parse_config({"train": {"seed": 8}}).fingerprint() != RunConfig().fingerprint()
