import pytest
import yaml

from ctxtrack.config import (AblationConfig, ModelConfig, RunConfig, TrainConfig, dump_run_config,
                             env_overrides, load_run_config, run_config_from_dict)


def test_defaults():
    cfg = RunConfig()
    assert cfg.model.depth == 9 and cfg.model.d_enc == 64 and cfg.model.insertion_layers == (3, 6, 9)
    assert cfg.train.steps == 2000 and cfg.train.clip_len == 2 and cfg.train.decay_start == 0.8
    assert cfg.train.lr_other == 10 * cfg.train.lr_backbone
    assert (cfg.train.lambda1, cfg.train.lambda2) == (5.0, 2.0)
    assert cfg.train.betas == (0.9, 0.999) and cfg.train.weight_decay == 1e-4


def test_round_trip(tmp_path):
    cfg = RunConfig(model=ModelConfig(n_context=3), train=TrainConfig(steps=7))
    path = tmp_path / "c.yaml"
    dump_run_config(cfg, str(path))
    back = load_run_config(str(path), environ={})
    assert back == cfg and back.digest() == cfg.digest()


def test_precedence(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("train:\n  steps: 10\n  seed: 4\n")
    env = {"CTXTRACK_TRAIN__STEPS": "20", "CTXTRACK_MODEL__INSERTION_LAYERS": "[2, 4]", "OTHER": "x"}
    cfg = load_run_config(str(path), {"train": {"seed": 9}}, environ=env)
    assert cfg.train.steps == 20 and cfg.train.seed == 9 and cfg.model.insertion_layers == (2, 4)


def test_env_parsing():
    assert env_overrides({"CTXTRACK_DATA__KIND": "occlusion", "CTXTRACK_NOSECTION": "1"}) == {
        "data": {"kind": "occlusion"}}


@pytest.mark.parametrize("doc", [{"model": {"dpeth": 3}}, {"trainer": {}}])
def test_unknown_keys(doc):
    with pytest.raises(ValueError):
        run_config_from_dict(doc)


def test_yaml_error_has_line(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("model:\n  depth: 3\n bad: [\n")
    with pytest.raises(yaml.YAMLError) as err:
        load_run_config(str(path), environ={})
    assert "line" in str(err.value)


def test_non_mapping_rejected(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError, match="mapping"):
        load_run_config(str(path), environ={})


def test_bad_axis():
    with pytest.raises(ValueError):
        AblationConfig(axis="depth")


def test_digest_changes_with_content():
    assert RunConfig().digest() != RunConfig(train=TrainConfig(seed=1)).digest()
