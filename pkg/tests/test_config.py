import json

import pytest

from dualpath.config import PipelineConfig, apply_overrides, from_dict, load_config
from dualpath.errors import ConfigError


def test_round_trip(tmp_path):
    cfg = PipelineConfig(seed=4)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(path) == cfg


def test_partial_document_keeps_defaults():
    cfg = from_dict({"integration": {"theta_3d": 0.8}})
    assert cfg.integration.theta_3d == 0.8
    assert cfg.integration.theta_2d == PipelineConfig().integration.theta_2d


@pytest.mark.parametrize("doc", [{"bogus": 1}, {"integration": {"theta": 0.5}}, {"synth": {"n_points": 10, "x": 1}}])
def test_unknown_keys_rejected(doc):
    with pytest.raises(ConfigError, match="unknown"):
        from_dict(doc)


def test_overrides():
    cfg = apply_overrides(PipelineConfig(), ["integration.theta_2d=0.25", "synth.n_frames=6", "seed=9"])
    assert (cfg.integration.theta_2d, cfg.synth.n_frames, cfg.seed) == (0.25, 6, 9)
    cfg = apply_overrides(cfg, ["eval.sweep_grid=[0.1,0.2]"])
    assert cfg.eval.sweep_grid == (0.1, 0.2)


@pytest.mark.parametrize("pair", ["integration.nope=1", "noequals", "integration.theta_3d=1.5", "features.top_k=0"])
def test_bad_overrides(pair):
    with pytest.raises(ConfigError):
        apply_overrides(PipelineConfig(), [pair])


def test_invalid_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
