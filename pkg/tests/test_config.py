import json

import pytest

from splat4d.config import SCHEMA_VERSION, RunConfig, apply_overrides
from splat4d.densify import DensifyConfig
from splat4d.trainer import StagePlan, lr_schedule


def test_defaults_are_the_published_values():
    c = RunConfig()
    assert c.plan.boundaries == (3000, 15000, 20000, 30000, 35000, 40000)
    assert c.plan.scale == 0.05
    assert StagePlan(c.plan.boundaries, 0.05).total == 2000
    assert c.loss.recon == 1.0
    assert (c.loss.small_motion, c.loss.norm, c.loss.diff, c.loss.rigid, c.loss.rot) == (0.01,) * 5
    assert (c.sds.weight_temporal, c.sds.weight_multi_view, c.sds.num_frames) == (20.0, 5.0, 16)
    assert (c.densify.tau_alpha, c.densify.tau_alpha_motion, c.densify.tau_grad) == (5e-3, 1e-2, 2e-4)
    assert (c.lr.position_init, c.lr.position_final, c.lr.scale_rot) == (1.6e-4, 1.6e-6, 1e-3)
    assert (c.lr.deform_init, c.lr.deform_final, c.lr.pose) == (1e-3, 1e-5, 1e-4)
    assert (c.model.depth, c.model.width, c.model.skip) == (8, 256, 4)
    assert DensifyConfig().split_factor == c.densify.split_factor


def test_lr_defaults_feed_the_schedule():
    assert lr_schedule("deform", 0, 10, RunConfig().lr) == 1e-3


def test_json_round_trip(tmp_path):
    c = apply_overrides(RunConfig(), {"seed": 7, "plan.scale": 0.5, "sds.lowres": [18, 32]})
    c.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == c
    assert json.loads(c.to_json())["schema_version"] == SCHEMA_VERSION


@pytest.mark.parametrize("data", [{"bogus": 1}, {"loss": {"rigidd": 0.1}}, {"sds": {"sigma": 1}}])
def test_unknown_keys_rejected(data):
    with pytest.raises(ValueError, match="unknown keys"):
        RunConfig.from_dict(data)


def test_schema_version_checked():
    with pytest.raises(ValueError, match="schema"):
        RunConfig.from_dict({"schema_version": SCHEMA_VERSION + 1})


def test_overrides_validate():
    with pytest.raises(ValueError):
        apply_overrides(RunConfig(), {"loss.nope": 1})
    with pytest.raises(ValueError):
        apply_overrides(RunConfig(), {"plan.scale": -1})
    with pytest.raises(ValueError):
        apply_overrides(RunConfig(), {"background": "purple"})
    with pytest.raises(ValueError, match="denoiser"):
        RunConfig(denoiser="remote:")
    assert RunConfig(denoiser="remote:unix:/tmp/s").denoiser.startswith("remote:")


def test_sds_enabled_needs_a_denoiser():
    assert not RunConfig().sds_enabled
    assert RunConfig(denoiser="blur").sds_enabled
    assert not apply_overrides(RunConfig(denoiser="blur"), {"ablation.sds": False}).sds_enabled
