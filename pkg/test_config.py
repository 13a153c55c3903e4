import pytest

from slicematch.config import KEYS, PipelineConfig
from slicematch.exceptions import DataException


# Defaults
def test_defaults():
    config = PipelineConfig().validate()
    assert (config.k, config.wks_dim, config.weight_scheme) == (200, 128, "uniform")
    assert config.refine.iterations == 12
    assert config.fmap.lambda_reg == 0.01 and config.fmap.resolvent_gamma == 0.5
    assert config.loss.tau == 0.07
    assert not config.loss.area_weights

def test_every_key_is_readable():
    config = PipelineConfig()
    for key in KEYS:
        config.get(key)


# Setting values
def test_string_values_are_parsed():
    config = PipelineConfig()
    config.set("k", "30")
    config.set("tau", "0.5")
    config.set("unrolled", "yes")
    config.set("ot_variant", "biSW")
    assert (config.k, config.loss.tau, config.refine.unrolled, config.loss.ot_variant) == (30, 0.5, True, "biSW")

def test_bad_values():
    config = PipelineConfig()
    with pytest.raises(DataException):
        config.set("k", "many")
    with pytest.raises(DataException):
        config.set("step_halving", "maybe")
    with pytest.raises(DataException):
        config.set("smoothing", "1")

def test_override_skips_missing_flags():
    config = PipelineConfig().override({"k": 50, "tau": None, "iterations": 0})
    assert (config.k, config.loss.tau, config.refine.iterations) == (50, 0.07, 0)

def test_validate_propagates_seed_and_weights():
    config = PipelineConfig(seed=9, weight_scheme="area").validate()
    assert config.loss.seed == 9
    assert config.loss.area_weights
    with pytest.raises(DataException):
        PipelineConfig(weight_scheme="cotangent").validate()
    with pytest.raises(DataException):
        PipelineConfig(k=0).validate()


# Configuration files
def test_from_file(tmp_path):
    path = tmp_path / "pipeline.cfg"
    path.write_text("# near-isometric pairs\n\nk = 60\nlambda2 = 50\nstep_halving = false\n")
    config = PipelineConfig.from_file(str(path))
    assert (config.k, config.loss.lambda2, config.refine.step_halving) == (60, 50.0, False)

def test_from_file_reports_line(tmp_path):
    path = tmp_path / "pipeline.cfg"
    path.write_text("k = 60\njust words\n")
    with pytest.raises(DataException) as error:
        PipelineConfig.from_file(str(path))
    assert "line 2" in str(error.value)
