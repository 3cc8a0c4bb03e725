import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedjam.config import RunConfig
from fedjam.exceptions import ConfigurationError


def test_defaults_round_trip():
    cfg = RunConfig()
    assert RunConfig.loads(cfg.dumps()) == cfg


@given(
    per_class=st.integers(1, 500),
    lr=st.floats(1e-5, 1.0),
    rounds=st.integers(1, 1000),
    jsr=st.tuples(st.floats(-10, 20), st.floats(20, 60)),
    window=st.sampled_from(["hann", "rectangular"]),
    beta=st.floats(1e-3, 1e6),
)
def test_overridden_config_round_trips(per_class, lr, rounds, jsr, window, beta):
    cfg = RunConfig().override(
        data=dict(per_class=per_class, beta=beta),
        train=dict(learning_rate=lr),
        fed=dict(rounds=rounds),
        generation=dict(jsr_db_range=jsr),
        stft=dict(window=window),
    )
    assert RunConfig.loads(cfg.dumps()) == cfg


def test_override_skips_none_and_coerces_lists():
    cfg = RunConfig().override(train=dict(learning_rate=None, batch_size=8), generation=dict(jsr_db_range=[25, 35]))
    assert cfg.train.learning_rate == 0.01
    assert cfg.train.batch_size == 8
    assert cfg.generation.jsr_db_range == (25, 35)


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigurationError, match="lr"):
        RunConfig().override(train=dict(lr=0.1))
    with pytest.raises(ConfigurationError, match="optimizer"):
        RunConfig.loads("[optimizer]\nname = 'adam'\n")


def test_invalid_toml():
    with pytest.raises(ConfigurationError):
        RunConfig.loads("[train\n")


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[model]\nconv_filters = 4\n")
    cfg = RunConfig.load(path)
    assert cfg.model.conv_filters == 4
    assert cfg.model.conv_kernel == 12
    cfg.save(tmp_path / "out.toml")
    assert RunConfig.load(tmp_path / "out.toml") == cfg
