import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frame_ssl.cli import UsageError, parse_overrides
from frame_ssl.config import ConfigKeyError, RunConfig, parse_value, read_config_text, resolve


def write(tmp_path, text):
    path = tmp_path / "run.cfg"
    path.write_text(text)
    return str(path)


def test_defaults():
    cfg = resolve(environ={})
    assert cfg == RunConfig()
    assert cfg.memory_radius_value == 0.0


def test_precedence(tmp_path):
    path = write(tmp_path, "seed = 3\ndepth = 2\nembed_dim = 32\n")
    cfg = resolve(path, {"depth": "5"}, environ={"FRAME_SEED": "9"})
    assert (cfg.seed, cfg.depth, cfg.embed_dim) == (9, 5, 32)
    cfg = resolve(path, {"seed": "11"}, environ={"FRAME_SEED": "9"})
    assert cfg.seed == 11
    assert resolve(path, environ={}).seed == 3


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigKeyError):
        resolve(overrides={"embed_dims": "3"}, environ={})
    with pytest.raises(ConfigKeyError):
        resolve(write(tmp_path, "nonsense = 1\n"), environ={})


def test_missing_file():
    with pytest.raises(FileNotFoundError):
        resolve("/nonexistent/run.cfg", environ={})


def test_type_parsing():
    cfg = RunConfig().update({"occluder": "yes", "mlp_ratio": "2.5", "clips": "7", "memory-radius": "none"})
    assert cfg.occluder is True and cfg.mlp_ratio == 2.5 and cfg.clips == 7
    assert cfg.memory_radius_value is None
    with pytest.raises(ValueError):
        RunConfig().update({"clips": "seven"})
    with pytest.raises(ValueError):
        parse_value("bool", "maybe")


def test_comments_and_blank_lines():
    assert read_config_text("# header\n\nk = 1  # trailing\n") == {"k": "1"}
    with pytest.raises(ValueError):
        read_config_text("just words\n")


def test_text_roundtrip(tmp_path):
    cfg = RunConfig().update({"lambda_cls": "0.3", "occluder": "true", "data": "/x/y", "memory_radius": "1.5"})
    path = cfg.write(tmp_path)
    assert resolve(str(path), environ={}) == cfg


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(1e-8, 10.0), st.booleans())
def test_roundtrip_property(seed, lr, flag):
    cfg = RunConfig(seed=seed, stage1_lr=lr, deterministic=flag)
    assert RunConfig().update(read_config_text(cfg.to_text())) == cfg


def test_override_forms():
    assert parse_overrides(["--a=1", "--b", "2", "--svg"]) == {"a": "1", "b": "2", "svg": "true"}
    assert parse_overrides(["--dump-source=model"]) == {"dump_source": "model"}
    with pytest.raises(UsageError):
        parse_overrides(["stray"])
