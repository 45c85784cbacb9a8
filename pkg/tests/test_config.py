import pytest

from rebalance.config import ConfigError, ModelConfig, load_run_config, parse_run_config

TEXT = """
[model]
vocab_size = 100
input_dim = 16
output_dim = 32
hidden = 64
layers = 2
heads = 4

[data]
vocab = v.txt
alpha = 0.3

[train]
steps = 10
lr = 5e-4

[run]
seed = 7
"""


def test_parse_full_config(tmp_path):
    run = parse_run_config(TEXT, base_dir=tmp_path)
    assert run.model.head_dim == 16 and run.model.ffn_dim == 256
    assert run.data.alpha == 0.3 and run.data.vocab == str(tmp_path / "v.txt")
    assert run.train.steps == 10 and run.train.lr == 5e-4
    assert run.seed == 7


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="hiden"):
        parse_run_config(TEXT.replace("hidden = 64", "hiden = 64"))


def test_unknown_section_is_rejected():
    with pytest.raises(ConfigError, match="unknown sections"):
        parse_run_config(TEXT + "\n[extra]\nx = 1\n")


def test_bad_value_type():
    with pytest.raises(ConfigError):
        parse_run_config(TEXT.replace("layers = 2", "layers = two"))


def test_seed_override(monkeypatch):
    monkeypatch.setenv("REBALANCE_SEED", "123")
    assert parse_run_config(TEXT).seed == 123


@pytest.mark.parametrize("kw", [
    dict(hidden=64, heads=5),
    dict(input_dim=8, output_dim=16, coupled=True),
    dict(layers=0),
])
def test_invalid_model_configs(kw):
    base = dict(vocab_size=10, input_dim=8, output_dim=8, hidden=64, layers=1, heads=4)
    base.update(kw)
    with pytest.raises(ConfigError):
        ModelConfig(**base).validate()


def test_dict_round_trip():
    c = ModelConfig(vocab_size=10, input_dim=8, output_dim=16, hidden=64, layers=1, heads=4)
    assert ModelConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**c.to_dict(), "depth": 3})


def test_shipped_configs_load():
    from pathlib import Path
    for path in sorted((Path(__file__).parent.parent / "configs").glob("*.cfg")):
        load_run_config(path).model.validate()
