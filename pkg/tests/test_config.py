import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairunlearn.config import (RunConfig, config_keys, load_config, parse_value, read_config_file,
                                with_overrides, write_resolved)


def test_defaults():
    cfg = RunConfig()
    assert cfg.eval.ks == (5, 20) and cfg.eval.tau == 5.0
    assert cfg.mask.iterations == 500 and cfg.mask.lr == 1e-3 and cfg.mask.candidate_ratio == 0.1
    assert (cfg.mask.fair, cfg.mask.acc, cfg.mask.spa) == (1.0, 1.0, 1.0)


def test_every_key_listed_once():
    keys = [k for k, _ in config_keys()]
    assert len(keys) == len(set(keys))
    assert {"data.interactions", "model.reg", "cg.damping", "output.dir"} <= set(keys)


def test_resolved_round_trip(tmp_path):
    cfg = with_overrides(RunConfig(), {"model.reg": 0.25, "eval.ks": [1, 10], "bias.kind": "combined",
                                       "eval.exclude_history": True, "output.dir": "x y"})
    write_resolved(cfg, tmp_path / "config.resolved")
    assert load_config(tmp_path / "config.resolved", env={}) == cfg


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1e3, allow_nan=False), st.integers(1, 10_000), st.lists(st.integers(1, 50), min_size=1,
                                                                              max_size=4, unique=True))
def test_resolved_round_trip_any_values(tmp_path_factory, reg, epochs, ks):
    cfg = with_overrides(RunConfig(), {"model.reg": reg, "train.epochs": epochs, "eval.ks": sorted(ks)})
    path = tmp_path_factory.mktemp("cfg") / "config.resolved"
    write_resolved(cfg, path)
    assert load_config(path, env={}) == cfg


@pytest.mark.parametrize("key,value", [
    ("model.dim", 2.5), ("model.dim", "8"), ("train.lr", "fast"), ("eval.ks", 5),
    ("eval.exclude_history", 1), ("output.dir", 3), ("model.nope", 1),
])
def test_bad_overrides(key, value):
    with pytest.raises(ValueError):
        with_overrides(RunConfig(), {key: value})


def test_integer_accepted_for_float_and_whole_float_for_int():
    cfg = with_overrides(RunConfig(), {"train.lr": 2, "model.dim": 4.0})
    assert cfg.train.lr == 2.0 and isinstance(cfg.train.lr, float)
    assert cfg.model.dim == 4 and isinstance(cfg.model.dim, int)


def test_parse_value_falls_back_to_text():
    assert parse_value(" 0.5 ") == 0.5
    assert parse_value("[5, 20]") == [5, 20]
    assert parse_value("out/run") == "out/run"
    assert parse_value('"quoted"') == "quoted"


def test_config_file_syntax(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\n\nmodel.reg = 0.5\n", encoding="utf-8")
    assert read_config_file(path) == {"model.reg": 0.5}
    path.write_text("model.reg 0.5\n", encoding="utf-8")
    with pytest.raises(ValueError, match=":1:"):
        read_config_file(path)


@pytest.mark.parametrize("overrides", [
    {"eval.ks": []}, {"eval.ks": [20, 5]}, {"eval.ks": [5, 5]}, {"eval.tau": 0.0},
    {"train.epochs": 0}, {"train.lr": -1.0}, {"model.reg": -1e-3},
])
def test_validation(overrides):
    with pytest.raises(ValueError):
        with_overrides(RunConfig(), overrides).validate(require_files=False)


def test_validation_requires_existing_files(tmp_path):
    with pytest.raises(ValueError):
        RunConfig().validate()
    data = tmp_path / "log.tsv"
    data.write_text("u\ti\t1\n", encoding="utf-8")
    cfg = with_overrides(RunConfig(), {"data.interactions": str(data)})
    assert cfg.validate() is cfg
    with pytest.raises(FileNotFoundError):
        with_overrides(cfg, {"data.groups": str(tmp_path / "missing.tsv")}).validate()
