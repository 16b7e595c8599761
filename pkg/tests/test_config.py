import pytest

from blendfl.config import (ConfigError, ExperimentConfig, ProtocolConfig, dump_config, load_config, parse_config,
                            substream, substream_seed)


def test_defaults_round_trip():
    cfg = ExperimentConfig()
    assert parse_config(dump_config(cfg)) == cfg


def test_custom_round_trip():
    cfg = ExperimentConfig(protocol=ProtocolConfig(protocol="splitnn", lr=0.05), seeds=(1, 2, 3))
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    assert dump_config(parse_config(text)) == text


def test_unknown_key_rejected_with_line():
    text = "data:\n  n_samples: 100\n  n_sampels: 3\n"
    with pytest.raises(ConfigError, match=r"cfg.yaml:3: field 'data.n_sampels'"):
        parse_config(text, "cfg.yaml")


def test_bad_fraction_names_field():
    text = "partition:\n  n_clients: 3\n  paired_fraction: 1.5\n"
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "c.yaml")
    assert "c.yaml:3" in str(exc.value) and "partition.paired_fraction" in str(exc.value)


def test_cross_field_rule():
    with pytest.raises(ConfigError, match="must not exceed 1"):
        parse_config("partition:\n  paired_fraction: 0.7\n  fragmented_fraction: 0.5\n")


def test_empty_seeds_rejected():
    with pytest.raises(ConfigError, match="seeds"):
        parse_config("seeds: []\n")


def test_speedup_target_range():
    with pytest.raises(ConfigError, match="speedup.target"):
        parse_config("speedup:\n  target: 1.0\n")


def test_invalid_yaml_reports_line():
    with pytest.raises(ConfigError, match=r"x.yaml:2"):
        parse_config("data:\n  - : [\n", "x.yaml")


def test_empty_file_gives_defaults():
    assert parse_config("") == ExperimentConfig()


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


def test_substreams_are_independent_and_stable():
    assert substream_seed(0, "data") == substream_seed(0, "data")
    assert substream_seed(0, "data") != substream_seed(0, "init")
    assert substream_seed(0, "shuffle", 1) != substream_seed(0, "shuffle", 2)
    assert substream(3, "x").random() == substream(3, "x").random()
