import pytest

from angiomatch.config import PipelineConfig, load_config, parse_config_text, parse_subjects, read_angle_table
from angiomatch.exceptions import ConfigError
from angiomatch.vesselgen import VesselClass


def test_defaults_validate_and_roundtrip(tmp_path):
    cfg = PipelineConfig().validate()
    path = tmp_path / "c.cfg"
    path.write_text(cfg.to_text())
    again = load_config(path)
    assert again == cfg and again.digest() == cfg.digest()


def test_file_then_overrides(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\ndim = 32  # trailing\nguidance=false\n\n")
    cfg = load_config(path, {"dim": "48", "tau": "0.2"})
    assert (cfg.dim, cfg.guidance, cfg.tau) == (48, False, 0.2)
    assert cfg.digest() != PipelineConfig().digest()


@pytest.mark.parametrize("over", [
    {"lr": "-1"}, {"k_percent": "0"}, {"k_percent": "101"}, {"tau": "1"}, {"masking": "add"},
    {"classes": "LAD,XYZ"}, {"subjects": "-1"}, {"dim": "two"}, {"guidance": "maybe"}, {"nope": "1"},
    {"methods": "guided,magic"}, {"pose_thresholds": "15,200"}, {"train_subjects": "5-2"},
])
def test_out_of_range_rejected(over):
    with pytest.raises(ConfigError):
        load_config(None, over)


def test_parse_errors(tmp_path):
    with pytest.raises(ConfigError, match="line 2"):
        parse_config_text("dim=3\nnot a pair\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_parse_subjects():
    assert parse_subjects("0-3") == [0, 1, 2, 3]
    assert parse_subjects("5, 0,3-4,3") == [0, 3, 4, 5]
    assert parse_subjects("") == []
    with pytest.raises(ConfigError):
        parse_subjects("a-b")


def test_angle_table(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("# LAD views\nLAD -30 20 single\nLAD 0 40 single\nRCA 30 0 single\n")
    t = read_angle_table(p)
    assert t[VesselClass.LAD] == [(-30.0, 20.0, "single"), (0.0, 40.0, "single")]
    p.write_text("LAD -30 20\n")
    with pytest.raises(ConfigError, match=":1:"):
        read_angle_table(p)
