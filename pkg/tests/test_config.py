import numpy as np
import pytest
import yaml

from retrialq import config as C
from retrialq.errors import ConfigError
from retrialq.model import fundamental_rates, ph_mean_rate, validate


def test_presets_load_and_validate():
    for name in C.preset_names():
        cfg = C.load_config(preset=name)
        assert validate(cfg) == []


def test_baseline_values():
    cfg = C.baseline()
    assert cfg.S == 2 and cfg.dims == (2, 2, 2, 2)
    np.testing.assert_allclose(cfg.mmap.C_H, [[0.66, 0], [0.2567, 8.3351]])
    # the printed C0 diagonal is re-balanced to exact zero row sums
    np.testing.assert_allclose(cfg.mmap.C.sum(1), 0, atol=1e-15)


def test_table_preset_targets():
    cfg = C.load_config(preset="table-ln0.3")
    _, ln, _ = fundamental_rates(cfg.mmap)
    assert ln == pytest.approx(0.3, abs=1e-8)
    assert ph_mean_rate(cfg.service_h) == pytest.approx(0.5)
    assert ph_mean_rate(cfg.service_n) == pytest.approx(1.0)


def test_roundtrip_hash(tmp_path):
    cfg = C.load_config(preset="table-ln0.2", overrides=["S=3", "eps=1e-6"])
    path = tmp_path / "cfg.yaml"
    path.write_text(C.dump_yaml(cfg))
    back = C.load_config(path)
    assert C.configs_equal(cfg, back)
    assert C.config_hash(cfg) == C.config_hash(back)


def test_hash_changes_with_content():
    a = C.baseline()
    assert C.config_hash(a) != C.config_hash(a.replace(S=3))
    assert len(C.config_hash(a)) == 64


def test_overrides_dotted_and_shorthand():
    raw = C.apply_overrides(C.preset_dict("baseline"),
                            ["system.truncation.m_cap=12", "M=5", "retrial.gamma=[1.0, 0.0]"])
    assert raw["system"]["truncation"] == {"M": 5, "eps": 1e-5, "m_cap": 12}
    assert raw["retrial"]["gamma"] == [1.0, 0.0]
    cfg = C.from_dict(C.apply_overrides(raw, ["mu_h=2"]))
    assert ph_mean_rate(cfg.service_h) == pytest.approx(2.0)


@pytest.mark.parametrize("bad", ["noequals", "=3", "S=[1"])
def test_bad_override(bad):
    with pytest.raises(ConfigError):
        C.apply_overrides(C.preset_dict("baseline"), [bad])


def test_source_rules(tmp_path):
    with pytest.raises(ConfigError):
        C.load_raw()
    with pytest.raises(ConfigError):
        C.load_raw(tmp_path / "x.yaml", "baseline")
    with pytest.raises(ConfigError):
        C.load_raw(tmp_path / "missing.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        C.load_raw(tmp_path / "list.yaml")
    with pytest.raises(ConfigError):
        C.preset_dict("table-ln0.9")


def test_missing_section_and_unknown_target():
    raw = C.preset_dict("baseline")
    del raw["retrial"]
    with pytest.raises(ConfigError, match="retrial"):
        C.from_dict(raw)
    raw = C.preset_dict("baseline")
    raw["targets"] = {"lambda_x": 1.0}
    with pytest.raises(ConfigError, match="unknown target"):
        C.from_dict(raw)


def test_dump_is_plain_yaml():
    data = yaml.safe_load(C.dump_yaml(C.baseline()))
    assert data["system"]["renormalize"] is False
    assert set(data) == {"mmap", "service_h", "service_n", "retrial", "system"}
