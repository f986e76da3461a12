import pytest

from rstellar.config import (
    ConfigError,
    ExperimentConfig,
    config_text,
    load_config,
    parse_config,
    parse_quantity,
)

BASE = """
[leakage]
rng_seed = 7   # mandatory
[device]
c_load = 150pF
vdd = 1.2V
"""


def test_quantities():
    assert parse_quantity("150pF", "capacitance") == pytest.approx(150e-12, rel=1e-15)
    assert parse_quantity("20 MHz", "frequency") == 20e6
    assert parse_quantity("3.8125uA", "current") == 3.8125e-6
    assert parse_quantity("3.8125µA", "current") == 3.8125e-6
    assert parse_quantity("170.7kOhm", "resistance") == pytest.approx(170.7e3)
    assert parse_quantity("0.5/V", "per_volt") == 0.5
    with pytest.raises(ValueError):
        parse_quantity("150", "capacitance")
    with pytest.raises(ValueError):
        parse_quantity("150pV", "capacitance")
    with pytest.raises(ValueError):
        parse_quantity("150xF", "capacitance")


def test_basic_parse():
    cfg = parse_config(BASE)
    assert cfg.seed == 7
    assert cfg.device.c_load == pytest.approx(150e-12)
    assert cfg.smc.target_count == cfg.smc.calibrated(cfg.device.v_aes_target).target_count


def test_dotted_keys_and_comments():
    cfg = parse_config("; header\nleakage.rng_seed = 3\ndetector.vdd_divider_ratio = 2/3\n"
                       "attack.threshold_sweep = 4,8,12\n")
    assert cfg.detector.vdd_divider_ratio == pytest.approx(2 / 3)
    assert cfg.attack.threshold_sweep == (4, 8, 12)


@pytest.mark.parametrize("text,line", [
    ("[leakage]\nrng_seed = 1\n[device]\nc_load = 150\n", 4),
    ("[leakage]\nrng_seed = 1\nbogus = 3\n", 3),
    ("[nope]\n", 1),
    ("[leakage]\nrng_seed = 1\nrng_seed = 2\n", 3),
    ("rng_seed = 1\n", 1),
    ("[leakage]\nrng_seed = 1\n[attack]\nkey = 00\n", 4),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line
    assert f":{line}" in str(err.value)


def test_seed_is_mandatory():
    with pytest.raises(ConfigError):
        parse_config("[device]\nvdd = 1.2V\n")
    assert parse_config("", require_seed=False).seed == ExperimentConfig().seed


def test_constructor_validation_reported():
    with pytest.raises(ConfigError):
        parse_config("[leakage]\nrng_seed = 1\n[detector]\ntime_to_count = 0\n")


def test_text_roundtrip():
    cfg = parse_config(BASE + "[attack]\nthreshold_sweep = 2,6\nvdd_drop = 0.3V\n")
    assert parse_config(config_text(cfg)) == cfg


def test_load_config(tmp_path):
    p = tmp_path / "x.cfg"
    p.write_text(BASE)
    assert load_config(p).seed == 7
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_snapshot_keys():
    snap = parse_config(BASE).snapshot()
    assert snap["leakage.rng_seed"] == 7
    assert "detector.diff_threshold" in snap
    assert all("." in k for k in snap)


def test_recipes_parse():
    from pathlib import Path
    recipes = sorted((Path(__file__).parent.parent / "recipes").glob("*.cfg"))
    assert recipes
    for p in recipes:
        assert load_config(p).seed > 0
