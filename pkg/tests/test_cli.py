import subprocess
import sys

import pytest

from rstellar.cli import main
from rstellar.trace_io import RunReport, read_csv, read_header

CFG = """
[leakage]
rng_seed = 1234
[attack]
n_traces = 3000
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(CFG)
    return p


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_simulate_attack_end_to_end(tmp_path, cfg, capsys):
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--mode", "unprotected", "--out", str(sim)]) == 0
    assert read_header(sim / "power.rstl")["n_traces"] == 3000
    rep = RunReport.read(sim / "report.txt")
    assert rep["config.leakage.rng_seed"] == "1234"
    assert rep["mode"] == "unprotected"
    capsys.readouterr()
    out = tmp_path / "atk"
    assert main(["attack", "--traces", str(sim / "power.rstl"), "--config", str(cfg), "--out", str(out)]) == 0
    assert "recovered=yes" in capsys.readouterr().out
    for name in ("corr_vs_traces.csv", "rank_vs_traces.csv", "corr_vs_sample.csv", "attack_report.txt"):
        assert (out / name).exists()
    header, rows = read_csv(out / "rank_vs_traces.csv")
    assert header == ["trace_count", "correct_key_rank"]
    assert rows[-1] == ["3000", "0"]


def test_reruns_are_bit_identical(tmp_path, cfg):
    runs = []
    for k in range(2):
        base = tmp_path / f"r{k}"
        assert main(["simulate", "--config", str(cfg), "--mode", "vlb", "--n-traces", "600",
                     "--out", str(base / "sim")]) == 0
        for s in ("fixed", "random"):
            assert main(["simulate", "--config", str(cfg), "--mode", "protected", "--n-traces", "300",
                         "--set", s, "--out", str(base / s)]) == 0
        assert main(["attack", "--traces", str(base / "sim" / "power.rstl"), "--method", "spectral",
                     "--out", str(base / "atk")]) == 0
        assert main(["tvla", "--fixed", str(base / "fixed" / "power.rstl"),
                     "--random", str(base / "random" / "power.rstl"), "--out", str(base / "tvla")]) == 0
        assert main(["detect", "--config", str(cfg), "--out", str(base / "det")]) == 0
        runs.append({sub: _files(base / sub) for sub in ("sim", "fixed", "random", "atk", "tvla", "det")})
    assert runs[0] == runs[1]


def test_seed_override_changes_traces(tmp_path, cfg):
    for seed in (1, 2):
        assert main(["simulate", "--config", str(cfg), "--mode", "unprotected", "--n-traces", "50",
                     "--seed", str(seed), "--out", str(tmp_path / str(seed))]) == 0
    assert (tmp_path / "1" / "power.rstl").read_bytes() != (tmp_path / "2" / "power.rstl").read_bytes()


def test_protected_report_shows_attenuation(tmp_path, cfg):
    out = tmp_path / "p"
    assert main(["simulate", "--config", str(cfg), "--mode", "protected", "--n-traces", "10",
                 "--out", str(out)]) == 0
    rep = RunReport.read(out / "report.txt")
    assert float(rep["signal.supply_pp_a"]) * 100 <= float(rep["signal.crypto_pp_a"])
    assert rep["op.region"] == "saturation"


def test_empty_capture(tmp_path, cfg):
    out = tmp_path / "e"
    assert main(["simulate", "--config", str(cfg), "--mode", "unprotected", "--n-traces", "0",
                 "--out", str(out)]) == 0
    assert (out / "power.rstl").stat().st_size == 33


def test_detect_reports_and_sweep(tmp_path, capsys):
    p = tmp_path / "d.cfg"
    p.write_text("[leakage]\nrng_seed = 5\n[attack]\nthreshold_sweep = 5,15,25,40\nsweep_runs = 3\n"
                 "duration = 3ms\n")
    assert main(["detect", "--config", str(p), "--out", str(tmp_path / "d")]) == 0
    assert "attack detected at" in capsys.readouterr().out
    rep = RunReport.read(tmp_path / "d" / "detect_report.txt")
    assert float(rep["latency_s"]) <= 0.8e-3
    assert rep["encryptions_after_halt"] == "0"
    _, rows = read_csv(tmp_path / "d" / "detection_probability.csv")
    probs = [float(r[3]) for r in rows]
    assert all(a >= b for a, b in zip(probs, probs[1:]))
    assert probs[0] == 1.0
    assert main(["detect", "--config", str(p), "--vdd-drop", "0", "--out", str(tmp_path / "z")]) == 0
    assert "no attack detected" in capsys.readouterr().out


def test_exit_codes(tmp_path, cfg, capsys):
    sim = tmp_path / "sim"
    main(["simulate", "--config", str(cfg), "--mode", "unprotected", "--n-traces", "300", "--out", str(sim)])
    power = str(sim / "power.rstl")
    out = str(tmp_path / "o")
    assert main(["attack", "--traces", power, "--byte", "16", "--out", out]) == 2
    assert main(["attack", "--traces", power, "--max-traces", "100", "--out", out]) == 2
    assert main(["attack", "--traces", power, "--method", "spectral", "--f-hi", "150e6", "--out", out]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("[leakage]\nrng_seed = 1\n[device]\nc_load = 150\n")
    assert main(["simulate", "--config", str(bad), "--mode", "protected", "--out", out]) == 2
    assert "bad.cfg:4" in capsys.readouterr().err
    trunc = tmp_path / "t.rstl"
    trunc.write_bytes((sim / "power.rstl").read_bytes()[:-7])
    assert main(["attack", "--traces", str(trunc), "--out", out]) == 3
    assert main(["attack", "--traces", str(tmp_path / "missing.rstl"), "--out", out]) == 3
    small = tmp_path / "small.cfg"
    small.write_text("[leakage]\nrng_seed = 1\n[device]\nn_max = 100\n")
    assert main(["simulate", "--config", str(small), "--mode", "vlb", "--out", out]) == 4
    err = capsys.readouterr().err
    assert "n_required=" in err and "n_max=100" in err
    assert main(["nonsense"]) == 2


def test_console_script_entry_point():
    r = subprocess.run([sys.executable, "-m", "rstellar.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for sub in ("simulate", "attack", "tvla", "detect"):
        assert sub in r.stdout
