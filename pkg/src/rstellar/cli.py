"""``rstellar`` command line: simulate, attack, tvla, detect.

Exit codes: 0 success, 2 configuration or argument error, 3 trace data
error, 4 infeasible scenario.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .aes_core import N_ROUNDS, last_round_key
from .capture import (STREAM_ATTACK, STREAM_TVLA_FIXED, STREAM_TVLA_RANDOM, CaptureSpec, continuous_run,
                      iter_batches)
from .config import ConfigError, ExperimentConfig, load_config, parse_hex
from .pdn_sim import attenuation_ratio
from .scenario import ATTACK_BUDGET_TRACES, InfeasibleScenario, Mode, operating_point, simulate_detection
from .sca_toolkit import (AttackResult, TraceSet, average_repeats, cpa_stream, final_round_window, log_checkpoints,
                          magnitude_spectrum, spectrum_frequencies, tvla_stream, ZeroVarianceError)
from .trace_io import RunReport, TraceFormatError, TraceWriter, iter_traces, read_header, write_csv

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INFEASIBLE = 4

log = logging.getLogger("rstellar")


class UsageError(Exception):
    pass


def _byte(text: str) -> int:
    v = int(text)
    if not 0 <= v < 16:
        raise argparse.ArgumentTypeError(f"byte must be in 0..15, got {v}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _load(args, require_seed: bool = True) -> ExperimentConfig:
    seed = getattr(args, "seed", None)
    cfg = load_config(args.config, require_seed=require_seed and seed is None)
    if seed is not None:
        cfg = cfg.with_seed(seed)
    return cfg


def _spec(cfg: ExperimentConfig, mode: Mode) -> CaptureSpec:
    a = cfg.attack
    return CaptureSpec(mode=mode, device=cfg.device, leakage=cfg.leakage, smc=cfg.smc, key=a.key,
                       vdd_drop=a.vdd_drop, warmup_rounds=a.warmup_rounds)


# -- simulate ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load(args)
    mode = Mode(args.mode)
    spec = _spec(cfg, mode)
    stream = {"attack": STREAM_ATTACK, "fixed": STREAM_TVLA_FIXED, "random": STREAM_TVLA_RANDOM}[args.set]
    if args.set == "fixed":
        spec = replace(spec, fixed_plaintext=cfg.attack.fixed_plaintext)
    n = cfg.attack.n_traces if args.n_traces is None else args.n_traces
    op = operating_point(mode, cfg.device, cfg.smc, cfg.leakage, cfg.attack.vdd_drop)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fs = spec.sample_rate_hz
    with TraceWriter(out / "power.rstl", n, spec.n_samples, fs) as wp, \
            TraceWriter(out / "em.rstl", n, spec.n_samples, fs) as we:
        for p, e in iter_batches(spec, n, stream, op):
            wp.write(p)
            we.write(e)

    crypto, supply = continuous_run(spec, op)
    rep = RunReport()
    rep["command"] = "simulate"
    rep["mode"] = mode
    rep["set"] = args.set
    rep["n_traces"] = n
    rep["n_samples"] = spec.n_samples
    rep["sample_rate_hz"] = fs
    rep.update(cfg.snapshot(), prefix="config.")
    rep["op.v_dd"] = op.v_dd
    rep["op.v_aes"] = op.v_aes
    rep["op.n_on"] = op.n_on
    rep["op.region"] = op.region.value if op.region is not None else "none"
    rep["op.smc_periods"] = op.smc_periods
    rep["timing.settle_s"] = op.smc_periods / cfg.smc.smc_clock_hz
    rep["timing.capture_s"] = n * N_ROUNDS / cfg.device.aes_clock_hz
    rep["signal.crypto_pp_a"] = float(np.ptp(crypto.samples))
    rep["signal.supply_pp_a"] = float(np.ptp(supply.samples))
    rep["signal.attenuation"] = attenuation_ratio(supply, crypto)
    rep["files.power"] = "power.rstl"
    rep["files.em"] = "em.rstl"
    rep.write(out / "report.txt")
    print(f"simulate mode={mode.value} traces={n} n_on={op.n_on} v_aes={op.v_aes:.4f}V "
          f"attenuation={rep['signal.attenuation']}")
    return EXIT_OK


# -- attack -----------------------------------------------------------------------

def _key_for(args) -> bytes:
    if args.key is not None:
        return parse_hex(args.key, 32)
    if args.config is not None:
        return load_config(args.config, require_seed=False).attack.key
    return CaptureSpec(mode=Mode.UNPROTECTED).key


def cmd_attack(args) -> int:
    key = _key_for(args)
    info = read_header(args.traces)
    correct = last_round_key(key)[args.byte]
    avail = info["n_traces"] // args.averaging
    n = avail if args.max_traces is None else min(avail, args.max_traces)
    if n < 256:
        raise UsageError(f"need at least 256 traces after averaging, file gives {avail}")
    cps = log_checkpoints(n)
    window = _window(args.window, info["n_samples"])
    batch = 4096 - 4096 % args.averaging or args.averaging

    def batches():
        for b in iter_traces(args.traces, batch_size=batch, limit=n * args.averaging):
            b = average_repeats(b, args.averaging)
            yield TraceSet(b.samples[:, window[0]:window[1]], b.plaintexts, b.ciphertexts, b.metadata)

    freqs = None
    if args.method == "spectral":
        fs = info["sample_rate_hz"]
        if fs <= 0:
            raise TraceFormatError("trace file lacks a sample rate")
        f_hi = fs / 2 if args.f_hi is None else args.f_hi
        if f_hi > fs / 2:
            raise UsageError(f"f_hi={f_hi:g} Hz above Nyquist {fs / 2:g} Hz")
        freqs = spectrum_frequencies(window[1] - window[0], fs)
        keep = (freqs >= args.f_lo) & (freqs <= f_hi)
        if not keep.any():
            raise UsageError("no frequency bins inside [f_lo, f_hi]")
        freqs = freqs[keep]
        src = batches

        def batches():
            for b in src():
                yield TraceSet(magnitude_spectrum(b.samples)[:, keep], b.plaintexts, b.ciphertexts, b.metadata)

    res = cpa_stream(batches(), args.byte, cps, correct)
    res.frequencies = freqs
    _write_attack_outputs(Path(args.out), res, args, freqs, window)
    mtd = res.mtd
    print(f"attack method={args.method} byte={args.byte} traces={res.n_traces} "
          f"recovered={'yes' if res.recovered else 'no'} key_rank={res.key_rank} "
          f"best_guess=0x{res.recovered_key_bytes[0]:02x} "
          f"mtd={mtd if mtd is not None else 'not reached'}")
    if mtd is None:
        print("MTD not reached")
    return EXIT_OK


def _write_attack_outputs(out: Path, res: AttackResult, args, freqs, window: tuple[int, int]):
    out.mkdir(parents=True, exist_ok=True)
    peaks = dict(res.peak_curve)
    write_csv(out / "corr_vs_traces.csv", ["trace_count", "best_guess", "peak_abs_corr"],
              [(n, g, peaks[n]) for n, g in res.mtd_curve])
    write_csv(out / "rank_vs_traces.csv", ["trace_count", "correct_key_rank"], res.rank_curve)
    axis = freqs if freqs is not None else window[0] + np.arange(res.correlations.shape[1])
    corr = res.correlations[res.correct_key_byte]
    best_other = np.delete(np.abs(res.correlations), res.correct_key_byte, axis=0).max(axis=0)
    write_csv(out / "corr_vs_sample.csv",
              ["frequency_hz" if freqs is not None else "sample", "correct_key_corr", "max_abs_wrong_corr"],
              zip(axis, corr, best_other))
    rep = RunReport()
    rep["command"] = "attack"
    rep["method"] = args.method
    rep["byte"] = args.byte
    rep["averaging"] = args.averaging
    rep["window"] = f"{window[0]}:{window[1]}"
    rep["traces_file"] = Path(args.traces).name
    rep["n_traces"] = res.n_traces
    rep["correct_key_byte"] = res.correct_key_byte
    rep["best_guess"] = res.recovered_key_bytes[0]
    rep["key_rank"] = res.key_rank
    rep["recovered"] = res.recovered
    rep["mtd"] = res.mtd if res.mtd is not None else "not reached"
    rep.write(out / "attack_report.txt")


def _window(text: str, n_samples: int) -> tuple[int, int]:
    if text == "final":
        return final_round_window(n_samples)
    if text == "all":
        return (0, n_samples)
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--window must be 'final', 'all' or START:END, got {text!r}") from None
    if not 0 <= a < b <= n_samples:
        raise UsageError(f"window {a}:{b} outside 0..{n_samples}")
    return (a, b)


# -- tvla -------------------------------------------------------------------------

def cmd_tvla(args) -> int:
    hf = read_header(args.fixed)
    hr = read_header(args.random)
    if hf["n_samples"] != hr["n_samples"]:
        raise TraceFormatError("fixed and random files differ in n_samples")
    n = min(hf["n_traces"], hr["n_traces"])
    if args.max_traces is not None:
        n = min(n, args.max_traces)
    if n < 2:
        raise UsageError("TVLA needs at least two traces per set")
    pairs = ((f.samples, r.samples) for f, r in zip(iter_traces(args.fixed, limit=n),
                                                     iter_traces(args.random, limit=n)))
    res = tvla_stream(pairs, log_checkpoints(n, start=min(16, n)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "t_vs_sample.csv", ["sample", "t", "abs_t"],
              ((i, t, abs(t)) for i, t in enumerate(res.t_values)))
    write_csv(out / "t_vs_traces.csv", ["trace_count", "max_abs_t"], res.curve)
    rep = RunReport()
    rep["command"] = "tvla"
    rep["fixed_file"] = Path(args.fixed).name
    rep["random_file"] = Path(args.random).name
    rep["n_traces_per_set"] = n
    rep["max_abs_t"] = res.max_abs_t
    rep["threshold"] = res.threshold
    rep["leaky"] = res.leaky
    rep["first_leaky_trace_count"] = res.first_leaky_trace_count
    rep.write(out / "tvla_report.txt")
    first = res.first_leaky_trace_count
    print(f"tvla traces={n} max_abs_t={res.max_abs_t:.3f} leaky={'yes' if res.leaky else 'no'} "
          f"first_leaky={first if first is not None else 'none'}")
    return EXIT_OK


# -- detect -----------------------------------------------------------------------

def cmd_detect(args) -> int:
    cfg = _load(args)
    a = cfg.attack
    drop = a.vdd_drop if args.vdd_drop is None else args.vdd_drop
    ramp = a.ramp if args.ramp is None else args.ramp
    if not 0 <= drop < cfg.device.vdd:
        raise ConfigError(f"vdd drop must be in [0, {cfg.device.vdd}) V, got {drop}")
    if ramp < 0:
        raise ConfigError("ramp must be >= 0")
    res = simulate_detection(cfg.device, cfg.smc, cfg.leakage, cfg.detector, drop, ramp, a.t_start,
                             a.duration, a.substep, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    step = int(round(cfg.detector.period / a.substep))
    idx = np.arange(step - 1, res.times.size, step)
    write_csv(out / "counter_trace.csv",
              ["time_s", "v_dd", "v_aes", "n_on", "aes_running", "count_vdd", "count_vaes", "encryptions"],
              zip(res.times[idx], res.v_dd[idx], res.v_aes[idx], res.n_on[idx], res.aes_running[idx],
                  res.count_vdd[idx], res.count_vaes[idx], res.encryptions[idx]))
    rep = RunReport()
    rep["command"] = "detect"
    rep.update(cfg.snapshot(), prefix="config.")
    rep["scenario.vdd_drop_v"] = drop
    rep["scenario.ramp_s"] = ramp
    rep["scenario.drop_start_s"] = res.drop_start
    rep["scenario.drop_end_s"] = res.drop_end
    rep["timing.simulated_s"] = a.duration
    rep["detected"] = res.detected
    rep["detection_time_s"] = res.detection_time
    rep["latency_s"] = res.latency
    for i, ev in enumerate(res.events):
        rep[f"event.{i}.time_s"] = ev.time
        rep[f"event.{i}.count_vdd"] = ev.count_vdd
        rep[f"event.{i}.count_vaes"] = ev.count_vaes
        rep[f"event.{i}.threshold"] = ev.threshold
    rep["encryptions_under_attack"] = res.encryptions_under_attack
    rep["encryptions_after_halt"] = res.encryptions_after_halt
    rep["budget_traces"] = ATTACK_BUDGET_TRACES
    rep["budget_percent"] = 100.0 * res.budget_fraction()
    if a.threshold_sweep:
        rows = _threshold_sweep(cfg, drop, ramp)
        write_csv(out / "detection_probability.csv", ["diff_threshold", "runs", "detected", "probability"], rows)
        rep["sweep.thresholds"] = ",".join(str(r[0]) for r in rows)
        rep["sweep.probabilities"] = ",".join(repr(r[3]) for r in rows)
    rep.write(out / "detect_report.txt")
    if res.detected:
        print(f"attack detected at t={res.detection_time * 1e3:.3f} ms "
              f"(latency {res.latency * 1e3:.3f} ms); encryptions before halt "
              f"{res.encryptions_under_attack} = {100 * res.budget_fraction():.3f}% of {ATTACK_BUDGET_TRACES}")
    else:
        print("no attack detected")
    return EXIT_OK


def _threshold_sweep(cfg: ExperimentConfig, drop: float, ramp: float) -> list[tuple]:
    a = cfg.attack
    rows = []
    for thr in sorted(set(a.threshold_sweep)):
        det = replace(cfg.detector, diff_threshold=thr)
        hits = 0
        for run in range(a.sweep_runs):
            r = simulate_detection(cfg.device, cfg.smc, cfg.leakage, det, drop, ramp, a.t_start, a.duration,
                                   a.substep, cfg.seed + run)
            hits += r.detected
        rows.append((thr, a.sweep_runs, hits, hits / a.sweep_runs))
    return rows


# -- entry point ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rstellar", description="Signature-attenuation PDN simulator and SCA toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate power and EM-proxy trace files")
    s.add_argument("--config", required=True)
    s.add_argument("--mode", choices=[m.value for m in Mode], required=True)
    s.add_argument("--n-traces", type=_nonneg_int)
    s.add_argument("--set", choices=["attack", "fixed", "random"], default="attack",
                   help="plaintext population: random attack set or a TVLA class")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("attack", help="CPA, CEMA or spectral CPA on a trace file")
    a.add_argument("--traces", required=True)
    a.add_argument("--method", choices=["cpa", "cema", "spectral"], default="cpa")
    a.add_argument("--byte", type=_byte, default=0)
    a.add_argument("--averaging", type=_positive_int, default=1)
    a.add_argument("--max-traces", type=_positive_int)
    a.add_argument("--key", help="AES-256 key as 64 hex digits (defaults to the config or built-in key)")
    a.add_argument("--config")
    a.add_argument("--window", default="final",
                   help="sample window: 'final' (last two rounds), 'all' or START:END")
    a.add_argument("--f-lo", type=float, default=0.0)
    a.add_argument("--f-hi", type=float)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    t = sub.add_parser("tvla", help="fixed-vs-random Welch t-test")
    t.add_argument("--fixed", required=True)
    t.add_argument("--random", required=True)
    t.add_argument("--max-traces", type=_positive_int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tvla)

    d = sub.add_parser("detect", help="supply-drop attack against the detector")
    d.add_argument("--config", required=True)
    d.add_argument("--vdd-drop", type=float)
    d.add_argument("--ramp", type=float)
    d.add_argument("--seed", type=int)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_detect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceFormatError, ZeroVarianceError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except InfeasibleScenario as e:
        print(str(e), file=sys.stderr)
        return EXIT_INFEASIBLE
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
