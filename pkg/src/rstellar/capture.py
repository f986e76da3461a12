"""Seeded, batched trace generation for each protection mode.

Every batch is a pure function of ``(seed, stream, batch_index)``, so the
same traces come out whether batches run sequentially or in a worker pool.
Each trace is one AES-256 encryption preceded by a few warm-up cycles of
unrelated activity so the PDN node starts from a realistic state.
"""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .aes_core import N_ROUNDS, encrypt_batch, expand_key, round_hd_batch
from .leakage_model import CurrentWaveform, LeakageParams, crypto_current_batch, em_proxy_batch, make_rng
from .pdn_sim import DeviceConfig, SmcConfig, simulate_node
from .scenario import Mode, OperatingPoint, operating_point
from .sca_toolkit import TraceSet

BATCH_SIZE = 4096
WORKERS_ENV = "RSTELLAR_WORKERS"
DEFAULT_KEY = bytes(range(32))
FIXED_PLAINTEXT = bytes(16)

# stream ids for independent trace populations
STREAM_ATTACK = 0
STREAM_TVLA_FIXED = 1
STREAM_TVLA_RANDOM = 2
STREAM_CONTINUOUS = 3


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


@dataclass(frozen=True)
class CaptureSpec:
    mode: Mode
    device: DeviceConfig = field(default_factory=DeviceConfig)
    leakage: LeakageParams = field(default_factory=LeakageParams)
    smc: SmcConfig = field(default_factory=SmcConfig)
    key: bytes = DEFAULT_KEY
    vdd_drop: float = 0.35
    warmup_rounds: int = 28
    fixed_plaintext: bytes | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if len(self.key) != 32:
            raise ValueError("key must be 32 bytes")
        if self.warmup_rounds < 0:
            raise ValueError("warmup_rounds must be >= 0")
        if self.fixed_plaintext is not None and len(self.fixed_plaintext) != 16:
            raise ValueError("fixed_plaintext must be 16 bytes")

    @property
    def seed(self) -> int:
        return self.leakage.rng_seed

    @property
    def dt(self) -> float:
        return 1.0 / (self.device.aes_clock_hz * self.leakage.samples_per_round)

    @property
    def sample_rate_hz(self) -> float:
        return 1.0 / self.dt

    @property
    def n_samples(self) -> int:
        return N_ROUNDS * self.leakage.samples_per_round

    def with_seed(self, seed: int) -> "CaptureSpec":
        return replace(self, leakage=replace(self.leakage, rng_seed=seed))

    def metadata(self, op: OperatingPoint, channel: str) -> dict:
        return {"mode": self.mode.value, "channel": channel, "key": self.key.hex(),
                "sample_rate_hz": self.sample_rate_hz, "seed": self.seed,
                "n_on": op.n_on, "v_dd": op.v_dd, "v_aes": op.v_aes}


def generate_batch(spec: CaptureSpec, op: OperatingPoint, n: int, stream: int = STREAM_ATTACK,
                   batch_index: int = 0) -> tuple[TraceSet, TraceSet]:
    """``n`` power traces and the matching EM-proxy traces."""
    rng = make_rng(spec.seed, stream, batch_index)
    if spec.fixed_plaintext is None:
        pts = rng.integers(0, 256, size=(n, 16), dtype=np.uint8)
    else:
        pts = np.tile(np.frombuffer(spec.fixed_plaintext, dtype=np.uint8), (n, 1))
    states = encrypt_batch(spec.key, pts, expand_key(spec.key))
    hd = round_hd_batch(states)
    warm = rng.binomial(128, 0.5, size=(n, spec.warmup_rounds))
    i_crypto = crypto_current_batch(np.concatenate([warm, hd], axis=1), spec.leakage, rng)
    skip = spec.warmup_rounds * spec.leakage.samples_per_round
    bank = op.bank(spec.device)
    if bank is None:
        supply = i_crypto
    else:
        supply, _ = simulate_node(i_crypto, op.v_aes, bank, op.v_dd, spec.device.c_total,
                                  spec.device.g_bleed, spec.dt)
    supply = supply[:, skip:]
    power = supply + rng.normal(0.0, spec.leakage.scope_noise_sigma, size=supply.shape) \
        if spec.leakage.scope_noise_sigma > 0 else supply
    em = em_proxy_batch(supply, spec.dt, spec.leakage, rng)
    cts = states[:, -1, :]
    return (TraceSet(power.astype(np.float32), pts, cts, spec.metadata(op, "power")),
            TraceSet(em.astype(np.float32), pts, cts, spec.metadata(op, "em")))


def _batch_job(args):
    spec, op, n, stream, b = args
    return generate_batch(spec, op, n, stream, b)


def iter_batches(spec: CaptureSpec, n_traces: int, stream: int = STREAM_ATTACK,
                 op: OperatingPoint | None = None, workers: int | None = None,
                 batch_size: int = BATCH_SIZE) -> Iterator[tuple[TraceSet, TraceSet]]:
    """Yield ``(power, em)`` batches in index order."""
    if n_traces < 0:
        raise ValueError("n_traces must be >= 0")
    if op is None:
        op = operating_point(spec.mode, spec.device, spec.smc, spec.leakage, spec.vdd_drop)
    jobs = [(spec, op, min(batch_size, n_traces - s), stream, b)
            for b, s in enumerate(range(0, n_traces, batch_size))]
    workers = worker_count() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        for job in jobs:
            yield _batch_job(job)
        return
    try:
        pool = ProcessPoolExecutor(max_workers=workers)
    except (OSError, NotImplementedError):
        for job in jobs:
            yield _batch_job(job)
        return
    with pool:
        # bounded look-ahead keeps memory flat for long streams
        window = 2 * workers
        pending = [pool.submit(_batch_job, j) for j in jobs[:window]]
        nxt = window
        while pending:
            fut = pending.pop(0)
            if nxt < len(jobs):
                pending.append(pool.submit(_batch_job, jobs[nxt]))
                nxt += 1
            yield fut.result()


def capture(spec: CaptureSpec, n_traces: int, stream: int = STREAM_ATTACK, op: OperatingPoint | None = None,
            workers: int | None = None) -> tuple[TraceSet, TraceSet]:
    """Whole trace sets for one stream (power, em)."""
    if op is None:
        op = operating_point(spec.mode, spec.device, spec.smc, spec.leakage, spec.vdd_drop)
    parts = list(iter_batches(spec, n_traces, stream, op, workers))
    if not parts:
        empty = np.zeros((0, spec.n_samples), dtype=np.float32)
        z = np.zeros((0, 16), dtype=np.uint8)
        return (TraceSet(empty, z, z, spec.metadata(op, "power")),
                TraceSet(empty.copy(), z, z, spec.metadata(op, "em")))
    return (TraceSet.concatenate([p for p, _ in parts]), TraceSet.concatenate([e for _, e in parts]))


def tvla_sets(spec: CaptureSpec, n_traces: int, op: OperatingPoint | None = None,
              workers: int | None = None) -> tuple[TraceSet, TraceSet]:
    """Fixed-plaintext and random-plaintext power sets of equal size."""
    if op is None:
        op = operating_point(spec.mode, spec.device, spec.smc, spec.leakage, spec.vdd_drop)
    fixed_spec = replace(spec, fixed_plaintext=spec.fixed_plaintext or FIXED_PLAINTEXT)
    rand_spec = replace(spec, fixed_plaintext=None)
    fixed, _ = capture(fixed_spec, n_traces, STREAM_TVLA_FIXED, op, workers)
    rand, _ = capture(rand_spec, n_traces, STREAM_TVLA_RANDOM, op, workers)
    return fixed, rand


def iter_tvla_batches(spec: CaptureSpec, n_traces: int, op: OperatingPoint | None = None,
                      workers: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    if op is None:
        op = operating_point(spec.mode, spec.device, spec.smc, spec.leakage, spec.vdd_drop)
    fixed_spec = replace(spec, fixed_plaintext=spec.fixed_plaintext or FIXED_PLAINTEXT)
    rand_spec = replace(spec, fixed_plaintext=None)
    fi = iter_batches(fixed_spec, n_traces, STREAM_TVLA_FIXED, op, workers)
    ri = iter_batches(rand_spec, n_traces, STREAM_TVLA_RANDOM, op, workers)
    for (f, _), (r, _) in zip(fi, ri):
        yield f.samples, r.samples


def continuous_run(spec: CaptureSpec, op: OperatingPoint, n_encryptions: int = 400, settle: int = 40,
                   stream: int = STREAM_CONTINUOUS) -> tuple[CurrentWaveform, CurrentWaveform]:
    """Back-to-back random encryptions as one waveform, scope noise excluded.

    Returns ``(crypto, supply)`` with the first ``settle`` encryptions cut so
    only the steady state remains.
    """
    if n_encryptions <= settle:
        raise ValueError("n_encryptions must exceed settle")
    rng = make_rng(spec.seed, stream)
    pts = rng.integers(0, 256, size=(n_encryptions, 16), dtype=np.uint8)
    hd = round_hd_batch(encrypt_batch(spec.key, pts)).reshape(1, -1)
    i_crypto = crypto_current_batch(hd, spec.leakage, rng)[0]
    bank = op.bank(spec.device)
    if bank is None:
        supply = i_crypto.copy()
    else:
        supply, _ = simulate_node(i_crypto, op.v_aes, bank, op.v_dd, spec.device.c_total,
                                  spec.device.g_bleed, spec.dt)
    cut = settle * spec.n_samples
    return (CurrentWaveform(i_crypto[cut:], spec.dt), CurrentWaveform(supply[cut:], spec.dt))
