"""Crypto-core current synthesis from AES register activity.

Each AES clock cycle draws a rectangular current pulse whose height is
``baseline + current_per_hd * HD`` for that cycle's register transition.
Defaults put the mean power at the 275.2 uW / 0.8 V / 20 MHz operating point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aes_core import AesStateTrace, N_ROUNDS

NOMINAL_V_AES = 0.8
NOMINAL_POWER = 275.2e-6
MEAN_ROUND_HD = 64.0


@dataclass(frozen=True)
class LeakageParams:
    current_per_hd: float = 3.8125e-6
    baseline_current: float = 100e-6
    samples_per_round: int = 10
    gaussian_noise_sigma: float = 10e-6
    # oscilloscope noise on the sensed supply current (after the PDN)
    scope_noise_sigma: float = 70e-6
    em_scale: float = 5e-9
    em_noise_sigma: float = 70e-6
    rng_seed: int = 0

    def __post_init__(self):
        if self.samples_per_round < 1:
            raise ValueError("samples_per_round must be >= 1")
        if self.current_per_hd <= 0:
            raise ValueError("current_per_hd must be positive")
        for name in ("gaussian_noise_sigma", "scope_noise_sigma", "em_noise_sigma", "baseline_current"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def mean_current(self) -> float:
        return self.baseline_current + self.current_per_hd * MEAN_ROUND_HD


@dataclass(frozen=True)
class CurrentWaveform:
    """Uniformly sampled current; ``samples`` may be 1-D or ``(N, S)``."""

    samples: np.ndarray
    dt: float
    t0: float = 0.0

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.samples.shape[-1])

    def __len__(self) -> int:
        return self.samples.shape[-1]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, *stream)``."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def crypto_current_batch(round_hd: np.ndarray, params: LeakageParams,
                         rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-sample crypto current for ``(N, R)`` round HDs -> ``(N, R * spr)``."""
    hd = np.asarray(round_hd, dtype=np.float64)
    levels = params.baseline_current + params.current_per_hd * hd
    out = np.repeat(levels, params.samples_per_round, axis=-1)
    if params.gaussian_noise_sigma > 0:
        if rng is None:
            rng = make_rng(params.rng_seed)
        out = out + rng.normal(0.0, params.gaussian_noise_sigma, size=out.shape)
    return out


def synthesize_crypto_current(state_trace: AesStateTrace, params: LeakageParams,
                              aes_clock_hz: float, rng: np.random.Generator | None = None) -> CurrentWaveform:
    if not aes_clock_hz > 0:
        raise ValueError("aes_clock_hz must be positive")
    hd = np.array(state_trace.round_hd(), dtype=np.float64)
    assert hd.shape == (N_ROUNDS,)
    samples = crypto_current_batch(hd[None, :], params, rng)[0]
    return CurrentWaveform(samples, dt=1.0 / (aes_clock_hz * params.samples_per_round))


def em_proxy_batch(supply: np.ndarray, dt: float, params: LeakageParams,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """AC-coupled probe proxy: scaled first difference of the supply plus noise."""
    s = np.asarray(supply, dtype=np.float64)
    diff = np.diff(s, axis=-1, prepend=s[..., :1])
    em = (params.em_scale / dt) * diff
    if params.em_noise_sigma > 0:
        if rng is None:
            rng = make_rng(params.rng_seed, 1)
        em = em + rng.normal(0.0, params.em_noise_sigma, size=em.shape)
    return em


def derive_em_proxy(supply: CurrentWaveform, params: LeakageParams,
                    rng: np.random.Generator | None = None) -> CurrentWaveform:
    return CurrentWaveform(em_proxy_batch(supply.samples, supply.dt, params, rng), supply.dt, supply.t0)


def mean_power(waveform: CurrentWaveform, v_aes: float = NOMINAL_V_AES) -> float:
    return float(np.mean(waveform.samples)) * v_aes
