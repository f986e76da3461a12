"""Behavioral model of the signature-attenuation power delivery network.

The AES core hangs off an internal node ``V_AES`` that is fed by a bank of
identical PMOS current-source slices from ``VDD``.  A ring-oscillator bleed
(``g_bleed * V_AES``) gives local negative feedback, and a slow switched-mode
controller (SMC) turns slices on and off from a divided RO count.

Two integrators are provided: an explicit per-sample stepper
(:func:`step_pdn`, :func:`simulate_node`) for waveform capture, and a
quasi-static equilibrium solver (:func:`equilibrium_v_aes`) for SMC-rate
settling where the node time constant is far below the SMC period.
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq

from .leakage_model import CurrentWaveform

log = logging.getLogger(__name__)

NANDS_PER_STAGE = 16


class Region(str, enum.Enum):
    SATURATION = "saturation"
    LINEAR = "linear"
    CUTOFF = "cutoff"


class CsMode(str, enum.Enum):
    CASCODED = "cascoded"
    DEGENERATED = "degenerated"


class PdnDivergenceError(RuntimeError):
    """Explicit integration step too coarse for the node dynamics."""


# -- bias ladder -------------------------------------------------------------

@dataclass(frozen=True)
class NandLadderConfig:
    """Three stacked stages of 16 self-connected NANDs forming a divider.

    ``p``, ``q``, ``r`` count the enabled (self-biased) gates in the bottom,
    middle and top stage.
    """

    p: int = 7
    q: int = 15
    r: int = 7
    r_on: float = 10e3
    r_off: float = 170.7e3
    vdd: float = 1.2
    stages: int = 3
    nands_per_stage: int = NANDS_PER_STAGE

    def __post_init__(self):
        for name in ("p", "q", "r"):
            v = getattr(self, name)
            if not 0 <= v <= self.nands_per_stage:
                raise ValueError(f"{name}={v} outside 0..{self.nands_per_stage}")
        if not self.r_off > self.r_on > 0:
            raise ValueError("need r_off > r_on > 0")
        if self.stages != 3:
            raise ValueError("the bias ladder has exactly three stages")


def stage_impedance(on_count: int, r_on: float, r_off: float, n: int = NANDS_PER_STAGE) -> float:
    """``(r_on/on) || (r_off/(n-on))`` with the degenerate ends handled."""
    if on_count == 0:
        return r_off / n
    if on_count == n:
        return r_on / n
    z_on = r_on / on_count
    z_off = r_off / (n - on_count)
    return z_on * z_off / (z_on + z_off)


def nand_bias_voltage(cfg: NandLadderConfig) -> float:
    n = cfg.nands_per_stage
    z_bot = stage_impedance(cfg.p, cfg.r_on, cfg.r_off, n)
    z_mid = stage_impedance(cfg.q, cfg.r_on, cfg.r_off, n)
    z_top = stage_impedance(cfg.r, cfg.r_on, cfg.r_off, n)
    return cfg.vdd * (z_bot + z_mid) / (z_bot + z_mid + z_top)


# -- device model ------------------------------------------------------------

def pmos_slice_current(v_sg, v_sd, k, v_t, lam=0.0):
    """Square-law PMOS drain current; works on scalars and arrays.

    ``lam`` is a first-order output-conductance factor ``(1 + lam*v_sd)``
    applied in both regions so the boundary stays continuous.
    """
    v_sg = np.asarray(v_sg, dtype=np.float64)
    v_sd = np.asarray(v_sd, dtype=np.float64)
    v_ov = np.maximum(v_sg - v_t, 0.0)
    lin = k * (v_ov - 0.5 * v_sd) * v_sd
    sat = 0.5 * k * v_ov * v_ov
    i = np.where(v_sd < v_ov, lin, sat) * (1.0 + lam * v_sd)
    i = np.where(v_sg <= v_t, 0.0, i)
    return i if i.ndim else float(i)


def pmos_region(v_sg: float, v_sd: float, v_t: float) -> Region:
    if v_sg <= v_t:
        return Region.CUTOFF
    if v_sd < v_sg - v_t:
        return Region.LINEAR
    return Region.SATURATION


@dataclass(frozen=True)
class CsSliceBank:
    """Identical parallel slices sharing terminal voltages.

    Gate biases are stored at ``vdd_nominal`` and scale with the supply,
    since both the NAND ladder and the self-biased inverter are dividers.
    """

    n_max: int = 512
    n_on: int = 0
    k_device: float = 400e-6
    v_t: float = 0.23
    v_bias_top: float = 0.72
    v_bias_bottom: float = 0.6
    vdd_nominal: float = 1.2
    lam: float = 0.5
    cascode_gain: float = 40.0
    mode: CsMode = CsMode.CASCODED

    def __post_init__(self):
        if not 0 <= self.n_on <= self.n_max:
            raise ValueError(f"n_on={self.n_on} outside 0..{self.n_max}")
        if self.v_t <= 0:
            raise ValueError("v_t must be positive")
        if self.cascode_gain < 1:
            raise ValueError("cascode_gain must be >= 1")

    def with_n_on(self, n_on: int) -> "CsSliceBank":
        return replace(self, n_on=int(min(max(n_on, 0), self.n_max)))

    def gate_voltage(self, v_dd):
        # degenerated: the top device is bypassed and the VDD/2 bias sets the current
        bias = self.v_bias_top if self.mode == CsMode.CASCODED else self.v_bias_bottom
        return bias * (v_dd / self.vdd_nominal)

    @property
    def lam_eff(self) -> float:
        return self.lam / self.cascode_gain if self.mode == CsMode.CASCODED else self.lam

    def v_sg(self, v_dd):
        return v_dd - self.gate_voltage(v_dd)

    def slice_current(self, v_dd, v_aes):
        v_sd = np.maximum(np.asarray(v_dd) - v_aes, 0.0)
        return pmos_slice_current(self.v_sg(v_dd), v_sd, self.k_device, self.v_t, self.lam_eff)

    def current(self, v_dd, v_aes):
        return self.n_on * self.slice_current(v_dd, v_aes)

    def region(self, v_dd: float, v_aes: float) -> Region:
        return pmos_region(float(self.v_sg(v_dd)), max(v_dd - v_aes, 0.0), self.v_t)


# -- node state and stepping -------------------------------------------------

@dataclass(frozen=True)
class PdnState:
    v_dd: float
    v_aes: float
    c_load: float = 150e-12
    c_decap: float = 30e-12
    g_bleed: float = 400e-6
    bleed_current: float = 0.0
    smc_counter: int = 0
    ro_phase: float = 0.0
    time: float = 0.0

    def __post_init__(self):
        if self.c_load <= 0 or self.c_decap <= 0:
            raise ValueError("capacitances must be positive")
        if not 0.0 <= self.v_aes <= self.v_dd:
            raise ValueError(f"v_aes={self.v_aes} outside [0, v_dd={self.v_dd}]")

    @property
    def c_total(self) -> float:
        return self.c_load + self.c_decap


@dataclass(frozen=True)
class SmcConfig:
    smc_clock_hz: float = 10e3
    ro_freq_per_volt: float = 1e9
    ro_freq_offset: float = 0.0
    divider_ratio: int = 64
    target_count: int = 1250
    hysteresis: int = 32

    def __post_init__(self):
        if self.smc_clock_hz <= 0:
            raise ValueError("smc_clock_hz must be positive")
        if self.divider_ratio < 1:
            raise ValueError("divider_ratio must be >= 1")
        if self.hysteresis < 0:
            raise ValueError("hysteresis must be >= 0")

    def ro_frequency(self, v):
        return np.maximum(self.ro_freq_per_volt * np.asarray(v) + self.ro_freq_offset, 0.0)

    def expected_count(self, v_aes: float) -> float:
        return float(self.ro_frequency(v_aes)) / self.divider_ratio / self.smc_clock_hz

    def calibrated(self, v_target: float) -> "SmcConfig":
        """Copy with ``target_count`` set from the nominal operating voltage."""
        return replace(self, target_count=int(round(self.expected_count(v_target))))

    def band_voltage(self, count: float) -> float:
        """Inverse of :meth:`expected_count`."""
        f = count * self.divider_ratio * self.smc_clock_hz
        return (f - self.ro_freq_offset) / self.ro_freq_per_volt


def step_pdn(state: PdnState, bank: CsSliceBank, smc: SmcConfig, i_crypto: float,
             dt: float) -> tuple[PdnState, float]:
    """Advance the ``V_AES`` node by one explicit step.

    Returns the new state and the supply current drawn through the slices
    during the step (the attacker's observable).  The divided RO edge count
    accumulates in ``smc_counter`` until :func:`smc_step` consumes it.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    i_supply = float(bank.current(state.v_dd, state.v_aes))
    i_bleed = state.g_bleed * state.v_aes
    dv = dt * (i_supply - i_crypto - i_bleed) / state.c_total
    if abs(dv) > state.v_dd / 2:
        raise PdnDivergenceError(f"V_AES step {dv:.3g} V exceeds v_dd/2; reduce dt")
    v_new = min(max(state.v_aes + dv, 0.0), state.v_dd)
    phase = state.ro_phase + float(smc.ro_frequency(state.v_aes)) * dt / smc.divider_ratio
    new = replace(state, v_aes=v_new, bleed_current=i_bleed, ro_phase=phase,
                  smc_counter=int(math.floor(phase)), time=state.time + dt)
    return new, i_supply


def smc_step(state: PdnState, bank: CsSliceBank, smc: SmcConfig) -> int:
    """SMC decision for one controller period; returns the new ``n_on``."""
    count = state.smc_counter
    n = bank.n_on
    if count < smc.target_count - smc.hysteresis:
        n += 1
    elif count > smc.target_count + smc.hysteresis:
        n -= 1
    return min(max(n, 0), bank.n_max)


def reset_counter(state: PdnState) -> PdnState:
    return replace(state, smc_counter=0, ro_phase=0.0)


def simulate_node(i_crypto: np.ndarray, v0, bank: CsSliceBank, v_dd: float, c_total: float,
                  g_bleed: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`step_pdn` over independent rows of ``i_crypto``.

    ``i_crypto`` has shape ``(N, S)`` (or ``(S,)``); ``v0`` is the starting
    node voltage per row.  Returns ``(supply, v_aes)`` sampled at the start of
    every step, both shaped like ``i_crypto``.
    """
    ic = np.atleast_2d(np.asarray(i_crypto, dtype=np.float64))
    n_rows, n_steps = ic.shape
    v = np.broadcast_to(np.asarray(v0, dtype=np.float64), (n_rows,)).copy()
    supply = np.empty_like(ic)
    vtrace = np.empty_like(ic)
    n_on = bank.n_on
    k = bank.k_device
    v_t = bank.v_t
    lam = bank.lam_eff
    v_ov = max(float(bank.v_sg(v_dd)) - v_t, 0.0)
    half_k_vov2 = 0.5 * k * v_ov * v_ov
    gain = dt / c_total
    limit = v_dd / 2
    for j in range(n_steps):
        v_sd = v_dd - v
        i_s = np.where(v_sd < v_ov, k * (v_ov - 0.5 * v_sd) * v_sd, half_k_vov2)
        i_s *= n_on * (1.0 + lam * v_sd)
        supply[:, j] = i_s
        vtrace[:, j] = v
        dv = gain * (i_s - ic[:, j] - g_bleed * v)
        if np.any(np.abs(dv) > limit):
            raise PdnDivergenceError("V_AES step exceeds v_dd/2; reduce dt")
        v = np.clip(v + dv, 0.0, v_dd)
    if np.ndim(i_crypto) == 1:
        return supply[0], vtrace[0]
    return supply, vtrace


def equilibrium_v_aes(bank: CsSliceBank, v_dd: float, i_load: float, g_bleed: float) -> float:
    """DC node voltage where slice current balances load plus bleed (clamped at 0)."""
    def f(v):
        return float(bank.current(v_dd, v)) - i_load - g_bleed * v
    if f(0.0) <= 0.0:
        return 0.0
    hi = f(v_dd)
    if hi >= 0.0:
        return v_dd
    return brentq(f, 0.0, v_dd, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


# -- attenuation and the linear-region attack ---------------------------------

def attenuation_ratio(supply: CurrentWaveform, crypto: CurrentWaveform) -> float:
    """RMS of the AC crypto current over RMS of the AC supply current."""
    s = np.asarray(supply.samples, dtype=np.float64).ravel()
    c = np.asarray(crypto.samples, dtype=np.float64).ravel()
    if s.shape != c.shape:
        raise ValueError("supply and crypto waveforms differ in length")
    if not math.isclose(supply.dt, crypto.dt, rel_tol=1e-12):
        raise ValueError("supply and crypto waveforms differ in dt")
    rms_s = float(np.sqrt(np.mean((s - s.mean()) ** 2)))
    rms_c = float(np.sqrt(np.mean((c - c.mean()) ** 2)))
    if rms_s == 0.0:
        log.warning("supply current has zero AC content: attenuation is infinite")
        return math.inf
    return rms_c / rms_s


def linear_slice_current(k: float, v_t: float, v_gs: float, v_ds: float, lam: float = 0.0) -> float:
    return k * (v_gs - v_t - 0.5 * v_ds) * v_ds * (1.0 + lam * v_ds)


def vlb_feasible(i_crypto_avg: float, k: float, v_t: float, v_gs: float, v_ds: float,
                 n_max: int, lam: float = 0.0) -> tuple[bool, int]:
    """Slices needed to carry ``i_crypto_avg`` with every slice in the linear region.

    ``lam`` defaults to the plain square law; pass the bank's effective value
    to match :class:`CsSliceBank` exactly.
    """
    if min(k, v_t, v_gs, v_ds) <= 0 or i_crypto_avg < 0:
        raise ValueError("vlb_feasible needs positive device voltages and constants")
    if v_ds >= v_gs - v_t:
        raise ValueError(f"v_ds={v_ds} >= v_gs - v_t={v_gs - v_t}: not in the linear region")
    if i_crypto_avg == 0:
        return True, 0
    n_req = math.ceil(i_crypto_avg / linear_slice_current(k, v_t, v_gs, v_ds, lam))
    return n_req <= n_max, n_req


@dataclass(frozen=True)
class VlbScenario:
    """Supply drop of ``vdd_drop`` starting at ``t_start``, linear over ``ramp``."""

    v_start: float
    vdd_drop: float
    ramp: float
    t_start: float

    @property
    def v_end(self) -> float:
        return self.v_start - self.vdd_drop

    @property
    def t_end(self) -> float:
        return self.t_start + self.ramp

    def vdd_at(self, t: float) -> float:
        if self.vdd_drop == 0 or t <= self.t_start:
            return self.v_start
        if self.ramp <= 0 or t >= self.t_end:
            return self.v_end
        return self.v_start - self.vdd_drop * (t - self.t_start) / self.ramp

    def apply(self, state: PdnState, t: float | None = None) -> PdnState:
        t = state.time if t is None else t
        v_dd = self.vdd_at(t)
        if v_dd == state.v_dd:
            return state
        return replace(state, v_dd=v_dd, v_aes=min(state.v_aes, v_dd))


def inject_vlb(state: PdnState, vdd_drop: float, ramp: float, t_start: float | None = None) -> VlbScenario:
    if vdd_drop < 0 or vdd_drop >= state.v_dd:
        raise ValueError(f"vdd_drop must be in [0, v_dd), got {vdd_drop}")
    if ramp < 0:
        raise ValueError("ramp must be >= 0")
    return VlbScenario(v_start=state.v_dd, vdd_drop=vdd_drop, ramp=ramp,
                       t_start=state.time if t_start is None else t_start)


# -- aggregate device parameters -------------------------------------------------

@dataclass(frozen=True)
class DeviceConfig:
    vdd: float = 1.2
    aes_clock_hz: float = 20e6
    v_aes_target: float = 0.8
    v_aes_min: float = 0.75
    c_load: float = 150e-12
    c_decap: float = 30e-12
    g_bleed: float = 400e-6
    n_max: int = 512
    k_device: float = 400e-6
    v_t: float = 0.23
    lam: float = 0.5
    cascode_gain: float = 40.0
    nand_p: int = 7
    nand_q: int = 15
    nand_r: int = 7
    r_on: float = 10e3
    r_off: float = 170.7e3
    v_bias_bottom_ratio: float = 0.5

    def __post_init__(self):
        if self.aes_clock_hz <= 0:
            raise ValueError("aes_clock_hz must be positive")
        if not 0 < self.v_aes_min <= self.v_aes_target < self.vdd:
            raise ValueError("need 0 < v_aes_min <= v_aes_target < vdd")

    @property
    def c_total(self) -> float:
        return self.c_load + self.c_decap

    def ladder(self, vdd: float | None = None) -> NandLadderConfig:
        return NandLadderConfig(p=self.nand_p, q=self.nand_q, r=self.nand_r, r_on=self.r_on,
                                r_off=self.r_off, vdd=self.vdd if vdd is None else vdd)

    def bank(self, mode: CsMode | str = CsMode.CASCODED, n_on: int = 0) -> CsSliceBank:
        return CsSliceBank(n_max=self.n_max, n_on=n_on, k_device=self.k_device, v_t=self.v_t,
                           v_bias_top=nand_bias_voltage(self.ladder()),
                           v_bias_bottom=self.v_bias_bottom_ratio * self.vdd,
                           vdd_nominal=self.vdd, lam=self.lam, cascode_gain=self.cascode_gain,
                           mode=CsMode(mode))

    def state(self, v_aes: float | None = None, v_dd: float | None = None) -> PdnState:
        return PdnState(v_dd=self.vdd if v_dd is None else v_dd,
                        v_aes=self.v_aes_target if v_aes is None else v_aes,
                        c_load=self.c_load, c_decap=self.c_decap, g_bleed=self.g_bleed)
