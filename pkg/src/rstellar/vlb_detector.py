"""Supply-drop detector built from two ring-oscillator counters.

One RO runs from a divided copy of ``VDD`` (about two thirds of it), the
other from ``V_AES``.  Both are divided down and counted over a window of
``time_to_count`` detector clock cycles; a count difference above
``diff_threshold`` latches the attack flag.  In normal operation the two
voltages match, so the counts track each other.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

# guards floor() against 3.9999999 style rounding in the phase accumulators
_PHASE_EPS = 1e-9


@dataclass(frozen=True)
class DetectorConfig:
    detector_clock_hz: float = 10e3
    time_to_count: int = 5
    diff_threshold: int = 10
    divider_ratio: int = 5000
    vdd_divider_ratio: float = 2.0 / 3.0
    ro_gain: float = 1e9
    ro_offset: float = 0.0
    # relative error of the stacked-inverter divider
    divider_mismatch: float = 0.002
    # rms supply noise seen by both oscillators, volts
    v_noise_sigma: float = 2e-3
    # rms accumulated RO jitter per detector cycle, in divided-clock periods
    jitter_sigma: float = 0.05

    def __post_init__(self):
        if self.detector_clock_hz <= 0:
            raise ValueError("detector_clock_hz must be positive")
        if self.time_to_count < 1:
            raise ValueError("time_to_count must be >= 1")
        if self.diff_threshold < 0:
            raise ValueError("diff_threshold must be >= 0")
        if self.divider_ratio < 1:
            raise ValueError("divider_ratio must be >= 1")
        if not 0 < self.vdd_divider_ratio <= 1:
            raise ValueError("vdd_divider_ratio must be in (0, 1]")
        if self.v_noise_sigma < 0 or self.jitter_sigma < 0:
            raise ValueError("noise terms must be >= 0")

    @property
    def period(self) -> float:
        return 1.0 / self.detector_clock_hz

    @property
    def window(self) -> float:
        return self.time_to_count * self.period

    @property
    def effective_vdd_ratio(self) -> float:
        return self.vdd_divider_ratio * (1.0 + self.divider_mismatch)

    def ideal(self) -> "DetectorConfig":
        """Same calibration with mismatch and noise removed."""
        return replace(self, divider_mismatch=0.0, v_noise_sigma=0.0, jitter_sigma=0.0)

    def counts_per_cycle(self, v):
        f = np.maximum(self.ro_gain * np.asarray(v, dtype=np.float64) + self.ro_offset, 0.0)
        return f / self.divider_ratio / self.detector_clock_hz


@dataclass(frozen=True)
class DetectorState:
    count_vdd: int = 0
    count_vaes: int = 0
    cycles_elapsed: int = 0
    attack_flag: bool = False
    detection_time: float | None = None
    phase_vdd: float = 0.0
    phase_vaes: float = 0.0
    time: float = 0.0
    last_diff: int = 0

    def __post_init__(self):
        if self.count_vdd < 0 or self.count_vaes < 0:
            raise ValueError("counts must be >= 0")
        if self.attack_flag and self.detection_time is None:
            raise ValueError("a raised attack flag needs a detection time")


@dataclass(frozen=True)
class DetectionEvent:
    time: float
    count_vdd: int
    count_vaes: int
    threshold: int

    @property
    def difference(self) -> int:
        return abs(self.count_vdd - self.count_vaes)


def compare_counts(count_vdd: int, count_vaes: int, threshold: int) -> bool:
    return abs(int(count_vdd) - int(count_vaes)) > threshold


def _floor(x: float) -> int:
    return int(math.floor(x + _PHASE_EPS))


def detector_step(state: DetectorState, cfg: DetectorConfig, v_dd: float, v_aes: float,
                  rng: np.random.Generator | None = None) -> DetectorState:
    """Advance one detector clock cycle with the cycle-average voltages."""
    t = state.time + cfg.period
    if state.attack_flag:
        return replace(state, time=t, cycles_elapsed=state.cycles_elapsed + 1)
    v_top = cfg.effective_vdd_ratio * v_dd
    v_bot = v_aes
    jit = (0.0, 0.0)
    if rng is not None:
        if cfg.v_noise_sigma > 0:
            v_top += rng.normal(0.0, cfg.v_noise_sigma)
            v_bot += rng.normal(0.0, cfg.v_noise_sigma)
        if cfg.jitter_sigma > 0:
            jit = tuple(rng.normal(0.0, cfg.jitter_sigma, 2))
    pv = state.phase_vdd + max(float(cfg.counts_per_cycle(v_top)) + jit[0], 0.0)
    pa = state.phase_vaes + max(float(cfg.counts_per_cycle(v_bot)) + jit[1], 0.0)
    # counters hold edges seen since the window opened
    start_v = _floor(state.phase_vdd) - state.count_vdd
    start_a = _floor(state.phase_vaes) - state.count_vaes
    cv = _floor(pv) - start_v
    ca = _floor(pa) - start_a
    cycles = state.cycles_elapsed + 1
    new = replace(state, count_vdd=cv, count_vaes=ca, cycles_elapsed=cycles,
                  phase_vdd=pv, phase_vaes=pa, time=t)
    if cycles % cfg.time_to_count == 0:
        diff = abs(cv - ca)
        if diff > cfg.diff_threshold:
            return replace(new, attack_flag=True, detection_time=t, last_diff=diff)
        new = replace(new, count_vdd=0, count_vaes=0, last_diff=diff)
    return new


def halt_on_detect(attack_flag: bool) -> bool:
    """Encryption-enable signal: low once an attack has been flagged."""
    return not attack_flag


@dataclass
class DetectorRun:
    window_end_times: np.ndarray
    counts_vdd: np.ndarray
    counts_vaes: np.ndarray
    diffs: np.ndarray
    detection_time: float | None
    threshold: int

    @property
    def flags(self) -> np.ndarray:
        return self.diffs > self.threshold

    @property
    def n_false_windows(self) -> int:
        return int(np.count_nonzero(self.flags))

    @property
    def event(self) -> DetectionEvent | None:
        if self.detection_time is None:
            return None
        i = int(np.argmax(self.flags))
        return DetectionEvent(float(self.window_end_times[i]), int(self.counts_vdd[i]),
                              int(self.counts_vaes[i]), self.threshold)


def run_detector(cfg: DetectorConfig, v_dd, v_aes, rng: np.random.Generator | None = None,
                 t0: float = 0.0) -> DetectorRun:
    """Vectorized detector over per-cycle voltage arrays (no latching).

    Every complete window is compared; ``detection_time`` is the end of the
    first flagged window.  Matches repeated :func:`detector_step` calls in
    the noiseless case.
    """
    v_dd = np.asarray(v_dd, dtype=np.float64)
    v_aes = np.asarray(v_aes, dtype=np.float64)
    n = max(v_dd.size, v_aes.size)
    v_top = np.broadcast_to(cfg.effective_vdd_ratio * v_dd, (n,)).copy()
    v_bot = np.broadcast_to(v_aes, (n,)).copy()
    if rng is not None and cfg.v_noise_sigma > 0:
        v_top += rng.normal(0.0, cfg.v_noise_sigma, n)
        v_bot += rng.normal(0.0, cfg.v_noise_sigma, n)
    inc_v = cfg.counts_per_cycle(v_top)
    inc_a = cfg.counts_per_cycle(v_bot)
    if rng is not None and cfg.jitter_sigma > 0:
        inc_v = inc_v + rng.normal(0.0, cfg.jitter_sigma, n)
        inc_a = inc_a + rng.normal(0.0, cfg.jitter_sigma, n)
    ph_v = np.concatenate([[0.0], np.cumsum(np.maximum(inc_v, 0.0))])
    ph_a = np.concatenate([[0.0], np.cumsum(np.maximum(inc_a, 0.0))])
    edges = np.arange(0, n + 1, cfg.time_to_count)
    fv = np.floor(ph_v[edges] + _PHASE_EPS).astype(np.int64)
    fa = np.floor(ph_a[edges] + _PHASE_EPS).astype(np.int64)
    cv = np.diff(fv)
    ca = np.diff(fa)
    diffs = np.abs(cv - ca)
    times = t0 + edges[1:] * cfg.period
    hit = np.flatnonzero(diffs > cfg.diff_threshold)
    det = float(times[hit[0]]) if hit.size else None
    return DetectorRun(times, cv, ca, diffs, det, cfg.diff_threshold)
