"""Operating points and time-domain scenarios built on the PDN model.

The SMC acts once per 100 us while the ``V_AES`` node settles in well under
a microsecond, so controller-rate behaviour is simulated quasi-statically:
within each sub-step the node sits at its DC equilibrium for the present
slice count, supply and load.  Cycle-accurate waveforms are left to the
capture path (:mod:`rstellar.capture`).

The AES core browns out when the node cannot hold ``v_aes_min`` while the
core is running; it then stops and only draws leakage until the node can
carry it again.  A node that can hold the idle core but not the running
one hovers at ``v_aes_min`` in a reset loop.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .leakage_model import LeakageParams, make_rng
from .pdn_sim import (CsMode, CsSliceBank, DeviceConfig, Region, SmcConfig, equilibrium_v_aes,
                      inject_vlb, linear_slice_current, smc_step, vlb_feasible)
from .aes_core import N_ROUNDS
from .vlb_detector import DetectionEvent, DetectorConfig, DetectorState, detector_step, halt_on_detect

STREAM_DETECTOR = 7
ATTACK_BUDGET_TRACES = 105_000


class InfeasibleScenario(RuntimeError):
    def __init__(self, message: str, n_required: int | None = None, n_max: int | None = None):
        super().__init__(message)
        self.n_required = n_required
        self.n_max = n_max


class Mode(str, enum.Enum):
    UNPROTECTED = "unprotected"
    PROTECTED = "protected"
    DEGENERATED = "degenerated"
    VLB = "vlb"


@dataclass(frozen=True)
class OperatingPoint:
    mode: Mode
    v_dd: float
    n_on: int
    v_aes: float
    region: Region | None
    smc_periods: int = 0
    settled: bool = True
    brown_out: bool = False
    cs_mode: CsMode | None = None

    def bank(self, dev: DeviceConfig) -> CsSliceBank | None:
        if self.cs_mode is None:
            return None
        return dev.bank(self.cs_mode, self.n_on)


def leakage_conductance(dev: DeviceConfig, leak: LeakageParams) -> float:
    """Idle AES modelled as a resistor drawing the baseline at the target voltage."""
    return leak.baseline_current / dev.v_aes_target


def node_voltage(bank: CsSliceBank, v_dd: float, dev: DeviceConfig, leak: LeakageParams,
                 enabled: bool = True) -> tuple[float, bool]:
    """Quasi-static ``(V_AES, aes_running)`` for one slice count and supply."""
    if enabled:
        v_on = equilibrium_v_aes(bank, v_dd, leak.mean_current, dev.g_bleed)
        if v_on >= dev.v_aes_min:
            return v_on, True
    v_off = equilibrium_v_aes(bank, v_dd, 0.0, dev.g_bleed + leakage_conductance(dev, leak))
    if enabled and v_off >= dev.v_aes_min:
        # the core restarts, pulls the node under v_aes_min and resets again:
        # the node hovers at the threshold and no encryption completes
        return dev.v_aes_min, False
    return v_off, False


def settle_smc(dev: DeviceConfig, smc: SmcConfig, leak: LeakageParams, cs_mode: CsMode, v_dd: float,
               n_start: int = 1, max_periods: int = 5000, mode: Mode | None = None) -> OperatingPoint:
    """Run the SMC until a period passes with no slice change."""
    bank = dev.bank(cs_mode, n_start)
    v, running = node_voltage(bank, v_dd, dev, leak)
    for k in range(1, max_periods + 1):
        count = int(math.floor(smc.expected_count(v)))
        n = smc_step(replace(dev.state(v_aes=min(v, v_dd), v_dd=v_dd), smc_counter=count), bank, smc)
        if n == bank.n_on:
            return OperatingPoint(mode or Mode(cs_mode_name(cs_mode)), v_dd, n, v,
                                  bank.region(v_dd, v), k, True, not running, cs_mode)
        bank = bank.with_n_on(n)
        v, running = node_voltage(bank, v_dd, dev, leak)
    return OperatingPoint(mode or Mode(cs_mode_name(cs_mode)), v_dd, bank.n_on, v,
                          bank.region(v_dd, v), max_periods, False, True, cs_mode)


def cs_mode_name(cs_mode: CsMode) -> str:
    return Mode.PROTECTED.value if cs_mode == CsMode.CASCODED else Mode.DEGENERATED.value


@dataclass(frozen=True)
class VlbBudget:
    """Slice budget of the linear-region attack point."""

    feasible: bool
    n_required: int
    n_max: int
    i_load: float
    v_gs: float
    v_ds: float
    i_slice: float

    def describe(self) -> str:
        return (f"n_required={self.n_required} n_max={self.n_max} i_load={self.i_load:.6g}A "
                f"v_gs={self.v_gs:.6g}V v_ds={self.v_ds:.6g}V i_slice_lin={self.i_slice:.6g}A")


def vlb_budget(dev: DeviceConfig, leak: LeakageParams, vdd_drop: float) -> VlbBudget:
    """Linear-region slice count needed to hold ``v_aes_min`` at ``vdd - vdd_drop``."""
    v_dd = dev.vdd - vdd_drop
    bank = dev.bank(CsMode.CASCODED)
    v_gs = float(bank.v_sg(v_dd))
    v_ds = v_dd - dev.v_aes_min
    if v_ds <= 0:
        raise InfeasibleScenario(f"VLB infeasible: supply {v_dd:.4g} V is below v_aes_min")
    i_load = leak.mean_current + dev.g_bleed * dev.v_aes_min
    ok, n_req = vlb_feasible(i_load, dev.k_device, dev.v_t, v_gs, v_ds, dev.n_max, lam=bank.lam_eff)
    return VlbBudget(ok, n_req, dev.n_max, i_load, v_gs, v_ds,
                     linear_slice_current(dev.k_device, dev.v_t, v_gs, v_ds, bank.lam_eff))


def brute_force_slices(dev: DeviceConfig, leak: LeakageParams, v_dd: float) -> int | None:
    """Smallest slice count whose steady state keeps the running core at ``v_aes_min``.

    Scans ``n`` upward and solves the node balance for each count, so it shares
    no algebra with :func:`vlb_budget`.
    """
    bank = dev.bank(CsMode.CASCODED)
    for n in range(dev.n_max + 1):
        v, running = node_voltage(bank.with_n_on(n), v_dd, dev, leak)
        if running:
            return n
    return None


def operating_point(mode: Mode | str, dev: DeviceConfig, smc: SmcConfig, leak: LeakageParams,
                    vdd_drop: float = 0.35) -> OperatingPoint:
    """Steady state used for trace capture in each mode."""
    mode = Mode(mode)
    if mode == Mode.UNPROTECTED:
        return OperatingPoint(mode, dev.vdd, 0, dev.v_aes_target, None)
    if mode == Mode.DEGENERATED:
        return settle_smc(dev, smc, leak, CsMode.DEGENERATED, dev.vdd, mode=mode)
    nominal = settle_smc(dev, smc, leak, CsMode.CASCODED, dev.vdd, mode=Mode.PROTECTED)
    if mode == Mode.PROTECTED:
        return nominal
    budget = vlb_budget(dev, leak, vdd_drop)
    op = settle_smc(dev, smc, leak, CsMode.CASCODED, dev.vdd - vdd_drop, n_start=nominal.n_on, mode=mode)
    if not budget.feasible or op.brown_out or not op.settled:
        raise InfeasibleScenario("VLB infeasible: " + budget.describe(), budget.n_required, budget.n_max)
    return op


# -- detection co-simulation ----------------------------------------------------------

@dataclass
class DetectionResult:
    times: np.ndarray
    v_dd: np.ndarray
    v_aes: np.ndarray
    n_on: np.ndarray
    aes_running: np.ndarray
    count_vdd: np.ndarray
    count_vaes: np.ndarray
    encryptions: np.ndarray
    detection_time: float | None
    drop_start: float
    drop_end: float
    threshold: int
    aes_clock_hz: float
    events: list[DetectionEvent] = field(default_factory=list)

    @property
    def detected(self) -> bool:
        return self.detection_time is not None

    @property
    def latency(self) -> float | None:
        """Time from the end of the supply ramp to the flag."""
        if self.detection_time is None:
            return None
        return self.detection_time - self.drop_end

    def encryptions_between(self, t0: float, t1: float) -> int:
        i0 = int(np.searchsorted(self.times, t0, side="left"))
        i1 = int(np.searchsorted(self.times, t1, side="right"))
        base = int(self.encryptions[i0 - 1]) if i0 > 0 else 0
        return int(self.encryptions[max(i1 - 1, 0)]) - base

    @property
    def encryptions_under_attack(self) -> int:
        """Encryptions completed from the start of the drop until halt."""
        end = self.detection_time if self.detection_time is not None else self.times[-1]
        return self.encryptions_between(self.drop_start, end)

    @property
    def encryptions_after_halt(self) -> int:
        if self.detection_time is None:
            return 0
        i = int(np.searchsorted(self.times, self.detection_time, side="right"))
        return int(self.encryptions[-1] - self.encryptions[i - 1])

    def budget_fraction(self, budget: int = ATTACK_BUDGET_TRACES) -> float:
        return self.encryptions_under_attack / budget


def simulate_detection(dev: DeviceConfig, smc: SmcConfig, leak: LeakageParams, det: DetectorConfig,
                       vdd_drop: float, ramp: float = 10e-6, t_start: float = 1e-3,
                       duration: float = 5e-3, substep: float = 1e-6, seed: int = 0,
                       halt: bool = True) -> DetectionResult:
    """Supply drop against the protected device with the detector and SMC in lock-step.

    Node voltages are quasi-static per ``substep``.  Once the flag rises the
    harness stops issuing encryptions (when ``halt`` is set).
    """
    sub_per_smc = _ratio(1.0 / smc.smc_clock_hz, substep, "SMC period")
    sub_per_det = _ratio(det.period, substep, "detector period")
    n_steps = int(round(duration / substep))
    nominal = settle_smc(dev, smc, leak, CsMode.CASCODED, dev.vdd, mode=Mode.PROTECTED)
    bank = dev.bank(CsMode.CASCODED, nominal.n_on)
    state = dev.state(v_aes=min(nominal.v_aes, dev.vdd))
    scenario = inject_vlb(state, vdd_drop, ramp, t_start=t_start)
    rng = make_rng(seed, STREAM_DETECTOR)

    times = (np.arange(n_steps) + 1) * substep
    v_dd_tr = np.empty(n_steps)
    v_aes_tr = np.empty(n_steps)
    n_tr = np.empty(n_steps, dtype=np.int64)
    run_tr = np.empty(n_steps, dtype=bool)
    cv_tr = np.zeros(n_steps, dtype=np.int64)
    ca_tr = np.zeros(n_steps, dtype=np.int64)
    enc_tr = np.empty(n_steps, dtype=np.int64)

    enc_period = N_ROUNDS / dev.aes_clock_hz
    run_time = 0.0
    smc_phase = 0.0
    acc_vdd = acc_vaes = 0.0
    dstate = DetectorState()
    events: list[DetectionEvent] = []
    cache: dict[tuple[int, float, bool], tuple[float, bool]] = {}
    for j in range(n_steps):
        t_mid = (j + 0.5) * substep
        v_dd = scenario.vdd_at(t_mid)
        enabled = halt_on_detect(dstate.attack_flag) or not halt
        key = (bank.n_on, v_dd, enabled)
        if key not in cache:
            cache[key] = node_voltage(bank, v_dd, dev, leak, enabled)
        v, running = cache[key]
        if running:
            run_time += substep
        v_dd_tr[j] = v_dd
        v_aes_tr[j] = v
        n_tr[j] = bank.n_on
        run_tr[j] = running
        enc_tr[j] = int(math.floor(run_time / enc_period + 1e-9))
        smc_phase += float(smc.ro_frequency(v)) * substep / smc.divider_ratio
        acc_vdd += v_dd
        acc_vaes += v
        if (j + 1) % sub_per_det == 0:
            was = dstate.attack_flag
            dstate = detector_step(dstate, det, acc_vdd / sub_per_det, acc_vaes / sub_per_det, rng)
            acc_vdd = acc_vaes = 0.0
            if dstate.attack_flag and not was:
                events.append(DetectionEvent(dstate.time, dstate.count_vdd, dstate.count_vaes,
                                             det.diff_threshold))
        cv_tr[j] = dstate.count_vdd
        ca_tr[j] = dstate.count_vaes
        if (j + 1) % sub_per_smc == 0:
            count = int(math.floor(smc_phase))
            n = smc_step(replace(state, smc_counter=count), bank, smc)
            bank = bank.with_n_on(n)
            smc_phase = 0.0

    return DetectionResult(times=times, v_dd=v_dd_tr, v_aes=v_aes_tr, n_on=n_tr, aes_running=run_tr,
                           count_vdd=cv_tr, count_vaes=ca_tr, encryptions=enc_tr,
                           detection_time=dstate.detection_time, drop_start=scenario.t_start,
                           drop_end=scenario.t_end, threshold=det.diff_threshold,
                           aes_clock_hz=dev.aes_clock_hz, events=events)


@dataclass
class VlbSettleResult:
    times: np.ndarray
    v_dd: np.ndarray
    v_aes: np.ndarray
    n_on: np.ndarray
    aes_running: np.ndarray
    regions: list[Region]
    final: OperatingPoint

    @property
    def brown_out(self) -> bool:
        return self.final.brown_out


def simulate_vlb_settle(dev: DeviceConfig, smc: SmcConfig, leak: LeakageParams, vdd_drop: float,
                        max_periods: int = 2000) -> VlbSettleResult:
    """SMC-rate trajectory after a supply step, without the detector."""
    nominal = settle_smc(dev, smc, leak, CsMode.CASCODED, dev.vdd, mode=Mode.PROTECTED)
    v_dd = dev.vdd - vdd_drop
    bank = dev.bank(CsMode.CASCODED, nominal.n_on)
    t, vs, ns, rs, regs = [], [], [], [], []
    quiet = 0
    for k in range(max_periods):
        v, running = node_voltage(bank, v_dd, dev, leak)
        t.append((k + 1) / smc.smc_clock_hz)
        vs.append(v)
        ns.append(bank.n_on)
        rs.append(running)
        regs.append(bank.region(v_dd, v))
        n = smc_step(replace(dev.state(v_aes=min(v, v_dd), v_dd=v_dd),
                             smc_counter=int(math.floor(smc.expected_count(v)))), bank, smc)
        quiet = quiet + 1 if n == bank.n_on else 0
        bank = bank.with_n_on(n)
        if quiet >= 3:
            break
    settled = quiet >= 3
    final = OperatingPoint(Mode.VLB, v_dd, bank.n_on, vs[-1], regs[-1], len(t), settled,
                           (not rs[-1]) or not settled, CsMode.CASCODED)
    return VlbSettleResult(np.array(t), np.full(len(t), v_dd), np.array(vs), np.array(ns),
                           np.array(rs), regs, final)


def _ratio(period: float, substep: float, what: str) -> int:
    r = period / substep
    k = int(round(r))
    if k < 1 or abs(r - k) > 1e-6 * r:
        raise ValueError(f"{what} must be an integer multiple of the sub-step")
    return k
