import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rstellar.capture import CaptureSpec, continuous_run
from rstellar.leakage_model import CurrentWaveform, LeakageParams
from rstellar.pdn_sim import (
    CsMode,
    CsSliceBank,
    DeviceConfig,
    NandLadderConfig,
    PdnDivergenceError,
    PdnState,
    Region,
    SmcConfig,
    attenuation_ratio,
    equilibrium_v_aes,
    inject_vlb,
    linear_slice_current,
    nand_bias_voltage,
    pmos_region,
    pmos_slice_current,
    simulate_node,
    smc_step,
    step_pdn,
    vlb_feasible,
)
from rstellar.scenario import Mode, operating_point, settle_smc, simulate_vlb_settle


def ladder_oracle(p, q, r, r_on, r_off, vdd, n=16):
    """Nodal analysis over the 48 individual gate resistors."""
    def g_stage(on):
        return on / r_on + (n - on) / r_off
    gb, gm, gt = g_stage(p), g_stage(q), g_stage(r)
    # unknowns: v1 (bottom/middle junction), v2 (middle/top junction = bias)
    a = np.array([[gb + gm, -gm], [-gm, gm + gt]])
    rhs = np.array([0.0, gt * vdd])
    return np.linalg.solve(a, rhs)[1]


def test_ladder_matches_network_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        p, q, r = (int(x) for x in rng.integers(0, 17, 3))
        r_on = float(10 ** rng.uniform(2, 5))
        r_off = r_on * float(10 ** rng.uniform(0.01, 4))
        vdd = float(rng.uniform(0.5, 1.5))
        got = nand_bias_voltage(NandLadderConfig(p, q, r, r_on, r_off, vdd))
        ref = ladder_oracle(p, q, r, r_on, r_off, vdd)
        worst = max(worst, abs(got - ref) / ref)
    assert worst < 1e-10


def test_ladder_equal_stages_give_two_thirds():
    v = nand_bias_voltage(NandLadderConfig(1, 1, 1, r_on=1e3, r_off=1e9 * 1e3, vdd=1.2))
    assert v == pytest.approx(0.8, abs=1e-5)


def test_ladder_default_bias():
    assert nand_bias_voltage(NandLadderConfig()) == pytest.approx(0.72, abs=1e-3)


def test_ladder_rejects_bad_counts():
    with pytest.raises(ValueError):
        NandLadderConfig(p=17)
    with pytest.raises(ValueError):
        NandLadderConfig(q=-1)
    with pytest.raises(ValueError):
        NandLadderConfig(r_on=10.0, r_off=5.0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 15), st.integers(0, 16), st.integers(0, 16),
       st.floats(1.5, 1e3), st.floats(0.3, 2.0))
def test_ladder_monotone_and_bounded(p, q, r, ratio, vdd):
    base = NandLadderConfig(p, q, r, 1e4, 1e4 * ratio, vdd)
    v = nand_bias_voltage(base)
    assert 0 < v < vdd
    more_p = nand_bias_voltage(NandLadderConfig(p + 1, q, r, 1e4, 1e4 * ratio, vdd))
    assert more_p < v
    if r < 16:
        more_r = nand_bias_voltage(NandLadderConfig(p, q, r + 1, 1e4, 1e4 * ratio, vdd))
        assert more_r > v


def test_pmos_examples():
    assert pmos_slice_current(0.4, 0.5, 1e-3, 0.4) == 0.0
    assert pmos_slice_current(0.7, 0.1, 1e-3, 0.4) == pytest.approx(25e-6, rel=1e-12)
    assert pmos_slice_current(0.7, 0.5, 1e-3, 0.4) == pytest.approx(0.5e-3 * 0.09, rel=1e-12)
    assert pmos_region(0.7, 0.1, 0.4) == Region.LINEAR
    assert pmos_region(0.7, 0.3, 0.4) == Region.SATURATION
    assert pmos_region(0.3, 0.3, 0.4) == Region.CUTOFF


def test_pmos_continuity_at_boundary():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k = rng.uniform(1e-5, 1e-2)
        v_t = rng.uniform(0.1, 0.6)
        v_ov = rng.uniform(1e-3, 1.0)
        lam = rng.uniform(0.0, 1.0)
        lin = linear_slice_current(k, v_t, v_t + v_ov, v_ov, lam)
        sat = pmos_slice_current(v_t + v_ov, v_ov, k, v_t, lam)
        assert abs(lin - sat) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.2), st.floats(0.0, 1.2), st.floats(0.0, 0.5))
def test_pmos_monotone_in_vsg(v_sg, v_sd, dv):
    a = pmos_slice_current(v_sg, v_sd, 4e-4, 0.23, 0.5)
    b = pmos_slice_current(v_sg + dv, v_sd, 4e-4, 0.23, 0.5)
    assert b >= a >= 0.0


def test_step_pdn_equilibrium():
    dev = DeviceConfig()
    bank = dev.bank(CsMode.CASCODED, 53)
    state = dev.state(v_aes=0.8)
    i_slices = float(bank.current(state.v_dd, state.v_aes))
    i_crypto = i_slices - state.g_bleed * state.v_aes
    new, supply = step_pdn(state, bank, SmcConfig(), i_crypto, 5e-9)
    assert abs(new.v_aes - 0.8) < 1e-15
    assert supply == i_slices
    assert new.time == pytest.approx(5e-9)


def test_step_pdn_divergence_guard():
    dev = DeviceConfig()
    bank = dev.bank(CsMode.CASCODED, 53)
    with pytest.raises(PdnDivergenceError):
        step_pdn(dev.state(), bank, SmcConfig(), 5e-3, 1e-6)
    with pytest.raises(ValueError):
        step_pdn(dev.state(), bank, SmcConfig(), 0.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 512), st.floats(0.0, 2e-3), st.floats(0.0, 1.2))
def test_node_stays_within_rails(n_on, i_load, v0):
    dev = DeviceConfig()
    bank = dev.bank(CsMode.CASCODED, n_on)
    state = dev.state(v_aes=v0)
    for _ in range(20):
        state, _ = step_pdn(state, bank, SmcConfig(), i_load, 5e-9)
        assert 0.0 <= state.v_aes <= state.v_dd


def test_state_invariants():
    with pytest.raises(ValueError):
        PdnState(v_dd=1.0, v_aes=1.1)
    with pytest.raises(ValueError):
        PdnState(v_dd=1.0, v_aes=0.5, c_load=0.0)
    with pytest.raises(ValueError):
        CsSliceBank(n_max=4, n_on=5)


def test_smc_dead_zone_and_steps():
    smc = SmcConfig()
    bank = DeviceConfig().bank(CsMode.CASCODED, 10)
    st0 = DeviceConfig().state()
    def with_count(c):
        from dataclasses import replace
        return replace(st0, smc_counter=c)
    assert smc_step(with_count(smc.target_count), bank, smc) == 10
    assert smc_step(with_count(smc.target_count + smc.hysteresis), bank, smc) == 10
    assert smc_step(with_count(smc.target_count - smc.hysteresis - 1), bank, smc) == 11
    assert smc_step(with_count(smc.target_count + smc.hysteresis + 1), bank, smc) == 9
    assert smc_step(with_count(10**6), bank.with_n_on(0), smc) == 0
    assert smc_step(with_count(0), bank.with_n_on(bank.n_max), smc) == bank.n_max


def test_smc_counter_counts_divided_ro_edges():
    dev = DeviceConfig()
    smc = SmcConfig()
    bank = dev.bank(CsMode.CASCODED, 53)
    v = equilibrium_v_aes(bank, dev.vdd, LeakageParams().mean_current, dev.g_bleed)
    state = dev.state(v_aes=v)
    for _ in range(1000):
        state, _ = step_pdn(state, bank, smc, LeakageParams().mean_current, 1e-7)
    # 100 us at the equilibrium voltage
    assert state.smc_counter == pytest.approx(smc.expected_count(v), abs=1)


def test_smc_calibration():
    smc = SmcConfig().calibrated(0.8)
    assert smc.target_count == 1250
    assert smc.band_voltage(smc.target_count) == pytest.approx(0.8)


def test_attenuation_identity_and_zero_variance():
    w = CurrentWaveform(np.sin(np.arange(100.0)), 1e-9)
    assert attenuation_ratio(w, w) == 1.0
    flat = CurrentWaveform(np.ones(100), 1e-9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert math.isinf(attenuation_ratio(flat, w))
    with pytest.raises(ValueError):
        attenuation_ratio(CurrentWaveform(np.ones(10), 1e-9), w)
    with pytest.raises(ValueError):
        attenuation_ratio(CurrentWaveform(w.samples, 2e-9), w)


def _attenuation(mode):
    spec = CaptureSpec(mode=mode)
    op = operating_point(mode, spec.device, spec.smc, spec.leakage)
    crypto, supply = continuous_run(spec, op, n_encryptions=200, settle=20)
    return attenuation_ratio(supply, crypto), np.ptp(supply.samples), np.ptp(crypto.samples)


def test_saturated_supply_peak_to_peak_attenuated():
    a, pp_s, pp_c = _attenuation(Mode.PROTECTED)
    assert pp_s <= pp_c / 100
    assert a > 100


def test_attenuation_ordering():
    prot, _, _ = _attenuation(Mode.PROTECTED)
    degen, _, _ = _attenuation(Mode.DEGENERATED)
    vlb, _, _ = _attenuation(Mode.VLB)
    assert prot / degen > 5
    assert vlb <= prot / 10


def test_steady_state_current_conservation():
    spec = CaptureSpec(mode=Mode.PROTECTED)
    dev = spec.device
    op = operating_point(Mode.PROTECTED, dev, spec.smc, spec.leakage)
    crypto, _ = continuous_run(spec, op, n_encryptions=1500, settle=50)
    # one SMC period of activity
    n = int(round(1e-4 / crypto.dt))
    ic = crypto.samples[:n]
    supply, v = simulate_node(ic, op.v_aes, op.bank(dev), op.v_dd, dev.c_total, dev.g_bleed, crypto.dt)
    imbalance = supply.mean() - ic.mean() - dev.g_bleed * v.mean()
    assert abs(imbalance) < 0.01 * ic.mean()


def test_supply_drop_droop_then_linear_recovery():
    dev, smc, leak = DeviceConfig(), SmcConfig(), LeakageParams()
    nominal = settle_smc(dev, smc, leak, CsMode.CASCODED, dev.vdd)
    assert nominal.region == Region.SATURATION
    res = simulate_vlb_settle(dev, smc, leak, 0.35)
    assert res.v_aes[0] < dev.v_aes_min
    assert not res.aes_running[0]
    assert res.final.settled and not res.brown_out
    assert res.final.region == Region.LINEAR
    assert res.final.n_on > nominal.n_on
    assert res.final.v_aes >= dev.v_aes_min


def test_lighter_load_needs_fewer_slices():
    dev, smc = DeviceConfig(), SmcConfig()
    full = settle_smc(dev, smc, LeakageParams(), CsMode.CASCODED, dev.vdd)
    idle = settle_smc(dev, smc, LeakageParams(current_per_hd=1e-12), CsMode.CASCODED, dev.vdd)
    assert idle.n_on < full.n_on


def test_vlb_feasible_examples():
    assert vlb_feasible(0.0, 4e-4, 0.23, 0.34, 0.1, 512) == (True, 0)
    i_lin = linear_slice_current(4e-4, 0.23, 0.34, 0.05)
    ok, n = vlb_feasible(10 * i_lin, 4e-4, 0.23, 0.34, 0.05, 512)
    assert ok and n == 10
    ok, n = vlb_feasible(600 * i_lin, 4e-4, 0.23, 0.34, 0.05, 512)
    assert not ok and n == 600
    with pytest.raises(ValueError):
        vlb_feasible(1e-4, 4e-4, 0.23, 0.34, 0.2, 512)


def test_inject_vlb():
    state = DeviceConfig().state()
    sc = inject_vlb(state, 0.0, 1e-5)
    assert sc.apply(state, 1.0) is state
    sc = inject_vlb(state, 0.3, 1e-5, t_start=1e-3)
    assert sc.vdd_at(0.0) == 1.2
    assert sc.vdd_at(1e-3 + 5e-6) == pytest.approx(1.05)
    assert sc.vdd_at(1.0) == pytest.approx(0.9)
    assert sc.apply(state, 1.0).v_aes <= 0.9
    with pytest.raises(ValueError):
        inject_vlb(state, -0.1, 0.0)
    with pytest.raises(ValueError):
        inject_vlb(state, 1.2, 0.0)


def test_device_config_validation():
    with pytest.raises(ValueError):
        DeviceConfig(aes_clock_hz=0)
    with pytest.raises(ValueError):
        DeviceConfig(v_aes_min=0.9)
