from dataclasses import replace

import numpy as np
import pytest

from rstellar.leakage_model import LeakageParams
from rstellar.pdn_sim import CsMode, DeviceConfig, Region, SmcConfig
from rstellar.scenario import (
    InfeasibleScenario,
    Mode,
    brute_force_slices,
    node_voltage,
    operating_point,
    settle_smc,
    simulate_vlb_settle,
    vlb_budget,
)

DEV, SMC, LEAK = DeviceConfig(), SmcConfig(), LeakageParams()


def _random_linear_configs(count, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < count:
        dev = replace(DEV, k_device=float(rng.uniform(2e-4, 8e-4)), v_t=float(rng.uniform(0.18, 0.28)),
                      g_bleed=float(rng.uniform(0.0, 4e-4)))
        leak = replace(LEAK, current_per_hd=float(rng.uniform(2e-6, 6e-6)),
                       baseline_current=float(rng.uniform(60e-6, 140e-6)))
        drop = float(rng.uniform(0.25, 0.45))
        try:
            b = vlb_budget(dev, leak, drop)
        except ValueError:
            continue  # supply too low for a linear-region bias
        out.append((dev, leak, drop, b))
    return out


def test_closed_form_matches_brute_force():
    configs = _random_linear_configs(40)
    n_feasible = 0
    for dev, leak, drop, b in configs:
        brute = brute_force_slices(dev, leak, dev.vdd - drop)
        if b.feasible:
            n_feasible += 1
            assert brute == b.n_required
        else:
            assert brute is None
    assert n_feasible >= 20


def test_default_budget():
    b = vlb_budget(DEV, LEAK, 0.35)
    assert b.feasible and b.n_required <= DEV.n_max
    assert brute_force_slices(DEV, LEAK, DEV.vdd - 0.35) == b.n_required


def test_infeasible_drop_browns_out():
    b = vlb_budget(DEV, LEAK, 0.42)
    assert not b.feasible and b.n_required > DEV.n_max
    assert brute_force_slices(DEV, LEAK, DEV.vdd - 0.42) is None
    res = simulate_vlb_settle(DEV, SMC, LEAK, 0.42)
    assert res.brown_out
    assert not res.aes_running[-1]
    assert res.n_on[-1] == DEV.n_max
    with pytest.raises(InfeasibleScenario) as err:
        operating_point(Mode.VLB, DEV, SMC, LEAK, vdd_drop=0.42)
    assert err.value.n_required == b.n_required
    assert err.value.n_max == DEV.n_max


def test_small_slice_budget_infeasible():
    with pytest.raises(InfeasibleScenario):
        operating_point(Mode.VLB, replace(DEV, n_max=100), SMC, LEAK)


def test_operating_points():
    prot = operating_point(Mode.PROTECTED, DEV, SMC, LEAK)
    assert prot.region == Region.SATURATION and prot.settled and not prot.brown_out
    assert prot.v_aes >= DEV.v_aes_min
    vlb = operating_point(Mode.VLB, DEV, SMC, LEAK)
    assert vlb.region == Region.LINEAR
    assert vlb.n_on > prot.n_on
    unp = operating_point("unprotected", DEV, SMC, LEAK)
    assert unp.bank(DEV) is None


def test_node_voltage_disabled_core_sits_higher():
    bank = DEV.bank(CsMode.CASCODED, 53)
    v_on, r_on = node_voltage(bank, DEV.vdd, DEV, LEAK)
    v_off, r_off = node_voltage(bank, DEV.vdd, DEV, LEAK, enabled=False)
    assert r_on and not r_off
    assert v_off > v_on


def test_settle_is_start_independent():
    a = settle_smc(DEV, SMC, LEAK, CsMode.CASCODED, DEV.vdd, n_start=1)
    b = settle_smc(DEV, SMC, LEAK, CsMode.CASCODED, DEV.vdd, n_start=200)
    assert abs(a.n_on - b.n_on) <= 2
