# %% [markdown]
# Lowering the supply so the slices drop into their linear region.
#
# With less headroom the controller turns on more slices, each one now a
# small resistor, and the data-dependent current leaks back out.

# %%
from rstellar.leakage_model import LeakageParams
from rstellar.pdn_sim import DeviceConfig, SmcConfig
from rstellar.scenario import (InfeasibleScenario, Mode, operating_point, simulate_detection,
                               simulate_vlb_settle, vlb_budget)
from rstellar.vlb_detector import DetectorConfig

dev, smc, leak = DeviceConfig(), SmcConfig(), LeakageParams()

# %%
for drop in (0.25, 0.3, 0.35, 0.4, 0.42):
    try:
        b = vlb_budget(dev, leak, drop)
    except ValueError as e:
        # too little drop: the slices never leave saturation
        print(f"drop {drop:.2f} V: {e}")
        continue
    print(f"drop {drop:.2f} V: {b.describe()} feasible={b.feasible}")

# %% [markdown]
# Controller trajectory after a 0.35 V step.

# %%
res = simulate_vlb_settle(dev, smc, leak, 0.35)
for t, n, v, run, reg in list(zip(res.times, res.n_on, res.v_aes, res.aes_running, res.regions))[::40]:
    print(f"t={t * 1e3:6.2f} ms slices={n:3d} V_AES={v:.4f} running={run} {reg.value}")
print("final:", res.final.n_on, "slices,", res.final.region.value)

try:
    operating_point(Mode.VLB, dev, smc, leak, vdd_drop=0.42)
except InfeasibleScenario as e:
    print("0.42 V drop:", e)

# %% [markdown]
# The two ring-oscillator counters disagree as soon as V_AES stops
# tracking the divided supply, and encryption halts.

# %%
det = simulate_detection(dev, smc, leak, DetectorConfig(), 0.35)
print(f"flag at {det.detection_time * 1e3:.2f} ms, latency {det.latency * 1e3:.2f} ms, "
      f"{det.encryptions_under_attack} encryptions under attack, {det.encryptions_after_halt} after halt")
