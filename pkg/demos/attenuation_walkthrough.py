# %% [markdown]
# How much of the data-dependent current reaches the supply pin?
#
# The core draws a current that steps with the Hamming distance of every
# round.  A bank of current-source slices feeds the core from the supply,
# so what an attacker measures is the slice current, not the core current.

# %%
import numpy as np

from rstellar.capture import CaptureSpec, continuous_run
from rstellar.pdn_sim import NandLadderConfig, attenuation_ratio, nand_bias_voltage
from rstellar.scenario import Mode, operating_point

# %% [markdown]
# The top device of each slice is biased by a ladder of self-connected NAND
# gates.  Changing how many gates are enabled per stage moves the bias.

# %%
base = NandLadderConfig()
print(f"default bias {nand_bias_voltage(base):.4f} V")
for r in (1, 4, 7, 10, 13, 16):
    print(f"  r={r:2d} -> {nand_bias_voltage(NandLadderConfig(p=base.p, q=base.q, r=r)):.4f} V")

# %% [markdown]
# Settle each mode and replay a few hundred encryptions through it.

# %%
for mode in (Mode.UNPROTECTED, Mode.PROTECTED, Mode.DEGENERATED, Mode.VLB):
    spec = CaptureSpec(mode=mode)
    op = operating_point(mode, spec.device, spec.smc, spec.leakage)
    crypto, supply = continuous_run(spec, op, n_encryptions=300)
    att = attenuation_ratio(supply, crypto)
    print(f"{mode.value:12s} slices={op.n_on:3d} V_AES={op.v_aes:.4f} V "
          f"pp crypto={np.ptp(crypto.samples) * 1e6:6.1f} uA supply={np.ptp(supply.samples) * 1e6:7.2f} uA "
          f"attenuation={att:8.1f}")
