# %% [markdown]
# Last-round CPA against the bare core and against the protected one.

# %%
from rstellar.aes_core import last_round_key
from rstellar.capture import CaptureSpec, capture
from rstellar.scenario import Mode
from rstellar.sca_toolkit import cema_attack, cpa_attack, final_round_window

N = 20_000
window = final_round_window(140)

# %% [markdown]
# Unprotected: the supply current is the core current plus scope noise.

# %%
power, em = capture(CaptureSpec(mode=Mode.UNPROTECTED).with_seed(1), N)
cpa = cpa_attack(power, 0, window=window)
cema = cema_attack(em, 0, window=window)
print("true last-round key byte", hex(last_round_key(bytes(range(32)))[0]))
print(f"CPA  best=0x{cpa.recovered_key_bytes[0]:02x} rank={cpa.key_rank} mtd={cpa.mtd}")
print(f"CEMA best=0x{cema.recovered_key_bytes[0]:02x} rank={cema.key_rank} mtd={cema.mtd}")

# %% [markdown]
# Protected: same captures, but the slices sit in saturation.

# %%
power, _ = capture(CaptureSpec(mode=Mode.PROTECTED).with_seed(1), N)
prot = cpa_attack(power, 0, window=window)
print(f"protected rank={prot.key_rank} mtd={prot.mtd or 'not reached'}")
for count, rank in prot.rank_curve[::6]:
    print(f"  {count:6d} traces -> rank {rank}")
