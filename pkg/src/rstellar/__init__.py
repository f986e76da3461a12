"""Simulation and side-channel evaluation of a signature-attenuating power delivery network.

Modules:

- ``aes_core``: AES-256 with per-round register states
- ``leakage_model``: Hamming-distance current synthesis and EM proxy
- ``pdn_sim``: current-source slices, bias ladder, node dynamics, SMC, supply-drop attack
- ``vlb_detector``: dual ring-oscillator supply-drop detector
- ``sca_toolkit``: CPA/CEMA, spectral CPA, TVLA, MTD
- ``trace_io``: binary trace files, CSV and run reports
- ``scenario`` / ``capture``: operating points, co-simulation and trace generation
- ``cli``: the ``rstellar`` command
"""
from .aes_core import AesStateTrace, encrypt, encrypt_batch, last_round_hd_hypothesis
from .leakage_model import CurrentWaveform, LeakageParams, synthesize_crypto_current
from .pdn_sim import (CsSliceBank, DeviceConfig, NandLadderConfig, PdnState, SmcConfig, attenuation_ratio,
                      inject_vlb, nand_bias_voltage, pmos_slice_current, smc_step, step_pdn, vlb_feasible)
from .sca_toolkit import AttackResult, TraceSet, TvlaResult, cema_attack, cpa_attack, estimate_mtd, spectral_cpa, tvla
from .trace_io import RunReport, read_traces, write_traces
from .vlb_detector import DetectorConfig, DetectorState, detector_step, halt_on_detect

__version__ = "0.1.0"
