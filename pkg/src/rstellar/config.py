"""Experiment configuration files.

Format::

    # comment
    [device]
    vdd = 1.2V
    c_load = 150pF
    [leakage]
    rng_seed = 7
    smc.smc_clock_hz = 10kHz     # dotted keys work in any section

Physical quantities must carry a unit suffix; counts and ratios must not.
Unknown sections or keys are errors.  Values are converted with decimal
arithmetic so the same text always yields the same floats.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, fields, replace
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path

from .leakage_model import LeakageParams
from .pdn_sim import DeviceConfig, SmcConfig
from .vlb_detector import DetectorConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str = "<config>"):
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.line = line


_PREFIX = {"f": Decimal("1e-15"), "p": Decimal("1e-12"), "n": Decimal("1e-9"), "u": Decimal("1e-6"),
           "µ": Decimal("1e-6"), "m": Decimal("1e-3"), "": Decimal(1), "k": Decimal("1e3"),
           "M": Decimal("1e6"), "G": Decimal("1e9")}

_BASE = {
    "frequency": "Hz", "capacitance": "F", "voltage": "V", "current": "A", "conductance": "S",
    "resistance": "Ohm", "time": "s", "transconductance": "A/V2", "per_volt": "/V", "hz_per_volt": "Hz/V",
}

_NUMBER = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)\s*(.*)$")


def parse_quantity(text: str, kind: str) -> float:
    """``"150pF"`` -> ``1.5e-10`` for kind ``"capacitance"``."""
    m = _NUMBER.match(text.strip())
    if not m:
        raise ValueError(f"not a number with unit: {text!r}")
    num, unit = m.group(1), m.group(2).strip()
    base = _BASE[kind]
    if not unit:
        raise ValueError(f"missing unit (expected {base}) in {text!r}")
    if kind == "per_volt":
        if unit != "/V":
            raise ValueError(f"unit {unit!r} is not /V")
        scale = Decimal(1)
    else:
        if not unit.endswith(base):
            raise ValueError(f"unit {unit!r} is not a {kind} unit ({base})")
        prefix = unit[: len(unit) - len(base)]
        if prefix not in _PREFIX:
            raise ValueError(f"unknown unit prefix {prefix!r} in {unit!r}")
        scale = _PREFIX[prefix]
    try:
        return float(Decimal(num) * scale)
    except InvalidOperation:
        raise ValueError(f"bad number {num!r}") from None


def parse_int(text: str) -> int:
    t = text.strip()
    if not re.fullmatch(r"[+-]?\d+", t):
        raise ValueError(f"expected an integer, got {text!r}")
    return int(t)


def parse_ratio(text: str) -> float:
    t = text.strip()
    if not re.fullmatch(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?(/\d+)?", t):
        raise ValueError(f"expected a plain number or fraction, got {text!r}")
    if "/" in t:
        return float(Fraction(t))
    return float(Decimal(t))


def parse_hex(text: str, length: int) -> bytes:
    t = text.strip().lower().removeprefix("0x")
    try:
        raw = bytes.fromhex(t)
    except ValueError:
        raise ValueError(f"not a hex string: {text!r}") from None
    if len(raw) != length:
        raise ValueError(f"expected {length} bytes of hex, got {len(raw)}")
    return raw


def parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(parse_int(p) for p in text.split(",") if p.strip())


@dataclass(frozen=True)
class AttackConfig:
    key: bytes = bytes(range(32))
    target_byte: int = 0
    averaging: int = 1
    n_traces: int = 10000
    max_traces: int = 1_000_000
    fixed_plaintext: bytes = bytes(16)
    warmup_rounds: int = 28
    vdd_drop: float = 0.35
    ramp: float = 10e-6
    t_start: float = 1e-3
    duration: float = 5e-3
    substep: float = 1e-6
    f_lo: float = 0.0
    f_hi: float = 100e6
    threshold_sweep: tuple[int, ...] = ()
    sweep_runs: int = 20

    def __post_init__(self):
        if not 0 <= self.target_byte < 16:
            raise ValueError("target_byte must be in 0..15")
        if self.averaging < 1:
            raise ValueError("averaging must be >= 1")
        if self.n_traces < 0 or self.max_traces < 1:
            raise ValueError("trace counts must be positive")
        if self.vdd_drop < 0:
            raise ValueError("vdd_drop must be >= 0")


# value parser per (section, key); anything else in a section is unknown
_SCHEMA: dict[str, dict[str, tuple]] = {
    "device": {
        "vdd": ("voltage",), "aes_clock_hz": ("frequency",), "v_aes_target": ("voltage",),
        "v_aes_min": ("voltage",), "c_load": ("capacitance",), "c_decap": ("capacitance",),
        "g_bleed": ("conductance",), "n_max": (parse_int,), "k_device": ("transconductance",),
        "v_t": ("voltage",), "lam": ("per_volt",), "cascode_gain": (parse_ratio,),
        "nand_p": (parse_int,), "nand_q": (parse_int,), "nand_r": (parse_int,),
        "r_on": ("resistance",), "r_off": ("resistance",), "v_bias_bottom_ratio": (parse_ratio,),
    },
    "leakage": {
        "current_per_hd": ("current",), "baseline_current": ("current",), "samples_per_round": (parse_int,),
        "gaussian_noise_sigma": ("current",), "scope_noise_sigma": ("current",), "em_scale": ("time",),
        "em_noise_sigma": ("current",), "rng_seed": (parse_int,),
    },
    "smc": {
        "smc_clock_hz": ("frequency",), "ro_freq_per_volt": ("hz_per_volt",), "ro_freq_offset": ("frequency",),
        "divider_ratio": (parse_int,), "target_count": (parse_int,), "hysteresis": (parse_int,),
    },
    "detector": {
        "detector_clock_hz": ("frequency",), "time_to_count": (parse_int,), "diff_threshold": (parse_int,),
        "divider_ratio": (parse_int,), "vdd_divider_ratio": (parse_ratio,), "ro_gain": ("hz_per_volt",),
        "ro_offset": ("frequency",), "divider_mismatch": (parse_ratio,), "v_noise_sigma": ("voltage",),
        "jitter_sigma": (parse_ratio,),
    },
    "attack": {
        "key": (lambda t: parse_hex(t, 32),), "target_byte": (parse_int,), "averaging": (parse_int,),
        "n_traces": (parse_int,), "max_traces": (parse_int,),
        "fixed_plaintext": (lambda t: parse_hex(t, 16),), "warmup_rounds": (parse_int,),
        "vdd_drop": ("voltage",), "ramp": ("time",), "t_start": ("time",), "duration": ("time",),
        "substep": ("time",), "f_lo": ("frequency",), "f_hi": ("frequency",),
        "threshold_sweep": (parse_int_list,), "sweep_runs": (parse_int,),
    },
}

_CLASSES = {"device": DeviceConfig, "leakage": LeakageParams, "smc": SmcConfig,
            "detector": DetectorConfig, "attack": AttackConfig}


def _parse_value(section: str, key: str, text: str):
    spec = _SCHEMA[section][key][0]
    if isinstance(spec, str):
        return parse_quantity(text, spec)
    return spec(text)


@dataclass(frozen=True)
class ExperimentConfig:
    device: DeviceConfig = field(default_factory=DeviceConfig)
    leakage: LeakageParams = field(default_factory=LeakageParams)
    smc: SmcConfig = field(default_factory=SmcConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)

    @property
    def seed(self) -> int:
        return self.leakage.rng_seed

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, leakage=replace(self.leakage, rng_seed=int(seed)))

    def snapshot(self) -> dict[str, object]:
        """Every field under its dotted key, in schema order."""
        out: dict[str, object] = {}
        for section in _SCHEMA:
            obj = getattr(self, section)
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, tuple):
                    v = ",".join(str(x) for x in v)
                out[f"{section}.{f.name}"] = v
        return out


def parse_config(text: str, source: str = "<config>", require_seed: bool = True) -> ExperimentConfig:
    values: dict[str, dict[str, object]] = {s: {} for s in _SCHEMA}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = re.split(r"\s[#;]|^[#;]", raw, maxsplit=1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"\[\s*([A-Za-z_]+)\s*\]", line)
        if m:
            section = m.group(1)
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]", lineno, source)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno, source)
        key, _, val = (p.strip() for p in line.partition("="))
        if "." in key:
            sec, _, key = key.partition(".")
        else:
            sec = section
        if sec is None:
            raise ConfigError(f"key {key!r} outside any section (use section.key)", lineno, source)
        if sec not in _SCHEMA:
            raise ConfigError(f"unknown section {sec!r}", lineno, source)
        if key not in _SCHEMA[sec]:
            raise ConfigError(f"unknown key {sec}.{key}", lineno, source)
        if key in values[sec]:
            raise ConfigError(f"duplicate key {sec}.{key}", lineno, source)
        try:
            values[sec][key] = (_parse_value(sec, key, val), lineno)
        except ValueError as e:
            raise ConfigError(f"{sec}.{key}: {e}", lineno, source) from None
    if require_seed and "rng_seed" not in values["leakage"]:
        raise ConfigError("leakage.rng_seed is mandatory", None, source)
    built = {}
    for sec, cls in _CLASSES.items():
        kw = {k: v for k, (v, _) in values[sec].items()}
        try:
            built[sec] = cls(**kw)
        except (ValueError, TypeError) as e:
            line = min((ln for _, ln in values[sec].values()), default=None)
            raise ConfigError(f"[{sec}] {e}", line, source) from None
    if "target_count" not in values["smc"]:
        built["smc"] = built["smc"].calibrated(built["device"].v_aes_target)
    return ExperimentConfig(**built)


def load_config(path, require_seed: bool = True) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", None, str(p)) from None
    return parse_config(text, p.name, require_seed)


def config_text(cfg: ExperimentConfig) -> str:
    """Render a config back to parseable text (used by recipes and tests)."""
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for key, (spec,) in keys.items():
            v = getattr(obj, key)
            if isinstance(spec, str):
                text = f"{v!r}{_BASE[spec]}"
            elif isinstance(v, bytes):
                text = v.hex()
            elif isinstance(v, tuple):
                if not v:
                    continue
                text = ",".join(str(x) for x in v)
            else:
                text = repr(v)
            lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


__all__ = ["AttackConfig", "ConfigError", "ExperimentConfig", "config_text", "load_config",
           "parse_config", "parse_quantity"]
