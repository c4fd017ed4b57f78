"""Scenario configuration: dataclass schema, unit parsing and strict validation.

Values are SI numbers or strings with a unit suffix (``"650 um"``,
``"2 deg"``, ``"4.06 GHz"``). Unknown keys are rejected; every problem in
a document is reported at once.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .steering import SteeringGeometry, steering_range

SCENARIOS = ("fanout", "lock", "steer", "address", "calibrate", "all")

# decimal exponents, applied textually so "4.06 GHz" parses to exactly 4.06e9
_PREFIX = {"": 0, "T": 12, "G": 9, "M": 6, "k": 3, "m": -3, "u": -6, "µ": -6, "n": -9, "p": -12}
_BASE = {"m": "m", "s": "s", "Hz": "Hz", "V": "V", "W": "W"}
_SPECIAL = {"deg": ("rad", math.pi / 180.0), "rad": ("rad", 1.0), "mrad": ("rad", 1e-3), "dB": ("dB", 1.0)}
_QUANTITY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([^\d\s]*)\s*$")


def parse_quantity(value, unit):
    """Number in SI ``unit`` from a bare number or a ``"<number> <unit>"`` string."""
    if isinstance(value, bool):
        raise ValueError("expected a number")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ValueError("expected a number or a quantity string")
    m = _QUANTITY.match(value)
    if not m:
        raise ValueError(f"cannot parse quantity {value!r}")
    text, suffix = m.group(1), m.group(2)
    number = float(text)
    if suffix == "":
        return number
    if suffix in _SPECIAL:
        dim, scale = _SPECIAL[suffix]
        if dim != unit:
            raise ValueError(f"unit {suffix!r} is not a {unit} unit")
        return number * scale
    for base in sorted(_BASE, key=len, reverse=True):
        if suffix.endswith(base) and suffix[: -len(base)] in _PREFIX and base == unit:
            mantissa, _, exp = text.lower().partition("e")
            return float(f"{mantissa}e{int(exp or 0) + _PREFIX[suffix[: -len(base)]]}")
    raise ValueError(f"unit {suffix!r} is not a {unit} unit")


def _q(default, unit=None, lo=None, hi=None, lo_open=False, doc=""):
    return field(default=default, metadata={"unit": unit, "lo": lo, "hi": hi, "lo_open": lo_open, "doc": doc})


@dataclass
class ChannelsConfig:
    n_channels: int = _q(16, lo=1)
    v_pi: float = _q(2.2, "V", lo=0, lo_open=True)
    extinction_ratio: float = _q(100.0, lo=1)
    insertion_loss: float = _q(0.01, lo=0, hi=1, lo_open=True)
    bandwidth_3db: float = _q(7e9, "Hz", lo=0, lo_open=True)


@dataclass
class DriftConfig:
    tau: float = _q(5.0, "s", lo=0, lo_open=True)
    tau_lp: float = _q(2.0, "s", lo=0, lo_open=True)
    kappa: float = _q(0.1)
    sigma: float = _q(2e-3, "V", lo=0)


@dataclass
class FanoutConfig:
    iterations: int = _q(12, lo=0)
    gs_iterations: int = _q(100, lo=1)
    il_spread_db: float = _q(3.0, "dB", lo=0)
    slm_size: int = _q(128, lo=16)
    source_waist: float = _q(0.4e-3, "m", lo=0, lo_open=True)
    spacing: float = _q(8.0, lo=0, lo_open=True)
    noise_on: bool = True
    exponent: float = _q(1.0, lo=0, lo_open=True)


@dataclass
class CalibrateConfig:
    k_offset: float = _q(0.3, lo=0)
    max_iterations: int = _q(4, lo=1)
    superpixel: int = _q(8, lo=1)
    imaging_grid: int = _q(5, lo=3)


@dataclass
class LockConfig:
    settle: float = _q(2.0, "s", lo=0)
    sessions: int = _q(20, lo=1)
    spacing: float = _q(1.0, "s", lo=0, lo_open=True)
    v0_spread: float = _q(0.3, "V", lo=0)
    input_power: float = _q(5e-2, "W", lo=0, lo_open=True)
    threshold: float = _q(0.1, lo=0, lo_open=True)
    initial_error: float = _q(0.3)
    control_arm: bool = True


@dataclass
class SteerConfig:
    pattern: str = field(default="hexagonal", metadata={"choices": ("square", "hexagonal", "triangular")})
    gamma: float = _q(0.65e-3, "m", lo=0, lo_open=True)
    eta_i: float = _q(0.05, lo=0, hi=1, lo_open=True)
    eta_o: float = _q(0.05, lo=0, hi=1, lo_open=True)
    wavelength: float = _q(780e-9, "m", lo=0, lo_open=True)
    theta_max_diff: float = _q(math.radians(2.0), "rad", lo=0, lo_open=True)
    theta_na: float | None = _q(None, "rad", lo=0, lo_open=True)
    magnification: float = _q(1.0, lo=0, lo_open=True)
    max_iters: int = _q(4, lo=1)
    tolerance_px: float = _q(0.5, lo=0, lo_open=True)
    zero_order: float = _q(0.05, lo=0, hi=1)
    defocus_error: float = _q(0.03)
    sweep_points: int = _q(9, lo=2)


@dataclass
class AddressConfig:
    count: int = _q(953, lo=2)
    laser_detuning: float = _q(-4.06e9, "Hz")
    shift_start: float = _q(2.5e9, "Hz")
    shift_stop: float = _q(5.0e9, "Hz")
    shift_step: float = _q(10e6, "Hz", lo=0, lo_open=True)
    bin_factor: int = _q(2, lo=1)
    disabled: list = field(default_factory=lambda: list(range(4, 12)) + [14, 15])
    repetitions: float = _q(1e9, lo=1)
    settle: float = _q(1.0, "s", lo=0)


@dataclass
class Thresholds:
    sigma_pkpk: float = _q(0.01, lo=0, lo_open=True)
    sigma_std: float = _q(0.002, lo=0, lo_open=True)
    pulse_deviation: float = _q(0.01, lo=0, lo_open=True)
    residual_px: float = _q(0.5, lo=0, lo_open=True)
    peak_tolerance: float = _q(20e6, "Hz", lo=0, lo_open=True)
    pair_tolerance: float = _q(0.01, lo=0, lo_open=True)


@dataclass
class ScenarioConfig:
    seed: int = 0
    channels: ChannelsConfig = field(default_factory=ChannelsConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    fanout: FanoutConfig = field(default_factory=FanoutConfig)
    calibrate: CalibrateConfig = field(default_factory=CalibrateConfig)
    lock: LockConfig = field(default_factory=LockConfig)
    steer: SteerConfig = field(default_factory=SteerConfig)
    address: AddressConfig = field(default_factory=AddressConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)

    def geometry(self) -> SteeringGeometry:
        s = self.steer
        return SteeringGeometry(
            gamma=s.gamma,
            eta_i=s.eta_i,
            eta_o=s.eta_o,
            wavelength=s.wavelength,
            theta_max_diff=s.theta_max_diff,
            theta_na=s.theta_na,
            magnification=s.magnification,
        )

    def normalized(self) -> dict:
        """Plain nested dict in SI units, plus derived steering quantities."""
        out = dataclasses.asdict(self)
        g = self.geometry()
        out["derived"] = {
            "delta_f_i": g.delta_f_i,
            "delta_f_o": g.delta_f_o,
            "steering_range": steering_range(g),
        }
        return out

    def digest(self) -> str:
        blob = json.dumps(self.normalized(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_value(path, f, value, errors):
    meta = f.metadata
    if "choices" in meta:
        aliases = {"hex": "hexagonal", "tri": "triangular"}
        v = aliases.get(value, value)
        if v not in meta["choices"]:
            errors.append(f"{path}: must be one of {', '.join(meta['choices'])}")
            return None
        return v
    if f.type in ("bool",) or isinstance(f.default, bool):
        if not isinstance(value, bool):
            errors.append(f"{path}: expected true or false")
            return None
        return value
    if isinstance(f.default, list) or f.type == "list":
        if not isinstance(value, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in value):
            errors.append(f"{path}: expected a list of integers")
            return None
        return value
    if value is None and f.default is None:
        return None
    if f.type == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            else:
                errors.append(f"{path}: expected an integer")
                return None
        v = value
    else:
        try:
            v = parse_quantity(value, meta.get("unit"))
        except ValueError as exc:
            errors.append(f"{path}: {exc}")
            return None
        if not math.isfinite(v):
            errors.append(f"{path}: must be finite")
            return None
    lo, hi = meta.get("lo"), meta.get("hi")
    if lo is not None and (v < lo or (meta.get("lo_open") and v == lo)):
        errors.append(f"{path}: must be {'>' if meta.get('lo_open') else '>='} {lo}, got {v}")
        return None
    if hi is not None and v > hi:
        errors.append(f"{path}: must be <= {hi}, got {v}")
        return None
    return v


def _build(cls, doc, path, errors):
    obj = cls()
    if doc is None:
        return obj
    if not isinstance(doc, dict):
        errors.append(f"{path or '<root>'}: expected a mapping")
        return obj
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in doc.items():
        p = f"{path}.{key}" if path else str(key)
        if key not in fields:
            errors.append(f"{p}: unknown key")
            continue
        f = fields[key]
        if dataclasses.is_dataclass(f.default_factory() if f.default_factory is not dataclasses.MISSING else None):
            setattr(obj, key, _build(type(getattr(obj, key)), value, p, errors))
        elif key == "seed" and cls is ScenarioConfig:
            if isinstance(value, bool) or not isinstance(value, int) or value < 0:
                errors.append(f"{p}: expected a non-negative integer")
            else:
                obj.seed = value
        else:
            v = _check_value(p, f, value, errors)
            if v is not None or (value is None and f.default is None):
                setattr(obj, key, v)
    return obj


def validate_config(document) -> ScenarioConfig:
    """Normalize a parsed document into a :class:`ScenarioConfig`; raises ``ConfigError`` with every problem."""
    errors: list[str] = []
    cfg = _build(ScenarioConfig, document or {}, "", errors)
    if not errors:
        try:
            cfg.geometry()
        except ValueError as exc:
            errors.append(f"steer: {exc}")
        a = cfg.address
        if a.shift_stop <= a.shift_start:
            errors.append("address.shift_stop: must exceed address.shift_start")
        bad = [c for c in a.disabled if not 0 <= c < cfg.channels.n_channels]
        if bad:
            errors.append(f"address.disabled: channels {bad} out of range")
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path=None) -> ScenarioConfig:
    if path is None:
        return validate_config({})
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"<file>: {exc}"]) from exc
    return validate_config(doc)
