"""Declarative run configuration with unit-suffixed keys.

Every dimensioned value in a config file carries its unit in the key name
(``waist_um: 3.5``, ``power_W: 0.24``, ``hold_times_s: [...]``).  Files
are parsed into SI dataclasses; serialization writes canonical SI keys, so
parse -> serialize -> parse is exact.
"""

from __future__ import annotations

import copy
import hashlib
import math
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .coherence import DephasingModel, Segment
from .dynamics import CounterModel, LoadingParams, LossModel
from .errors import ConfigError, UnitError
from .optics import BeamSpec, VolumeSpec

SCHEMA_VERSION = 1

# dimension -> {suffix: multiplier to SI}; the first entry is canonical
UNITS = {
    "length": {"m": 1.0, "mm": 1e-3, "um": 1e-6, "nm": 1e-9},
    "power": {"W": 1.0, "mW": 1e-3},
    "time": {"s": 1.0, "ms": 1e-3, "us": 1e-6, "ns": 1e-9},
    "temperature": {"K": 1.0, "mK": 1e-3, "uK": 1e-6},
    "field": {"T": 1.0, "mT": 1e-3, "uT": 1e-6, "G": 1e-4},
    "rate": {"per_s": 1.0},
    "psd": {"per_Hz": 1.0},
    "density": {"per_m3": 1.0, "per_cm3": 1e6},
    "angle": {"rad": 1.0, "mrad": 1e-3, "deg": math.pi / 180},
    # angular frequency: cyclic-unit keys are multiplied by 2 pi
    "angular_frequency": {"rad_per_s": 1.0, "Hz": 2 * math.pi, "kHz": 2e3 * math.pi, "MHz": 2e6 * math.pi},
}

_PLAIN = ("int", "float", "bool", "str", "enum")


@dataclass(frozen=True)
class F:
    """Schema entry: attribute name, dimension (or plain kind), list-valued flag."""

    attr: str
    kind: str
    is_list: bool = False
    choices: tuple = ()


def _coerce_plain(f: F, value, where: str):
    def one(v):
        if f.kind == "bool":
            if not isinstance(v, bool):
                raise ConfigError(f"{where}: expected true/false, got {v!r}")
            return v
        if f.kind == "int":
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigError(f"{where}: expected an integer, got {v!r}")
            return int(v)
        if f.kind == "float":
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{where}: expected a number, got {v!r}")
            return float(v)
        if not isinstance(v, str):
            raise ConfigError(f"{where}: expected a string, got {v!r}")
        if f.choices and v not in f.choices:
            raise ConfigError(f"{where}: {v!r} not one of {list(f.choices)}")
        return v

    if f.is_list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(one(v) for v in value)
    return one(value)


def _coerce_dim(f: F, mult: float, value, where: str):
    def one(v):
        if isinstance(v, str):
            # PyYAML reads exponents without a sign (1.0e17) as strings
            try:
                v = float(v)
            except ValueError:
                pass
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {v!r}")
        return float(v) * mult

    if f.is_list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(one(v) for v in value)
    return one(value)


def parse_section(raw: dict, schema: list[F], section: str) -> dict:
    """Map file keys to attribute values, enforcing unit suffixes and rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a mapping")
    by_attr = {f.attr: f for f in schema}
    out = {}
    for key, value in raw.items():
        where = f"{section}.{key}"
        if key in by_attr:
            f = by_attr[key]
            if f.kind not in _PLAIN:
                units = ", ".join(f"{key}_{u}" for u in UNITS[f.kind])
                raise UnitError(f"{where}: dimensioned field needs a unit suffix (one of {units})")
            out[key] = _coerce_plain(f, value, where)
            continue
        match = None
        for f in schema:
            if f.kind in _PLAIN:
                continue
            prefix = f.attr + "_"
            if key.startswith(prefix):
                match = (f, key[len(prefix):])
                break
        if match is None:
            raise ConfigError(f"{where}: unknown key")
        f, suffix = match
        if suffix not in UNITS[f.kind]:
            raise UnitError(f"{where}: unit {suffix!r} is not a {f.kind} unit ({', '.join(UNITS[f.kind])})")
        if f.attr in out:
            raise ConfigError(f"{section}.{f.attr} given twice")
        out[f.attr] = _coerce_dim(f, UNITS[f.kind][suffix], value, where)
    return out


def dump_section(obj, schema: list[F]) -> dict:
    out = {}
    for f in schema:
        v = getattr(obj, f.attr)
        key = f.attr if f.kind in _PLAIN else f"{f.attr}_{next(iter(UNITS[f.kind]))}"
        if f.is_list:
            v = [float(x) if f.kind not in _PLAIN else x for x in v]
        elif f.kind not in _PLAIN or f.kind == "float":
            v = float(v)
        out[key] = v
    return out


# ---------------------------------------------------------------------------
# sections


@dataclass(frozen=True)
class BeamConfig:
    waist: float = 3.5e-6
    power: float = 0.24
    wavelength: float = 532e-9
    charge_l: int = 1
    half_angle: float = 0.058
    polarization: str = "H"
    focus_offset: tuple = (0.0, 0.0, 0.0)

    SCHEMA = [F("waist", "length"), F("power", "power"), F("wavelength", "length"), F("charge_l", "int"),
              F("half_angle", "angle"), F("polarization", "str"), F("focus_offset", "length", True)]

    def spec(self) -> BeamSpec:
        return BeamSpec(self.waist, self.power, self.wavelength, self.charge_l, self.half_angle,
                        self.polarization, tuple(self.focus_offset))


@dataclass(frozen=True)
class VolumeConfig:
    nx: int = 256
    ny: int = 256
    nz: int = 128
    dx: float = 50e-9
    dy: float = 50e-9
    dz: float = 0.5e-6

    SCHEMA = [F("nx", "int"), F("ny", "int"), F("nz", "int"),
              F("dx", "length"), F("dy", "length"), F("dz", "length")]

    def spec(self) -> VolumeSpec:
        return VolumeSpec(self.nx, self.ny, self.nz, self.dx, self.dy, self.dz)


@dataclass(frozen=True)
class CalibrationConfig:
    target_transverse: float = 3.3e-6
    waist_min: float = 1.5e-6
    waist_max: float = 3.5e-6
    rel_tol: float = 0.05
    max_iter: int = 12

    SCHEMA = [F("target_transverse", "length"), F("waist_min", "length"), F("waist_max", "length"),
              F("rel_tol", "float"), F("max_iter", "int")]


@dataclass(frozen=True)
class LoadingConfig:
    mot_density: float = 1e17
    temperature: float = 20e-6
    blockade_p1: float = 0.526
    normalize: bool = True
    n_cycles: int = 2200
    max_overlap: float = 1e-2

    SCHEMA = [F("mot_density", "density"), F("temperature", "temperature"), F("blockade_p1", "float"),
              F("normalize", "bool"), F("n_cycles", "int"), F("max_overlap", "float")]

    def params(self) -> LoadingParams:
        return LoadingParams(self.mot_density, self.temperature, self.blockade_p1, self.normalize)


@dataclass(frozen=True)
class CounterConfig:
    atom_count_rate: float = 600.0
    background_count_rate: float = 100.0
    integration_time: float = 0.1

    SCHEMA = [F("atom_count_rate", "rate"), F("background_count_rate", "rate"), F("integration_time", "time")]

    def model(self) -> CounterModel:
        return CounterModel(self.atom_count_rate, self.background_count_rate, self.integration_time)


@dataclass(frozen=True)
class LossConfig:
    background_rate_dark: float = 1.0 / 6.0
    bright_excess_factor: float = 6.0 / 3.8
    readout_on: bool = False
    recoil_heating_on: bool = True
    heating_multiplier: float = 1.0
    intensity_noise_psd: float = 0.0

    SCHEMA = [F("background_rate_dark", "rate"), F("bright_excess_factor", "float"), F("readout_on", "bool"),
              F("recoil_heating_on", "bool"), F("heating_multiplier", "float"), F("intensity_noise_psd", "psd")]

    def model(self) -> LossModel:
        return LossModel(self.background_rate_dark, self.bright_excess_factor, self.readout_on,
                         self.recoil_heating_on, self.heating_multiplier, self.intensity_noise_psd)


@dataclass(frozen=True)
class RetentionConfig:
    n_atoms: int = 500
    hold_times: tuple = tuple(0.5 * k for k in range(1, 17))
    temperature: float = 20e-6

    SCHEMA = [F("n_atoms", "int"), F("hold_times", "time", True), F("temperature", "temperature")]


@dataclass(frozen=True)
class DephasingConfig:
    eta_differential: float = 9.192631770e9 / 210e12
    bias_field: float = 1.5e-4
    field_noise_rms: float = 1e-6
    noise_model: str = "quasi-static-gaussian"
    correlation_time: float = 1e-3
    # visual estimate of the zero-delay contrast; override freely
    raman_contrast_c0: float = 0.9
    rabi_frequency: float = 2 * math.pi * 1e6

    SCHEMA = [F("eta_differential", "float"), F("bias_field", "field"), F("field_noise_rms", "field"),
              F("noise_model", "enum", choices=("quasi-static-gaussian", "ou-process")),
              F("correlation_time", "time"), F("raman_contrast_c0", "float"),
              F("rabi_frequency", "angular_frequency")]

    def model(self) -> DephasingModel:
        return DephasingModel(self.eta_differential, self.bias_field, self.field_noise_rms, self.noise_model,
                              self.correlation_time, self.raman_contrast_c0, self.rabi_frequency)


@dataclass(frozen=True)
class CoherenceConfig:
    n_atoms: int = 200
    temperature: float = 4e-6
    delays: tuple = tuple(0.01 * k for k in range(12))
    rabi_durations: tuple = tuple(k * 25e-9 for k in range(81))
    rabi_detuning: float = 0.0

    SCHEMA = [F("n_atoms", "int"), F("temperature", "temperature"), F("delays", "time", True),
              F("rabi_durations", "time", True), F("rabi_detuning", "angular_frequency")]


SEGMENT_SCHEMA = [F("type", "enum", choices=("pulse", "delay")), F("duration", "time"),
                  F("rabi_frequency", "angular_frequency"), F("detuning", "angular_frequency"),
                  F("phase", "angle")]

SECTIONS = {
    "beam_a": BeamConfig,
    "beam_b": BeamConfig,
    "volume": VolumeConfig,
    "calibration": CalibrationConfig,
    "loading": LoadingConfig,
    "counter": CounterConfig,
    "loss": LossConfig,
    "retention": RetentionConfig,
    "dephasing": DephasingConfig,
    "coherence": CoherenceConfig,
}


@dataclass(frozen=True)
class SimConfig:
    schema_version: int = SCHEMA_VERSION
    preset: str = "paper-matched"
    seed: int = 20240101
    output_dir: str = "out"
    species: str = "cesium"
    field_model: str = "lg"
    beam_a: BeamConfig = BeamConfig()
    beam_b: BeamConfig = BeamConfig(half_angle=-0.058, polarization="V")
    volume: VolumeConfig = VolumeConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    loading: LoadingConfig = LoadingConfig()
    counter: CounterConfig = CounterConfig()
    loss: LossConfig = LossConfig()
    retention: RetentionConfig = RetentionConfig()
    dephasing: DephasingConfig = DephasingConfig()
    coherence: CoherenceConfig = CoherenceConfig()
    # optional explicit pulse sequence for the ``rabi`` subcommand
    sequence: tuple = ()

    def validate(self) -> "SimConfig":
        """Build every model object once so invalid values fail at load time."""
        from .errors import BBTError

        try:
            self.beam_a.spec()
            self.beam_b.spec()
            self.volume.spec()
            self.loading.params()
            self.counter.model()
            self.loss.model()
            self.dephasing.model()
            for seg in self.sequence:
                Segment(**seg)
        except ConfigError:
            raise
        except BBTError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        except TypeError as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc
        if self.beam_a.polarization == self.beam_b.polarization:
            raise ConfigError("beam_a and beam_b need distinct polarization tags")
        if self.field_model not in ("lg", "spp"):
            raise ConfigError(f"field_model must be 'lg' or 'spp', got {self.field_model!r}")
        if self.calibration.waist_min >= self.calibration.waist_max:
            raise ConfigError("calibration.waist_min must be below waist_max")
        return self


TOP_SCHEMA = [F("schema_version", "int"), F("preset", "str"), F("seed", "int"), F("output_dir", "str"),
              F("species", "str"), F("field_model", "enum", choices=("lg", "spp"))]


def load_presets() -> dict:
    text = resources.files("bbtrap").joinpath("data/presets.yaml").read_text()
    return yaml.safe_load(text)


def preset_names() -> list[str]:
    return sorted(load_presets())


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _strip_units(section: dict, schema: list[F]) -> dict:
    """Index a raw section by attribute name so differently-suffixed keys override each other."""
    out = {}
    for key, value in section.items():
        attr = key
        for f in schema:
            if f.kind not in _PLAIN and key.startswith(f.attr + "_") and key[len(f.attr) + 1:] in UNITS[f.kind]:
                attr = f.attr
                break
        out[attr] = (key, value)
    return out


def _overlay(base: dict, over: dict) -> dict:
    """Merge user values over a preset, letting ``waist_um`` replace a preset ``waist_m``."""
    out = copy.deepcopy(base)
    for k, v in over.items():
        cls = SECTIONS.get(k)
        if cls is not None and isinstance(v, dict) and isinstance(out.get(k), dict):
            merged = _strip_units(out[k], cls.SCHEMA)
            merged.update(_strip_units(v, cls.SCHEMA))
            out[k] = dict(merged.values())
        else:
            out[k] = copy.deepcopy(v)
    return out


def from_dict(raw: dict) -> SimConfig:
    """Expand a raw mapping (preset reference plus overrides) into a validated :class:`SimConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration root must be a mapping")
    raw = dict(raw)
    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    presets = load_presets()
    name = raw.get("preset", "paper-matched")
    if name not in presets:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(presets)}")
    full = _overlay(presets[name] or {}, raw)
    full["preset"] = name

    kwargs = {}
    top = {k: v for k, v in full.items() if k not in SECTIONS and k != "sequence"}
    kwargs.update(parse_section(top, TOP_SCHEMA, "config"))
    for name, cls in SECTIONS.items():
        if name in full:
            base = getattr(SimConfig(), name)
            kwargs[name] = replace(base, **parse_section(full[name] or {}, cls.SCHEMA, name))
    if "sequence" in full:
        seq = full["sequence"] or []
        if not isinstance(seq, list):
            raise ConfigError("sequence must be a list of segments")
        kwargs["sequence"] = tuple(
            _segment_dict(parse_section(s, SEGMENT_SCHEMA, f"sequence[{i}]"), i) for i, s in enumerate(seq)
        )
    return SimConfig(**kwargs).validate()


def _segment_dict(d: dict, i: int) -> dict:
    if "type" not in d or "duration" not in d:
        raise ConfigError(f"sequence[{i}] needs type and duration")
    return {"type": d["type"], "duration": d["duration"], "rabi_frequency": d.get("rabi_frequency", 0.0),
            "detuning": d.get("detuning", 0.0), "phase": d.get("phase", 0.0)}


def parse_config(path) -> SimConfig:
    """Read and validate a YAML config file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    if raw is None:
        raw = {}
    try:
        return from_dict(raw)
    except ConfigError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def to_dict(cfg: SimConfig) -> dict:
    """Canonical SI mapping; feeding it back through :func:`from_dict` reproduces ``cfg``."""
    out = {f.attr: getattr(cfg, f.attr) for f in TOP_SCHEMA}
    for name, cls in SECTIONS.items():
        out[name] = dump_section(getattr(cfg, name), cls.SCHEMA)
    out["sequence"] = [dump_section(_SegView(**s), SEGMENT_SCHEMA) for s in cfg.sequence]
    return out


@dataclass(frozen=True)
class _SegView:
    type: str
    duration: float
    rabi_frequency: float
    detuning: float
    phase: float


def serialize(cfg: SimConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=True, default_flow_style=None)


def config_hash(cfg: SimConfig) -> str:
    return hashlib.sha256(serialize(cfg).encode()).hexdigest()


def with_overrides(cfg: SimConfig, **top) -> SimConfig:
    return replace(cfg, **{k: v for k, v in top.items() if v is not None})


def segments(cfg: SimConfig) -> list[Segment]:
    return [Segment(**s) for s in cfg.sequence]


def default_config() -> SimConfig:
    return from_dict({})


def as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=float)
