"""Experiment configuration: TOML (or JSON) in, validated ``ExperimentConfig`` out.

Every default is either a published value (wavelength, prism separation,
detector efficiency, contrast, polarization, flipper efficiencies, thermal
anchors and drift, Larmor calibration, rocking FWHMs) or an artifact choice
documented in the README (count rates, integration times, scan grids).
"""
from __future__ import annotations

import json
import math
import re
from pathlib import Path
from typing import Any, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ifmsim import apparatus
from ifmsim.counting import U64_MAX, RngSeed

DEFAULT_SEED = 20140101


class ConfigError(ValueError):
    """Base class for configuration problems."""


class ConfigParseError(ConfigError):
    pass


class ConfigSchemaError(ConfigError):
    pass


class ConfigRangeError(ConfigError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, validate_default=True)


class BeamConfig(_Section):
    wavelength_m: float = Field(1.92e-10, gt=0)
    prism_beam_separation_rad: float = Field(2.3e-5, gt=0)
    detector_efficiency: float = Field(0.99, gt=0, le=1)

    def to_beam(self) -> apparatus.BeamParameters:
        return apparatus.BeamParameters(self.wavelength_m, self.prism_beam_separation_rad,
                                        self.detector_efficiency)


class CoilsConfig(_Section):
    field_per_ampere_t: float = Field(apparatus.FIELD_FOR_QUARTER_TURN / apparatus.CURRENT_FOR_QUARTER_TURN, gt=0)
    # None: calibrated so that 0.33 mT turns the spin by pi/2
    effective_length_m: Optional[float] = Field(None, gt=0)
    current_a: float = apparatus.CURRENT_FOR_QUARTER_TURN


class NoiseConfig(_Section):
    contrast: float = Field(0.91, ge=0, le=1)
    polarization: float = Field(0.993, ge=0, le=1)
    flipper_efficiencies: List[float] = [0.98, 0.98]
    poisson: bool = True

    @field_validator("flipper_efficiencies")
    @classmethod
    def _effs_in_range(cls, v):
        for i, f in enumerate(v):
            if not 0 <= f <= 1:
                raise ValueError(f"entry {i} = {f} is outside [0, 1]")
        return v


class ThermalConfig(_Section):
    reference_temperature_c: float = 25.2
    anchors: List[Tuple[float, float]] = [(25.2, 0.88), (26.2, 0.60), (26.8, 0.33)]
    phase_drift_rad_per_c: float = 1.92

    @field_validator("anchors")
    @classmethod
    def _anchors_valid(cls, v):
        if not v:
            raise ValueError("at least one anchor is required")
        for i, (_, c) in enumerate(v):
            if not 0 <= c <= 1:
                raise ValueError(f"anchor {i} contrast {c} is outside [0, 1]")
        for a, b in zip(v, v[1:]):
            if b[0] <= a[0]:
                raise ValueError("anchor temperatures must be strictly increasing")
        return v

    def to_model(self) -> apparatus.ThermalModel:
        return apparatus.ThermalModel(self.reference_temperature_c, tuple(self.anchors), self.phase_drift_rad_per_c)


class CountingConfig(_Section):
    base_rate: float = Field(50.0, ge=0)
    # cardinal points feeding the four-rate estimator
    time_per_point_s: float = Field(160.0, gt=0)
    # fine chi scans used for fringe fits
    fine_time_per_point_s: float = Field(2600.0, gt=0)


class BellScan(_Section):
    fine_points: int = Field(16, ge=5)


class RasterScan(_Section):
    x_min_mm: float = -5.0
    x_max_mm: float = 5.0
    z_min_mm: float = -5.0
    z_max_mm: float = 5.0
    step_mm: float = Field(1.0, gt=0)
    aperture_mm: float = Field(3.0, gt=0)
    shape: Literal["gaussian", "uniform"] = "gaussian"
    peak_contrast: float = Field(0.82, ge=0, le=1)
    center_x_mm: float = 0.0
    center_z_mm: float = 0.0
    width_x_mm: float = Field(2.0, gt=0)
    width_z_mm: float = Field(3.0, gt=0)
    fringe_points: int = Field(8, ge=5)
    time_per_point_s: float = Field(600.0, gt=0)

    @model_validator(mode="after")
    def _ordered(self):
        if self.x_max_mm < self.x_min_mm or self.z_max_mm < self.z_min_mm:
            raise ValueError("scan range maximum below minimum")
        return self


def _default_temperatures() -> List[float]:
    return [round(25.2 + 0.1 * i, 10) for i in range(17)]


class TemperatureScan(_Section):
    temperatures_c: List[float] = Field(default_factory=_default_temperatures, min_length=1)
    fringe_points: int = Field(16, ge=5)
    time_per_point_s: float = Field(300.0, gt=0)


class RockingScan(_Section):
    monochromator: Literal["single", "triple"] = "triple"
    coil: Literal["none", "al_wire", "al_ribbon", "cu_ribbon_3mm", "cu_ribbon_4mm"] = "none"
    double_peak: bool = False
    down_height_ratio: float = Field(1.0, ge=0)
    peak_rate: float = Field(50.0, gt=0)
    span_fwhm: float = Field(5.0, gt=0)
    step_fwhm: float = Field(0.2, gt=0)
    time_per_point_s: float = Field(300.0, gt=0)


class TwoFlipperScan(_Section):
    time_per_point_s: float = Field(3600.0, gt=0)


class LarmorScan(_Section):
    path: Literal["I", "II"] = "I"
    current_min_a: float = 0.0
    current_max_a: float = 3.0
    points: int = Field(31, ge=5)
    time_per_point_s: float = Field(600.0, gt=0)


class ScanConfig(_Section):
    bell: BellScan = BellScan()
    raster: RasterScan = RasterScan()
    temperature: TemperatureScan = TemperatureScan()
    rocking: RockingScan = RockingScan()
    two_flipper: TwoFlipperScan = TwoFlipperScan()
    larmor: LarmorScan = LarmorScan()


class ExperimentConfig(_Section):
    seed: int = Field(DEFAULT_SEED, ge=0, le=U64_MAX)
    output_dir: str = "ifmsim-out"
    beam: BeamConfig = BeamConfig()
    coils: CoilsConfig = CoilsConfig()
    noise: NoiseConfig = NoiseConfig()
    thermal: ThermalConfig = ThermalConfig()
    counting: CountingConfig = CountingConfig()
    scan: ScanConfig = ScanConfig()

    @property
    def rng_seed(self) -> RngSeed:
        return RngSeed(self.seed)

    def beam_parameters(self) -> apparatus.BeamParameters:
        return self.beam.to_beam()

    def larmor_coil(self, current: float | None = None) -> apparatus.LarmorCoil:
        beam = self.beam_parameters()
        length = self.coils.effective_length_m or apparatus.calibrated_coil_length(beam)
        return apparatus.LarmorCoil(length, self.coils.field_per_ampere_t,
                                    self.coils.current_a if current is None else current)

    def visibility(self) -> float:
        v = self.noise.contrast * self.noise.polarization
        for f in self.noise.flipper_efficiencies:
            v *= f
        return v

    def updated(self, **changes: Any) -> "ExperimentConfig":
        """Copy with dotted-path overrides, e.g. ``updated(**{"noise.contrast": 1.0})``."""
        data = self.model_dump()
        for key, value in changes.items():
            node = data
            *head, last = key.split(".")
            for part in head:
                node = node[part]
            node[last] = value
        return from_mapping(data)

    def echo(self) -> dict:
        """Configuration as a plain mapping, without the output location."""
        data = self.model_dump(mode="json")
        data.pop("output_dir")
        return data


_RANGE_ERRORS = {
    "greater_than", "greater_than_equal", "less_than", "less_than_equal",
    "too_short", "too_long",
}


def _format_errors(exc: ValidationError) -> tuple[str, bool]:
    parts = []
    only_range = True
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        parts.append(f"{loc}: {err['msg']}")
        if err["type"] not in _RANGE_ERRORS and not (err["type"] == "value_error" and "outside" in err["msg"]):
            only_range = False
    return "; ".join(parts), only_range


def from_mapping(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        msg, is_range = _format_errors(exc)
        raise (ConfigRangeError if is_range else ConfigSchemaError)(msg) from None


def _reject_duplicates(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigSchemaError(f"{k}: duplicate key")
        out[k] = v
    return out


_HEADER = re.compile(r"^\s*\[\s*([^\]]+?)\s*\]\s*(#.*)?$")
_ASSIGN = re.compile(r"^\s*([A-Za-z0-9_.\-]+)\s*=")


def _find_duplicate(text: str) -> str | None:
    """Dotted path of the first repeated key or table in simple TOML text."""
    seen = set()
    table = ""
    for line in text.splitlines():
        m = _HEADER.match(line)
        if m:
            table = m.group(1).replace(" ", "")
            if table in seen:
                return table
            seen.add(table)
            continue
        m = _ASSIGN.match(line)
        if m:
            key = f"{table}.{m.group(1)}" if table else m.group(1)
            if key in seen:
                return key
            seen.add(key)
    return None


def load_config(path) -> ExperimentConfig:
    """Read a TOML config (or a JSON config / run manifest) and validate it."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigParseError(f"{path}: cannot read ({exc.strerror})") from None
    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text, object_pairs_hook=_reject_duplicates) if text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ConfigParseError(f"{path}: {exc}") from None
        if isinstance(data, dict) and "config" in data and "subcommand" in data:
            data = data["config"]
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            msg = str(exc)
            if "overwrite" in msg or "twice" in msg or "redefin" in msg:
                where = _find_duplicate(text) or "?"
                raise ConfigSchemaError(f"{where}: duplicate key ({path}: {msg})") from None
            raise ConfigParseError(f"{path}: {msg}") from None
    if not isinstance(data, dict):
        raise ConfigSchemaError(f"{path}: top level must be a table")
    return from_mapping(data)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def contrast_for_visibility(target: float, polarization: float, flipper_effs=()) -> float:
    """Interferometer contrast that gives the requested overall fringe visibility."""
    denom = polarization * math.prod(flipper_effs)
    c = target / denom
    if not 0 <= c <= 1:
        raise ValueError(f"visibility {target} unreachable with polarization {polarization} and flippers {flipper_effs}")
    return c
