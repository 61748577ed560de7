"""Experiment configuration: TOML schema, validation, presets and hashing."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .camera import CameraConfig, DriftModel
from .localization import SelectionCriteria
from .odmr import MwSchedule
from .physics import DEFAULT_ON_FRACTION_TABLE, EmitterModel, IlluminationConfig, RateSet, scale_rates

PRESETS = ("fig2a", "fig2b", "fig2c", "fig3c", "fig3d", "accuracy")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every offending key."""

    def __init__(self, problems: list[str], source: str | None = None):
        self.problems = problems
        head = f"invalid configuration{f' in {source}' if source else ''}"
        super().__init__(head + ":\n" + "\n".join(f"  - {p}" for p in problems))


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ExperimentSection(_Section):
    name: str = "experiment"
    n_frames: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)
    output_dir: str = "nvstorm-out"


class IlluminationSection(_Section):
    wavelength_nm: float = Field(594.0, ge=580.0, le=650.0)
    intensity_kw_cm2: float = Field(1.0, gt=0)
    reference_intensity_kw_cm2: float = Field(1.0, gt=0)
    tau_on_ref_s: float = Field(2.0, gt=0)
    tau_off_ref_s: float = Field(18.0, gt=0)
    gamma_ref_cps: float = Field(300.0, gt=0)
    on_fraction_table: list[tuple[float, float]] = Field(
        default_factory=lambda: [tuple(r) for r in DEFAULT_ON_FRACTION_TABLE])

    @field_validator("on_fraction_table")
    @classmethod
    def _table(cls, v):
        lam = [r[0] for r in v]
        if len(v) < 1 or lam != sorted(lam) or len(set(lam)) != len(lam):
            raise ValueError("needs strictly increasing wavelengths")
        if not all(0 < r[1] < 1 for r in v):
            raise ValueError("on-fractions must lie in (0, 1)")
        return v


class CameraSection(_Section):
    width_px: int = Field(24, ge=1)
    height_px: int = Field(24, ge=1)
    pixel_size_nm: float = Field(100.0, gt=0)
    exposure_s: Optional[float] = Field(None, gt=0, description="defaults to the mean bright time")
    psf_sigma_nm: float = Field(130.0, gt=0)
    background_base: float = Field(1.0, ge=0)
    background_rate: float = Field(0.3, ge=0)


class DriftSection(_Section):
    kind: Literal["none", "random_walk", "linear"] = "random_walk"
    sigma_drift_nm: float = Field(10.0, ge=0)
    seed: Optional[int] = Field(None, ge=0, description="defaults to the experiment seed")


class EmitterSection(_Section):
    x_nm: float
    y_nm: float
    orientation_id: int = Field(0, ge=0, le=3)
    nu_minus_mhz: float = 2770.0
    nu_plus_mhz: float = 2970.0
    hyperfine_splitting_mhz: float = Field(2.2, ge=0)
    linewidth_fwhm_mhz: float = Field(1.0, gt=0)
    odmr_contrast: float = Field(0.3, ge=0, le=1)

    @model_validator(mode="after")
    def _order(self):
        if not self.nu_minus_mhz < self.nu_plus_mhz:
            raise ValueError("nu_minus_mhz must be below nu_plus_mhz")
        return self


class SweepSpec(_Section):
    start_mhz: float
    step_mhz: float = Field(gt=0)
    points: int = Field(ge=1)


class ScheduleSection(_Section):
    frequencies_mhz: Optional[list[float]] = None
    sweep: Optional[SweepSpec] = None
    frames_per_step: int = Field(1, ge=1)
    signs: Optional[list[Literal[-1, 0, 1]]] = None

    @model_validator(mode="after")
    def _freqs(self):
        if (self.frequencies_mhz is None) == (self.sweep is None):
            raise ValueError("give exactly one of frequencies_mhz or sweep")
        f = self.resolved_frequencies()
        if len(set(f)) != len(f):
            raise ValueError("frequencies must be distinct")
        if self.signs is not None and len(self.signs) != len(f):
            raise ValueError(f"signs has {len(self.signs)} entries for {len(f)} frequencies")
        return self

    def resolved_frequencies(self) -> list[float]:
        if self.frequencies_mhz is not None:
            return [float(v) for v in self.frequencies_mhz]
        s = self.sweep
        return [round(s.start_mhz + k * s.step_mhz, 9) for k in range(s.points)]


class SelectionSection(_Section):
    min_photons: Optional[int] = Field(None, ge=0)
    max_photons: Optional[int] = Field(None, gt=0)
    max_asymmetry: float = Field(1.3, gt=1)
    max_residual: float = Field(1.5, gt=0)
    roi_px: int = Field(11, ge=3)
    min_snr: float = Field(5.0, ge=0)

    @model_validator(mode="after")
    def _window(self):
        if self.min_photons is not None and self.max_photons is not None and self.min_photons >= self.max_photons:
            raise ValueError("min_photons must be below max_photons")
        return self


class AnalysisSection(_Section):
    render_pixel_nm: float = Field(2.0, gt=0)
    objective: Literal["lsq", "mle"] = "mle"
    weighting: Literal["photons", "unit"] = "photons"
    spectrum_bursts: Literal["full_exposure", "all"] = "full_exposure"
    line_half_length_nm: float = Field(60.0, gt=0)


class SweepSection(_Section):
    variable: Literal["tau_on", "separation", "M"] = "tau_on"
    values: Optional[list[float]] = None
    measured_values: Optional[list[float]] = None
    repeats: int = Field(4, ge=1)
    n_frames: Optional[int] = Field(None, ge=1)


class ExperimentConfig(_Section):
    experiment: ExperimentSection = ExperimentSection()
    illumination: IlluminationSection = IlluminationSection()
    camera: CameraSection = CameraSection()
    drift: DriftSection = DriftSection()
    emitters: list[EmitterSection] = Field(default_factory=list)
    schedule: Optional[ScheduleSection] = None
    selection: SelectionSection = SelectionSection()
    analysis: AnalysisSection = AnalysisSection()
    sweep: SweepSection = SweepSection()

    @model_validator(mode="after")
    def _cycle(self):
        if self.schedule is not None:
            cycle = len(self.schedule.resolved_frequencies()) * self.schedule.frames_per_step
            if self.experiment.n_frames % cycle:
                raise ValueError(
                    f"experiment.n_frames={self.experiment.n_frames} is not a multiple of the "
                    f"schedule cycle ({cycle} frames)")
        return self

    # domain objects

    def illumination_config(self) -> IlluminationConfig:
        d = self.illumination.model_dump()
        d["on_fraction_table"] = tuple(tuple(r) for r in d["on_fraction_table"])
        return IlluminationConfig(**d)

    def rates(self) -> RateSet:
        return scale_rates(self.illumination_config())

    def camera_config(self) -> CameraConfig:
        d = self.camera.model_dump()
        if d["exposure_s"] is None:
            d["exposure_s"] = self.rates().tau_on_s
        return CameraConfig(**d)

    def drift_model(self) -> DriftModel:
        seed = self.drift.seed if self.drift.seed is not None else self.experiment.seed
        return DriftModel(self.drift.kind, self.drift.sigma_drift_nm, seed)

    def emitter_models(self) -> list[EmitterModel]:
        return [EmitterModel(**e.model_dump()) for e in self.emitters]

    def mw_schedule(self) -> MwSchedule | None:
        if self.schedule is None:
            return None
        f = self.schedule.resolved_frequencies()
        signs = dict(zip(f, self.schedule.signs)) if self.schedule.signs else {}
        return MwSchedule(tuple(f), self.schedule.frames_per_step, signs)

    def selection_criteria(self) -> SelectionCriteria:
        return SelectionCriteria(**self.selection.model_dump())

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return self.model_copy(update={"experiment": self.experiment.model_copy(update={"seed": seed})})

    def with_output(self, output_dir: str) -> "ExperimentConfig":
        return self.model_copy(update={"experiment": self.experiment.model_copy(update={"output_dir": output_dir})})

    def resolved(self) -> dict:
        """Plain-data form with defaults filled in; ``None`` values dropped."""
        return _drop_none(self.model_dump(mode="json"))

    def config_hash(self) -> str:
        """SHA-256 over the resolved configuration, output location excluded."""
        data = self.resolved()
        data["experiment"].pop("output_dir", None)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def provenance(self) -> list[str]:
        return [f"nvstorm {__version__}", f"config_hash {self.config_hash()}", f"seed {self.experiment.seed}"]

    def to_toml(self) -> str:
        return tomli_w.dumps(self.resolved())


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, list):
        return [_drop_none(v) for v in obj]
    return obj


def _format_errors(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"]
        if err["type"] == "extra_forbidden":
            msg = "unknown key"
        out.append(f"{loc}: {msg}")
    return out


def from_dict(data: dict, source: str | None = None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc), source) from None


def loads(text: str, source: str | None = None) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([f"TOML syntax: {exc}"], source) from None
    return from_dict(data, source)


def preset_path(name: str):
    return resources.files("nvstorm").joinpath("presets", f"{name}.toml")


def load(path_or_preset: str | os.PathLike) -> ExperimentConfig:
    """Load a config file, or a shipped preset by name (``fig2b``)."""
    p = Path(path_or_preset)
    if not p.exists() and str(path_or_preset) in PRESETS:
        res = preset_path(str(path_or_preset))
        return loads(res.read_text(), f"preset {path_or_preset}")
    return loads(p.read_text(), str(p))
