"""Charge-state blinking and spin-dependent fluorescence of NV centres.

Blinking is a two-state telegraph process. Under illumination intensity
``I`` both mean dwell times scale as ``I**-2`` and the detected count rate
in the bright (NV-) state scales as ``I``, so photons per burst go as
``1/I``. The bright fraction is set by wavelength only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import rng as _rng

REFERENCE_WAVELENGTH_NM = 594.0

# Bright-state fraction vs. excitation wavelength. Only the 594 nm entry is
# a measured anchor; the others are a monotone placeholder curve.
DEFAULT_ON_FRACTION_TABLE: tuple[tuple[float, float], ...] = (
    (580.0, 0.25),
    (594.0, 0.10),
    (610.0, 0.04),
    (650.0, 0.01),
)


class State(str, Enum):
    ON = "on"
    OFF = "off"


def on_fraction_at(wavelength_nm: float, table=DEFAULT_ON_FRACTION_TABLE) -> float:
    lam, frac = np.asarray(table, dtype=float).T
    return float(np.interp(wavelength_nm, lam, frac))


@dataclass(frozen=True)
class IlluminationConfig:
    wavelength_nm: float = 594.0
    intensity_kw_cm2: float = 1.0
    reference_intensity_kw_cm2: float = 1.0
    tau_on_ref_s: float = 2.0
    tau_off_ref_s: float = 18.0
    gamma_ref_cps: float = 300.0
    on_fraction_table: tuple[tuple[float, float], ...] = field(default=DEFAULT_ON_FRACTION_TABLE, repr=False)

    def __post_init__(self):
        for name in ("wavelength_nm", "intensity_kw_cm2", "reference_intensity_kw_cm2",
                     "tau_on_ref_s", "tau_off_ref_s", "gamma_ref_cps"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive, got {value!r}")
        if not 580.0 <= self.wavelength_nm <= 650.0:
            raise ValueError(f"wavelength_nm must lie in [580, 650], got {self.wavelength_nm}")

    def with_intensity(self, intensity_kw_cm2: float) -> "IlluminationConfig":
        return IlluminationConfig(
            self.wavelength_nm, intensity_kw_cm2, self.reference_intensity_kw_cm2,
            self.tau_on_ref_s, self.tau_off_ref_s, self.gamma_ref_cps, self.on_fraction_table,
        )

    def intensity_for_tau_on(self, tau_on_s: float) -> float:
        """Intensity at which the mean bright dwell time equals ``tau_on_s``."""
        return self.reference_intensity_kw_cm2 * np.sqrt(self.tau_on_ref_s / tau_on_s)


@dataclass(frozen=True)
class RateSet:
    tau_on_s: float
    tau_off_s: float
    gamma_cps: float

    def __post_init__(self):
        if not (self.tau_on_s > 0 and self.tau_off_s > 0 and self.gamma_cps > 0):
            raise ValueError(f"rates must be positive: {self}")

    @property
    def on_fraction(self) -> float:
        return self.tau_on_s / (self.tau_on_s + self.tau_off_s)

    @property
    def photons_per_burst(self) -> float:
        return self.gamma_cps * self.tau_on_s


@dataclass(frozen=True)
class EmitterModel:
    x_nm: float
    y_nm: float
    orientation_id: int = 0
    nu_minus_mhz: float = 2770.0
    nu_plus_mhz: float = 2970.0
    hyperfine_splitting_mhz: float = 2.2
    linewidth_fwhm_mhz: float = 1.0
    odmr_contrast: float = 0.3

    def __post_init__(self):
        if self.orientation_id not in (0, 1, 2, 3):
            raise ValueError(f"orientation_id must be 0..3, got {self.orientation_id}")
        if not 0.0 <= self.odmr_contrast <= 1.0:
            raise ValueError(f"odmr_contrast must lie in [0, 1], got {self.odmr_contrast}")
        if not self.linewidth_fwhm_mhz > 0:
            raise ValueError("linewidth_fwhm_mhz must be positive")
        if not self.nu_minus_mhz < self.nu_plus_mhz:
            raise ValueError("nu_minus_mhz must be below nu_plus_mhz")

    @property
    def line_centers_mhz(self) -> np.ndarray:
        """All six hyperfine line centres, (nu-, nu+) x (m_I = -1, 0, +1)."""
        a = self.hyperfine_splitting_mhz
        return np.array([nu + m * a for nu in (self.nu_minus_mhz, self.nu_plus_mhz) for m in (-1, 0, 1)])


@dataclass(frozen=True)
class TelegraphTrace:
    """Alternating bright/dark dwell intervals covering ``[0, total_duration_s]``."""

    first_state: State
    durations_s: np.ndarray
    total_duration_s: float

    def __post_init__(self):
        d = np.asarray(self.durations_s, dtype=float)
        object.__setattr__(self, "durations_s", d)
        if d.size == 0 or np.any(d <= 0):
            raise ValueError("interval durations must be strictly positive")

    @property
    def states(self) -> list[State]:
        other = State.OFF if self.first_state is State.ON else State.ON
        return [self.first_state if i % 2 == 0 else other for i in range(self.durations_s.size)]

    @property
    def intervals(self) -> list[tuple[State, float]]:
        return list(zip(self.states, self.durations_s.tolist()))

    @property
    def on_mask(self) -> np.ndarray:
        parity = np.arange(self.durations_s.size) % 2 == 0
        return parity if self.first_state is State.ON else ~parity

    @property
    def boundaries_s(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.durations_s)])

    def on_durations(self) -> np.ndarray:
        return self.durations_s[self.on_mask]

    def off_durations(self) -> np.ndarray:
        return self.durations_s[~self.on_mask]

    def on_time_between(self, t0, t1) -> np.ndarray:
        """Exact bright time inside each window ``[t0, t1]`` (vectorised)."""
        bounds = self.boundaries_s
        cum_on = np.concatenate([[0.0], np.cumsum(np.where(self.on_mask, self.durations_s, 0.0))])
        return np.interp(t1, bounds, cum_on) - np.interp(t0, bounds, cum_on)

    def empirical_on_fraction(self) -> float:
        return float(self.on_durations().sum() / self.total_duration_s)


def scale_rates(cfg: IlluminationConfig) -> RateSet:
    """Dwell times and bright count rate at the configured intensity.

    >>> r = scale_rates(IlluminationConfig(intensity_kw_cm2=2.0))
    >>> r.tau_on_s, r.tau_off_s, r.gamma_cps
    (0.5, 4.5, 600.0)
    """
    if not cfg.intensity_kw_cm2 > 0:
        raise ValueError("intensity must be positive")
    ratio = cfg.reference_intensity_kw_cm2 / cfg.intensity_kw_cm2
    tau_on = cfg.tau_on_ref_s * ratio**2
    tau_off = cfg.tau_off_ref_s * ratio**2
    if cfg.wavelength_nm != REFERENCE_WAVELENGTH_NM:
        r_ref = on_fraction_at(REFERENCE_WAVELENGTH_NM, cfg.on_fraction_table)
        r_lam = on_fraction_at(cfg.wavelength_nm, cfg.on_fraction_table)
        tau_off *= ((1.0 - r_lam) / r_lam) / ((1.0 - r_ref) / r_ref)
    gamma = cfg.gamma_ref_cps / ratio
    return RateSet(tau_on_s=tau_on, tau_off_s=tau_off, gamma_cps=gamma)


def sample_telegraph(rates: RateSet, total_duration_s: float, seed: int | np.random.Generator) -> TelegraphTrace:
    """Draw an exponential-dwell telegraph trace of the given length.

    The initial state is bright with probability ``rates.on_fraction``;
    the final interval is truncated at ``total_duration_s``.
    """
    if not total_duration_s > 0:
        raise ValueError("total_duration_s must be positive")
    gen = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    first_on = bool(gen.random() < rates.on_fraction)
    means = (rates.tau_on_s, rates.tau_off_s) if first_on else (rates.tau_off_s, rates.tau_on_s)
    cycle = means[0] + means[1]
    chunks = []
    elapsed = 0.0
    while elapsed < total_duration_s:
        n_pairs = int(1.2 * (total_duration_s - elapsed) / cycle) + 8
        pair = gen.exponential(size=(n_pairs, 2)) * np.asarray(means)
        flat = pair.ravel()
        chunks.append(flat)
        elapsed += flat.sum()
    durations = np.concatenate(chunks)
    ends = np.cumsum(durations)
    last = int(np.searchsorted(ends, total_duration_s))
    durations = durations[: last + 1].copy()
    durations[-1] = total_duration_s - (ends[last - 1] if last > 0 else 0.0)
    return TelegraphTrace(State.ON if first_on else State.OFF, durations, float(total_duration_s))


def sample_traces(rate_sets, total_duration_s: float, seed: int) -> list[TelegraphTrace]:
    """One independent trace per emitter, keyed by ``(seed, emitter index)``."""
    return [
        sample_telegraph(rates, total_duration_s, _rng.substream(seed, _rng.TRACE, i))
        for i, rates in enumerate(rate_sets)
    ]


def lorentzian(nu, center, fwhm):
    x = 2.0 * (np.asarray(nu, dtype=float) - center) / fwhm
    return 1.0 / (1.0 + x * x)


def hyperfine_triplet(nu, center_mhz, splitting_mhz, fwhm_mhz):
    """Three equal Lorentzians at ``center + m*splitting``, scaled to peak 1.

    The peak of the sum sits on the central line for any splitting, so the
    normalisation is the value there.
    """
    total = sum(lorentzian(nu, center_mhz + m * splitting_mhz, fwhm_mhz) for m in (-1, 0, 1))
    peak = 1.0 + 2.0 * lorentzian(splitting_mhz, 0.0, fwhm_mhz)
    return total / peak


def odmr_dip(emitter: EmitterModel, mw_frequency_mhz) -> np.ndarray:
    """Fractional fluorescence drop, in ``[0, odmr_contrast]``."""
    nu = np.asarray(mw_frequency_mhz, dtype=float)
    shape = sum(
        hyperfine_triplet(nu, center, emitter.hyperfine_splitting_mhz, emitter.linewidth_fwhm_mhz)
        for center in (emitter.nu_minus_mhz, emitter.nu_plus_mhz)
    )
    dip = np.minimum(emitter.odmr_contrast * shape, emitter.odmr_contrast)
    return np.where(np.isnan(nu), 0.0, dip)


def odmr_emission_rate(emitter: EmitterModel, gamma_on_cps: float, mw_frequency_mhz=None):
    """Bright-state count rate under cw microwave drive.

    ``None`` (or NaN) means the microwave is off. Arrays of frequencies are
    evaluated element-wise.
    """
    if not gamma_on_cps > 0:
        raise ValueError("gamma_on_cps must be positive")
    if mw_frequency_mhz is None:
        return float(gamma_on_cps)
    rate = gamma_on_cps * (1.0 - odmr_dip(emitter, mw_frequency_mhz))
    return float(rate) if np.ndim(rate) == 0 else rate
