"""Microwave-tagged localization analysis (STORM-ODMR).

Every accepted burst carries the microwave frequency that was applied
during its frame. Splitting bursts by tag gives signed difference images
that separate emitters with different spin resonances, and per-emitter
spectra that resolve the nitrogen hyperfine triplet.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize

from .camera import FrameStack
from .localization import Localization, as_arrays
from .physics import hyperfine_triplet
from .reconstruction import EmitterEstimate, RenderedImage, render_points

GAMMA_E_OVER_2PI_HZ_PER_T = 28.024e9
TAG_TOLERANCE_MHZ = 1e-6


class ScheduleError(ValueError):
    """Localization tags and the microwave schedule disagree."""


class ZeroCrossingNotFound(RuntimeError):
    pass


class HyperfineFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class MwSchedule:
    """Microwave frequencies stepped synchronously with the camera.

    Frequencies are visited round-robin, each held for ``frames_per_step``
    consecutive frames. ``sign_map`` gives the weight of each frequency in a
    difference image; unlisted frequencies count as 0.
    """

    frequencies_mhz: tuple[float, ...]
    frames_per_step: int = 1
    sign_map: Mapping[float, int] = field(default_factory=dict)

    def __post_init__(self):
        f = tuple(float(v) for v in self.frequencies_mhz)
        object.__setattr__(self, "frequencies_mhz", f)
        if not f:
            raise ValueError("schedule needs at least one frequency")
        if len(set(f)) != len(f):
            raise ValueError("schedule frequencies must be distinct")
        if self.frames_per_step < 1:
            raise ValueError("frames_per_step must be >= 1")
        for k, s in self.sign_map.items():
            if s not in (-1, 0, 1):
                raise ValueError(f"sign for {k} MHz must be -1, 0 or +1")

    @property
    def cycle_frames(self) -> int:
        return len(self.frequencies_mhz) * self.frames_per_step

    def frame_tags(self) -> list[float]:
        """One cycle of per-frame tags; the renderer repeats it."""
        return [f for f in self.frequencies_mhz for _ in range(self.frames_per_step)]

    def index_of(self, tags) -> np.ndarray:
        """Schedule index of each tag; raises :class:`ScheduleError` for unknown tags."""
        tags = np.asarray(tags, dtype=float)
        freqs = np.asarray(self.frequencies_mhz)
        hit = np.abs(tags[:, None] - freqs[None, :]) <= TAG_TOLERANCE_MHZ
        found = hit.any(axis=1)
        if not np.all(found):
            miss = tags[~found]
            untagged = int(np.isnan(miss).sum())
            bad = sorted(set(miss[~np.isnan(miss)].tolist()))
            parts = [f"{untagged} without a microwave tag"] if untagged else []
            if bad:
                parts.append(f"tags not in schedule: {bad[:5]}")
            raise ScheduleError("frames do not match the schedule: " + "; ".join(parts))
        return hit.argmax(axis=1)

    def signs(self, tags) -> np.ndarray:
        idx = self.index_of(tags)
        lookup = np.array([self.sign_for(f) for f in self.frequencies_mhz], dtype=float)
        return lookup[idx]

    def sign_for(self, freq_mhz: float) -> int:
        for k, s in self.sign_map.items():
            if abs(float(k) - freq_mhz) <= TAG_TOLERANCE_MHZ:
                return int(s)
        return 0

    def with_signs(self, sign_map: Mapping[float, int]) -> "MwSchedule":
        return MwSchedule(self.frequencies_mhz, self.frames_per_step, dict(sign_map))


def difference_image(locs: Sequence[Localization], schedule: MwSchedule, render_pixel_nm: float = 2.0,
                     weighting: str = "photons", extent=None) -> RenderedImage:
    """Signed location density, each burst weighted by the sign of its tag.

    ``weighting="photons"`` additionally scales every burst by its fitted
    photon count, so a spin-dependent drop in brightness shows up directly;
    ``"unit"`` uses the plain unit-weight density.
    """
    if not locs:
        raise ValueError("no localizations")
    arr = as_arrays(locs)
    sign = schedule.signs(arr["tag"])
    if weighting == "photons":
        w = sign * arr["n"]
    elif weighting == "unit":
        w = sign
    else:
        raise ValueError(f"unknown weighting {weighting!r}")
    keep = sign != 0
    if extent is None:
        from .reconstruction import default_extent
        extent = default_extent(arr["x"], arr["y"], arr["sigma"])
    if not keep.any():
        ref = render_points(arr["x"][:1], arr["y"][:1], arr["sigma"][:1], 0.0, render_pixel_nm, extent)
        return ref
    img = render_points(arr["x"][keep], arr["y"][keep], arr["sigma"][keep], w[keep], render_pixel_nm, extent)
    img.normalization = "signed_photons" if weighting == "photons" else "signed_unit"
    return img


@dataclass
class ZeroCrossing:
    x_nm: float
    y_nm: float
    distance_nm: float
    depth: float
    distances_nm: np.ndarray
    profile: np.ndarray


def signed_profile_depth(profile: np.ndarray) -> float:
    """Half the peak-to-peak swing of a signed line scan."""
    return 0.5 * float(np.max(profile) - np.min(profile))


def zero_crossing(image: RenderedImage, p1, p2, step_nm: float | None = None) -> ZeroCrossing:
    """Zero of the line scan p1 -> p2 between its minimum and maximum.

    The crossing is linearly interpolated between the two samples that
    bracket it. When noise produces several sign changes between the
    extrema, the one with the steepest step is reported.
    """
    d, v, xs, ys = image.line_profile(p1, p2, step_nm)
    i_min, i_max = int(np.argmin(v)), int(np.argmax(v))
    if not (v[i_min] < 0 < v[i_max]):
        raise ZeroCrossingNotFound("line scan does not change sign")
    lo, hi = sorted((i_min, i_max))
    seg = v[lo:hi + 1]
    changes = np.flatnonzero(np.signbit(seg[:-1]) != np.signbit(seg[1:]))
    if changes.size == 0:
        raise ZeroCrossingNotFound("no sign change between the extrema")
    k = lo + int(changes[np.argmax(np.abs(seg[changes + 1] - seg[changes]))])
    frac = v[k] / (v[k] - v[k + 1])
    dist = d[k] + frac * (d[k + 1] - d[k])
    x = xs[k] + frac * (xs[k + 1] - xs[k])
    y = ys[k] + frac * (ys[k + 1] - ys[k])
    return ZeroCrossing(float(x), float(y), float(dist), signed_profile_depth(v), d, v)


def snr_photon_budget(d_nm: float, reference: tuple[float, float]) -> float:
    """Photons needed for unit crossing SNR at separation ``d_nm``.

    The swing of the signed profile falls off linearly with separation, so
    the photon budget grows as ``1/d**2`` from ``reference = (d_ref, photons_ref)``.
    """
    if not d_nm > 0:
        raise ValueError("separation must be positive")
    d_ref, photons_ref = reference
    return photons_ref * (d_ref / d_nm) ** 2


@dataclass
class HyperfineFit:
    center_mhz: float
    hyperfine_mhz: float
    fwhm_mhz: float
    contrast: float
    baseline: float
    sigma_gamma: float
    stderr: dict[str, float]
    chi2_reduced: float

    def model(self, nu):
        return triplet_model(nu, self.center_mhz, self.hyperfine_mhz, self.fwhm_mhz, self.contrast, self.baseline)


@dataclass
class OdmrSpectrum:
    freqs_mhz: np.ndarray
    mean_photons: np.ndarray
    stderr: np.ndarray
    counts: np.ndarray
    fitted: HyperfineFit | None = None

    @property
    def points(self) -> list[tuple[float, float, float]]:
        return list(zip(self.freqs_mhz.tolist(), self.mean_photons.tolist(), self.stderr.tolist()))

    def flat_deviation(self) -> np.ndarray:
        """Deviation of each point from the weighted mean, in units of its stderr."""
        ok = self.counts > 1
        w = 1.0 / self.stderr[ok] ** 2
        mean = float(np.sum(w * self.mean_photons[ok]) / np.sum(w))
        out = np.full(self.freqs_mhz.shape, np.nan)
        out[ok] = (self.mean_photons[ok] - mean) / self.stderr[ok]
        return out


def neighbour_signal(stack: FrameStack, locs: Sequence[Localization], roi_px: int = 11) -> np.ndarray:
    """Background-subtracted photons in the previous and next frame, ``(n_locs, 2)``.

    The window is centred on each localization. Frames beyond either end
    of the stack give NaN.
    """
    cam = stack.camera
    r = min(roi_px, cam.width_px, cam.height_px)
    out = np.full((len(locs), 2), np.nan)
    last = len(stack) - 1
    for i, l in enumerate(locs):
        row = int(np.clip(math.floor(l.y_nm / cam.pixel_size_nm) - r // 2, 0, cam.height_px - r))
        col = int(np.clip(math.floor(l.x_nm / cam.pixel_size_nm) - r // 2, 0, cam.width_px - r))
        for j, k in enumerate((l.frame_index - 1, l.frame_index + 1)):
            if 0 <= k <= last:
                roi = stack.pixels[k, row:row + r, col:col + r]
                out[i, j] = float(roi.sum(dtype=np.int64)) - r * r * l.background
    return out


def full_exposure_bursts(stack: FrameStack, locs: Sequence[Localization], roi_px: int = 11,
                         threshold_sigma: float = 5.0) -> list[Localization]:
    """Bursts whose neighbouring frames are lit at the same spot.

    Off periods are long compared with the exposure, so a burst that is
    still bright in the frames before and after covered the whole exposure
    of its own frame. Keeping only those removes the bias a photon window
    puts on the mean of partially exposed frames, whose on-time shifts
    upward when the emitter is dimmed by the microwave.
    """
    if not locs:
        return []
    r = min(roi_px, stack.camera.width_px, stack.camera.height_px)
    nb = neighbour_signal(stack, locs, roi_px)
    thr = threshold_sigma * np.sqrt(r * r * np.array([max(l.background, 1e-12) for l in locs]))
    keep = np.all(nb > thr[:, None], axis=1)
    return [l for l, k in zip(locs, keep) if k]


def assign_spectra(clusters: Sequence[EmitterEstimate], schedule: MwSchedule) -> list[OdmrSpectrum]:
    """Mean photons per accepted burst, per cluster and microwave frequency."""
    out = []
    freqs = np.asarray(schedule.frequencies_mhz)
    for c in clusters:
        arr = as_arrays(c.members)
        idx = schedule.index_of(arr["tag"])
        mean = np.full(freqs.size, np.nan)
        err = np.full(freqs.size, np.nan)
        counts = np.bincount(idx, minlength=freqs.size)
        for k in range(freqs.size):
            v = arr["n"][idx == k]
            if v.size:
                mean[k] = v.mean()
                err[k] = v.std(ddof=1) / math.sqrt(v.size) if v.size > 1 else 0.0
        out.append(OdmrSpectrum(freqs.copy(), mean, err, counts))
    return out


def triplet_model(nu, center, spacing, fwhm, contrast, baseline):
    return baseline * (1.0 - contrast * hyperfine_triplet(nu, center, spacing, fwhm))


def fit_hyperfine(spectrum: OdmrSpectrum, spacing_bounds=(1.0, 4.0), min_significance: float = 5.0) -> HyperfineFit:
    """Least-squares fit of a hyperfine triplet with shared width and depth.

    ``contrast`` is the depth of the combined triplet at its deepest point.
    Raises :class:`HyperfineFitError` when the fit fails, the spacing leaves
    ``spacing_bounds`` or the dip is not ``min_significance`` standard
    errors deep.
    """
    ok = np.isfinite(spectrum.mean_photons) & (spectrum.counts > 1)
    nu = spectrum.freqs_mhz[ok]
    y = spectrum.mean_photons[ok]
    err = spectrum.stderr[ok]
    if nu.size < 7:
        raise HyperfineFitError(f"need at least 7 spectral points, have {nu.size}")
    err = np.where(err > 0, err, np.median(err[err > 0]) if np.any(err > 0) else 1.0)
    span = nu.max() - nu.min()
    step = np.median(np.diff(np.sort(nu)))
    base0 = float(np.quantile(y, 0.8))

    def resid(p):
        return (triplet_model(nu, *p) - y) / err

    # coarse grid over centre and spacing; depth and baseline follow linearly
    best = None
    for c0 in np.linspace(nu.min(), nu.max(), 4 * nu.size):
        for a0 in np.linspace(spacing_bounds[0], spacing_bounds[1], 13):
            for w0 in (max(step, 0.05 * span), 2.0 * step):
                shape = hyperfine_triplet(nu, c0, a0, w0)
                design = np.column_stack([np.ones_like(nu), -shape]) / err[:, None]
                coef, *_ = np.linalg.lstsq(design, y / err, rcond=None)
                cost = float(np.sum((design @ coef - y / err) ** 2))
                if best is None or cost < best[0]:
                    con = coef[1] / coef[0] if coef[0] > 0 else 0.0
                    best = (cost, [c0, a0, w0, float(np.clip(con, 1e-3, 0.99)), float(coef[0])])
    p0 = best[1] if best else [nu.mean(), 2.2, step, 0.1, base0]
    lower = [nu.min() - 0.5 * span, spacing_bounds[0] * 0.5, 0.05 * step, 0.0, 0.0]
    upper = [nu.max() + 0.5 * span, spacing_bounds[1] * 1.5, 2.0 * span, 1.0, np.inf]
    p0 = np.clip(p0, np.array(lower) + 1e-9, np.array(upper) - 1e-9)
    try:
        sol = optimize.least_squares(resid, p0, bounds=(lower, upper), x_scale="jac", max_nfev=2000)
    except ValueError as exc:
        raise HyperfineFitError(str(exc)) from exc
    if not sol.success:
        raise HyperfineFitError(f"fit did not converge: {sol.message}")
    dof = max(nu.size - 5, 1)
    chi2 = float(np.sum(sol.fun**2)) / dof
    try:
        cov = np.linalg.inv(sol.jac.T @ sol.jac) * max(chi2, 1.0)
        se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    except np.linalg.LinAlgError:
        se = np.full(5, np.inf)
    center, spacing, fwhm, contrast, baseline = sol.x
    names = ("center_mhz", "hyperfine_mhz", "fwhm_mhz", "contrast", "baseline")
    stderr = dict(zip(names, map(float, se)))
    if not spacing_bounds[0] <= spacing <= spacing_bounds[1]:
        raise HyperfineFitError(f"fitted spacing {spacing:.3f} MHz outside {spacing_bounds}")
    if not contrast > min_significance * stderr["contrast"]:
        raise HyperfineFitError(f"no significant dip (contrast {contrast:.3g} +- {stderr['contrast']:.2g})")
    sigma_gamma = float(np.std(triplet_model(nu, *sol.x) - y, ddof=5 if nu.size > 5 else 0))
    return HyperfineFit(float(center), float(spacing), float(fwhm), float(contrast), float(baseline),
                        sigma_gamma, stderr, chi2)


@dataclass(frozen=True)
class SensitivityInput:
    max_slopes_per_line: tuple[float, ...]
    sigma_gamma: float
    total_time_s: float
    gamma_e_over_2pi: float = GAMMA_E_OVER_2PI_HZ_PER_T

    def __post_init__(self):
        if len(self.max_slopes_per_line) == 0:
            raise ValueError("at least one slope is required")
        if not all(np.isfinite(self.max_slopes_per_line)):
            raise ValueError("slopes must be finite")
        if not self.total_time_s > 0:
            raise ValueError("total_time_s must be positive")


def sensitivity(inp: SensitivityInput) -> float:
    """Magnetic field sensitivity in T/sqrt(Hz).

    Slopes in counts/s per Hz of microwave detuning, ``sigma_gamma`` in
    counts/s and ``gamma_e_over_2pi`` in Hz/T.
    """
    slope = float(np.sum(np.abs(inp.max_slopes_per_line)))
    if slope == 0:
        raise ValueError("total slope is zero")
    return inp.sigma_gamma / slope / inp.gamma_e_over_2pi * math.sqrt(inp.total_time_s)


def max_line_slopes(fit: HyperfineFit, exposure_s: float, oversample: int = 4001) -> list[float]:
    """Steepest count-rate slope (counts/s/Hz) near each of the three fitted lines."""
    out = []
    for m in (-1, 0, 1):
        c = fit.center_mhz + m * fit.hyperfine_mhz
        half = min(fit.fwhm_mhz, 0.5 * fit.hyperfine_mhz)
        nu = np.linspace(c - half, c + half, oversample)
        rate = fit.model(nu) / exposure_s
        slope = np.gradient(rate, nu * 1e6)
        out.append(float(np.max(np.abs(slope))))
    return out


def sensitivity_from_fit(fit: HyperfineFit, exposure_s: float, total_time_s: float) -> tuple[float, SensitivityInput]:
    """Sensitivity of a fitted spectrum; photon counts become rates via the exposure."""
    inp = SensitivityInput(tuple(max_line_slopes(fit, exposure_s)), fit.sigma_gamma / exposure_s, total_time_s)
    return sensitivity(inp), inp


@dataclass
class ThroughputReport:
    n_emitters: int
    per_emitter_speed_factor: float
    serial_time: float
    parallel_time: float
    crossover_n: float

    @property
    def parallel_advantage(self) -> float:
        """Serial time over parallel time; above 1 the parallel scheme wins."""
        return self.serial_time / self.parallel_time

    @property
    def winner(self) -> str:
        return "parallel" if self.parallel_advantage > 1 else "serial"


def throughput_estimate(n_emitters: int, per_emitter_rate_ratio: float = 1.0,
                        serial_sensitivity: float | None = None,
                        parallel_sensitivity: float | None = None) -> ThroughputReport:
    """Time to equal precision: serial single-emitter sensing vs. parallel readout.

    Measurement time to reach a field precision scales with the square of
    the sensitivity, so one emitter is measured
    ``(parallel_sensitivity / serial_sensitivity)**2`` times faster
    serially. When sensitivities are not given, ``per_emitter_rate_ratio``
    is that speed factor directly. Times are in units of one serial
    single-emitter measurement.
    """
    if n_emitters < 1 or not per_emitter_rate_ratio > 0:
        raise ValueError("need a positive emitter count and rate ratio")
    if serial_sensitivity is not None and parallel_sensitivity is not None:
        if not (serial_sensitivity > 0 and parallel_sensitivity > 0):
            raise ValueError("sensitivities must be positive")
        factor = (parallel_sensitivity / serial_sensitivity) ** 2
    else:
        factor = float(per_emitter_rate_ratio)
    return ThroughputReport(int(n_emitters), factor, float(n_emitters), factor, factor)


SPECTRUM_COLUMNS = ("cluster_id", "freq_mhz", "mean_photons", "stderr")


def write_spectra_csv(spectra: Sequence[OdmrSpectrum], path: str | os.PathLike, comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(SPECTRUM_COLUMNS) + ["count"])
        for k, s in enumerate(spectra):
            for f, m, e, n in zip(s.freqs_mhz, s.mean_photons, s.stderr, s.counts):
                w.writerow([k, repr(float(f)), "" if np.isnan(m) else repr(float(m)),
                            "" if np.isnan(e) else repr(float(e)), int(n)])


def write_report(path: str | os.PathLike, fields: Mapping[str, object], comments: Sequence[str] = ()) -> None:
    """``key = value`` text report."""
    with open(path, "w") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        for k, v in fields.items():
            fh.write(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n")
