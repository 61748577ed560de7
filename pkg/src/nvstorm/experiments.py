"""End-to-end pipelines and Monte Carlo drivers built from a configuration."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import rng as _rng
from .camera import CameraConfig, DriftModel, FrameStack, simulate
from .config import ExperimentConfig
from .localization import Localization, LocalizationResult, as_arrays, localize_stack
from .odmr import (
    HyperfineFit, HyperfineFitError, MwSchedule, OdmrSpectrum, ZeroCrossing, assign_spectra,
    difference_image, fit_hyperfine, full_exposure_bursts, sensitivity_from_fit, signed_profile_depth,
    snr_photon_budget, zero_crossing,
)
from .physics import EmitterModel, TelegraphTrace, scale_rates
from .reconstruction import (
    EmitterEstimate, RenderedImage, cluster_emitters, cluster_fwhm,
    is_unimodal, optimal_exposure_curve, render_distribution, tau_on_sweep,
)


@dataclass
class SimulationRun:
    stack: FrameStack
    emitters: list[EmitterModel]
    traces: list[TelegraphTrace]
    photons: np.ndarray
    offsets: np.ndarray


def run_simulation(cfg: ExperimentConfig, threads: int = 1, n_frames: int | None = None,
                   emitters: Sequence[EmitterModel] | None = None, seed: int | None = None,
                   camera: CameraConfig | None = None, rates=None) -> SimulationRun:
    """Simulate the configured scene; keyword overrides serve the sweeps."""
    emitters = list(cfg.emitter_models() if emitters is None else emitters)
    rates = rates or cfg.rates()
    camera = camera or cfg.camera_config()
    seed = cfg.experiment.seed if seed is None else seed
    drift = cfg.drift_model()
    if seed != cfg.experiment.seed and cfg.drift.seed is None:
        drift = DriftModel(drift.kind, drift.sigma_drift_nm, seed)
    sched = cfg.mw_schedule()
    n = n_frames or cfg.experiment.n_frames
    stack, traces, photons, offsets = simulate(
        camera, emitters, [rates] * len(emitters), drift, n,
        sched.frame_tags() if sched else None, seed, threads)
    return SimulationRun(stack, emitters, traces, photons, offsets)


def ground_truth_rows(run: SimulationRun) -> list[dict]:
    rows = []
    for k, (em, tr) in enumerate(zip(run.emitters, run.traces)):
        on = tr.on_durations()
        rows.append({
            "emitter": k, "x_nm": em.x_nm, "y_nm": em.y_nm, "orientation_id": em.orientation_id,
            "nu_minus_mhz": em.nu_minus_mhz, "nu_plus_mhz": em.nu_plus_mhz,
            "odmr_contrast": em.odmr_contrast, "n_on_intervals": int(on.size),
            "mean_on_s": float(on.mean()) if on.size else 0.0,
            "on_fraction": tr.empirical_on_fraction(),
            "signal_photons": float(run.photons[:, k].sum()),
        })
    return rows


def sort_clusters(clusters: Sequence[EmitterEstimate]) -> list[EmitterEstimate]:
    return sorted(clusters, key=lambda c: (round(c.mean_x_nm, 6), round(c.mean_y_nm, 6)))


@dataclass
class Reconstruction:
    result: LocalizationResult
    clusters: list[EmitterEstimate]
    image: RenderedImage
    line_fwhm_nm: list[float]


def reconstruct(stack: FrameStack, cfg: ExperimentConfig) -> Reconstruction:
    """Localize, cluster and render; raises ``ValueError`` without localizations."""
    res = localize_stack(stack, cfg.selection_criteria(), objective=cfg.analysis.objective)
    if not res.localizations:
        raise ValueError("no localizations")
    px = cfg.analysis.render_pixel_nm
    clusters = sort_clusters(cluster_emitters(res.localizations, px, drift_correlated=cfg.drift.kind != "none"))
    image = render_distribution(res.localizations, px)
    fwhm = cluster_fwhm(image, clusters, cfg.analysis.line_half_length_nm)
    return Reconstruction(res, clusters, image, fwhm)


def match_clusters(clusters: Sequence[EmitterEstimate], emitters: Sequence[EmitterModel]) -> list[EmitterEstimate | None]:
    """Nearest cluster for each true emitter (``None`` when there are fewer clusters)."""
    out = []
    free = list(clusters)
    for em in emitters:
        if not free:
            out.append(None)
            continue
        c = min(free, key=lambda c: math.hypot(c.mean_x_nm - em.x_nm, c.mean_y_nm - em.y_nm))
        free.remove(c)
        out.append(c)
    return out


# exposure sweep

@dataclass
class TauOnPoint:
    tau_on_s: float
    predicted_fwhm_nm: float
    measured_fwhm_nm: float = float("nan")
    rendered_fwhm_nm: float = float("nan")
    bursts: int = 0


def tau_on_experiment(cfg: ExperimentConfig, taus: Sequence[float] | None = None,
                      measured: Sequence[float] | None = None, threads: int = 1) -> list[TauOnPoint]:
    """Predicted FWHM over ``taus`` and Monte Carlo values at ``measured``.

    The Monte Carlo FWHM is taken from the scatter of burst positions in
    the largest cluster, the quantity the drift-broadened prediction
    describes; the rendered line-scan width is reported next to it.
    """
    base = cfg.illumination_config()
    cam = cfg.camera_config()
    taus = list(taus if taus is not None else (cfg.sweep.values or np.geomspace(0.25, 16.0, 25)))
    measured = list(measured if measured is not None else (cfg.sweep.measured_values or []))
    grid = sorted(set(map(float, taus)) | set(map(float, measured)))
    curve = optimal_exposure_curve(tau_on_sweep(base, grid), cam, cfg.drift.sigma_drift_nm)
    points = {round(p.tau_on_s, 9): TauOnPoint(round(float(p.tau_on_s), 9), p.fwhm_nm) for p in curve}
    n_frames = cfg.sweep.n_frames or cfg.experiment.n_frames
    for i, tau in enumerate(measured):
        ill = base.with_intensity(base.intensity_for_tau_on(tau))
        rates = scale_rates(ill)
        camera = replace(cam, exposure_s=rates.tau_on_s)
        run = run_simulation(cfg, threads, n_frames, seed=_sub_seed(cfg.experiment.seed, 1, i),
                             camera=camera, rates=rates)
        rec = reconstruct(run.stack, cfg)
        big = max(range(len(rec.clusters)), key=lambda k: rec.clusters[k].M)
        pt = points[round(float(tau), 9)]
        pt.measured_fwhm_nm = rec.clusters[big].fwhm_nm
        pt.rendered_fwhm_nm = rec.line_fwhm_nm[big]
        pt.bursts = rec.clusters[big].M
    return [points[k] for k in sorted(points)]


def _sub_seed(seed: int, *keys: int) -> int:
    return int(_rng.substream(seed, _rng.EXPERIMENT, *keys).integers(0, 2**31 - 1))


def tau_on_summary(points: Sequence[TauOnPoint]) -> dict:
    pred = [p.predicted_fwhm_nm for p in points]
    best = curve_minimum_point(points)
    return {"unimodal": is_unimodal(pred), "tau_min_s": best.tau_on_s, "fwhm_min_nm": best.predicted_fwhm_nm}


def curve_minimum_point(points: Sequence[TauOnPoint]) -> TauOnPoint:
    return min(points, key=lambda p: p.predicted_fwhm_nm)


# accuracy versus burst count

@dataclass
class AccuracyPoint:
    M: int
    predicted_nm: float
    measured_nm: float
    samples: int


@dataclass
class AccuracyResult:
    points: list[AccuracyPoint]
    slope: float
    pool: int
    sigma_burst_nm: float
    accuracy_at: dict[int, float] = field(default_factory=dict)


def accuracy_experiment(cfg: ExperimentConfig, Ms: Sequence[int] | None = None, threads: int = 1,
                        report_M: Sequence[int] = (2000,)) -> AccuracyResult:
    """RMS deviation of cluster means from the true position versus burst count.

    ``sweep.repeats`` independent stacks of the first configured emitter
    are localized and pooled. The pool is cut into disjoint groups of
    ``M`` consecutive bursts; each group gives one x and one y deviation.
    """
    Ms = [int(m) for m in (Ms if Ms is not None else (cfg.sweep.values or (50, 200, 800, 3200)))]
    em = cfg.emitter_models()[0]
    n_frames = cfg.sweep.n_frames or cfg.experiment.n_frames
    xs, ys, sig = [], [], []
    for r in range(cfg.sweep.repeats):
        run = run_simulation(cfg, threads, n_frames, emitters=[em], seed=_sub_seed(cfg.experiment.seed, 2, r))
        res = localize_stack(run.stack, cfg.selection_criteria(), objective=cfg.analysis.objective)
        a = as_arrays(res.localizations)
        xs.append(a["x"] - em.x_nm)
        ys.append(a["y"] - em.y_nm)
        sig.append(a["sigma"])
    dx, dy = np.concatenate(xs), np.concatenate(ys)
    spread = float(np.sqrt(0.5 * (dx.var() + dy.var())))
    points = []
    for M in Ms:
        g = dx.size // M
        if g == 0:
            raise ValueError(f"pool of {dx.size} bursts is smaller than M={M}")
        mx = dx[: g * M].reshape(g, M).mean(axis=1)
        my = dy[: g * M].reshape(g, M).mean(axis=1)
        rms = float(np.sqrt(np.mean(np.concatenate([mx, my]) ** 2)))
        points.append(AccuracyPoint(M, spread / math.sqrt(M), rms, 2 * g))
    slope = float(np.polyfit(np.log([p.M for p in points]), np.log([p.measured_nm for p in points]), 1)[0])
    acc = {}
    for M in report_M:
        if dx.size >= M:
            members = [Localization(0, em.x_nm + x, em.y_nm + y, 1.0, 1.0, 1.0) for x, y in zip(dx[:M], dy[:M])]
            acc[M] = EmitterEstimate.from_members(members).accuracy_nm
    return AccuracyResult(points, slope, int(dx.size), spread, acc)


# difference imaging versus separation

@dataclass
class SeparationPoint:
    d_nm: float
    depth_mean: float
    depth_std: float
    photons_used: float
    required_photons: float
    predicted_photons: float = float("nan")
    crossing_offsets_nm: list[float] = field(default_factory=list)

    @property
    def snr(self) -> float:
        return self.depth_mean / self.depth_std if self.depth_std > 0 else float("inf")


def pair_emitters(cfg: ExperimentConfig, d_nm: float) -> list[EmitterModel]:
    """The first two configured emitters moved symmetrically to separation ``d_nm`` along x."""
    a, b = cfg.emitter_models()[:2]
    cx, cy = 0.5 * (a.x_nm + b.x_nm), 0.5 * (a.y_nm + b.y_nm)
    return [replace(a, x_nm=cx - 0.5 * d_nm, y_nm=cy), replace(b, x_nm=cx + 0.5 * d_nm, y_nm=cy)]


@dataclass
class DifferenceRun:
    image: RenderedImage
    crossing: ZeroCrossing
    p1: tuple[float, float]
    p2: tuple[float, float]
    photons: float
    n_locs: int


def lobe_axis(image: RenderedImage, margin_nm: float = 40.0) -> tuple[tuple[float, float], tuple[float, float]]:
    """Scan endpoints through the negative and positive extrema, extended by ``margin_nm``."""
    g = image.grid
    r_lo, c_lo = np.unravel_index(int(np.argmin(g)), g.shape)
    r_hi, c_hi = np.unravel_index(int(np.argmax(g)), g.shape)
    p = image.pixel_nm
    lo = np.array([image.origin_x_nm + (c_lo + 0.5) * p, image.origin_y_nm + (r_lo + 0.5) * p])
    hi = np.array([image.origin_x_nm + (c_hi + 0.5) * p, image.origin_y_nm + (r_hi + 0.5) * p])
    u = hi - lo
    norm = float(np.hypot(*u))
    u = u / norm if norm > 0 else np.array([1.0, 0.0])
    return tuple(lo - margin_nm * u), tuple(hi + margin_nm * u)


def difference_run(stack: FrameStack, cfg: ExperimentConfig, axis=None) -> DifferenceRun:
    res = localize_stack(stack, cfg.selection_criteria(), objective=cfg.analysis.objective)
    if not res.localizations:
        raise ValueError("no localizations")
    sched = cfg.mw_schedule()
    img = difference_image(res.localizations, sched, cfg.analysis.render_pixel_nm, cfg.analysis.weighting)
    p1, p2 = axis if axis is not None else lobe_axis(img)
    zc = zero_crossing(img, p1, p2)
    a = as_arrays(res.localizations)
    used = sched.signs(a["tag"]) != 0
    return DifferenceRun(img, zc, p1, p2, float(a["n"][used].sum()), int(used.sum()))


def observed_midpoint(run: SimulationRun, locs: Sequence[Localization]) -> tuple[float, float]:
    """True midpoint of the first two emitters plus the mean drift of the accepted frames.

    Drift moves every emitter together, so this is where the midpoint
    appears in the reconstructed image.
    """
    a, b = run.emitters[:2]
    frames = np.array([l.frame_index for l in locs], dtype=int)
    shift = run.offsets[frames].mean(axis=0) if frames.size else np.zeros(2)
    return 0.5 * (a.x_nm + b.x_nm) + float(shift[0]), 0.5 * (a.y_nm + b.y_nm) + float(shift[1])


def separation_experiment(cfg: ExperimentConfig, ds: Sequence[float] | None = None,
                          threads: int = 1, margin_nm: float = 40.0) -> list[SeparationPoint]:
    """Signed-profile depth and unit-SNR photon budget versus separation.

    For each separation ``sweep.repeats`` independent stacks are analysed
    on a scan line through both positions as they appear after drift. The photon budget
    for unit SNR is the photons used per stack times ``(std/mean)**2`` of
    the depth, and the prediction scales the first separation's budget as
    ``1/d**2``.
    """
    ds = [float(d) for d in (ds if ds is not None else (cfg.sweep.values or (10, 20, 40, 80)))]
    n_frames = cfg.sweep.n_frames or cfg.experiment.n_frames
    out = []
    for i, d in enumerate(ds):
        ems = pair_emitters(cfg, d)
        depths, photons, offsets = [], [], []
        for r in range(cfg.sweep.repeats):
            run = run_simulation(cfg, threads, n_frames, emitters=ems, seed=_sub_seed(cfg.experiment.seed, 3, i, r))
            res = localize_stack(run.stack, cfg.selection_criteria(), objective=cfg.analysis.objective)
            cx, cy = observed_midpoint(run, res.localizations)
            axis = ((cx - 0.5 * d - margin_nm, cy), (cx + 0.5 * d + margin_nm, cy))
            sched = cfg.mw_schedule()
            img = difference_image(res.localizations, sched, cfg.analysis.render_pixel_nm, cfg.analysis.weighting)
            _, v, xs, _ = img.line_profile(*axis)
            depths.append(signed_profile_depth(v))
            a = as_arrays(res.localizations)
            photons.append(float(a["n"][sched.signs(a["tag"]) != 0].sum()))
            try:
                offsets.append(zero_crossing(img, *axis).x_nm - cx)
            except Exception:
                offsets.append(float("nan"))
        dm, dsd = float(np.mean(depths)), float(np.std(depths, ddof=1)) if len(depths) > 1 else 0.0
        used = float(np.mean(photons))
        req = used * (dsd / dm) ** 2 if dm > 0 else float("inf")
        out.append(SeparationPoint(d, dm, dsd, used, req, crossing_offsets_nm=offsets))
    ref = (out[0].d_nm, out[0].required_photons)
    for p in out:
        p.predicted_photons = snr_photon_budget(p.d_nm, ref)
    return out


# hyperfine spectrum

@dataclass
class SpectrumRun:
    clusters: list[EmitterEstimate]
    spectra: list[OdmrSpectrum]
    fits: list[HyperfineFit | None]
    errors: list[str | None]
    sensitivity_t: list[float | None]
    total_time_s: float
    result: LocalizationResult


def spectrum_run(stack: FrameStack, cfg: ExperimentConfig) -> SpectrumRun:
    """Per-cluster spectra, hyperfine fits and field sensitivities."""
    res = localize_stack(stack, cfg.selection_criteria(), objective=cfg.analysis.objective)
    if not res.localizations:
        raise ValueError("no localizations")
    sched: MwSchedule = cfg.mw_schedule()
    sched.index_of(as_arrays(res.localizations)["tag"])
    clusters = sort_clusters(cluster_emitters(res.localizations, cfg.analysis.render_pixel_nm,
                                              drift_correlated=cfg.drift.kind != "none"))
    used = clusters
    if cfg.analysis.spectrum_bursts == "full_exposure":
        used = []
        for c in clusters:
            kept = full_exposure_bursts(stack, c.members, cfg.selection.roi_px)
            used.append(EmitterEstimate.from_members(kept, c.drift_correlated) if kept else c)
    spectra = assign_spectra(used, sched)
    total_time = len(stack) * stack.camera.exposure_s
    fits, errors, sens = [], [], []
    for s in spectra:
        try:
            f = fit_hyperfine(s)
            s.fitted = f
            fits.append(f)
            errors.append(None)
            sens.append(sensitivity_from_fit(f, stack.camera.exposure_s, total_time)[0])
        except HyperfineFitError as exc:
            fits.append(None)
            errors.append(str(exc))
            sens.append(None)
    return SpectrumRun(clusters, spectra, fits, errors, sens, total_time, res)


__all__ = [
    "AccuracyPoint", "AccuracyResult", "DifferenceRun", "Reconstruction", "SeparationPoint",
    "SimulationRun", "SpectrumRun", "TauOnPoint", "accuracy_experiment", "difference_run", "ground_truth_rows",
    "lobe_axis", "match_clusters", "observed_midpoint", "pair_emitters", "reconstruct", "run_simulation", "separation_experiment",
    "sort_clusters", "spectrum_run", "tau_on_experiment", "tau_on_summary",
]
