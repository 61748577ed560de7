"""Burst selection, PSF fitting and per-burst localization uncertainty.

Frames go through two gates. The first keeps frames whose
background-subtracted photon total falls inside a window around the
typical single-burst count, which drops empty frames and most frames with
several bright emitters. The survivors are fitted with an isotropic
Gaussian and refitted with independent x/y widths; strongly elliptical or
poorly fitting spots are rejected as well.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .camera import CameraConfig, FrameStack
from .fitting import fit_batch


class Reject(str, Enum):
    EMPTY = "empty"
    MULTI_EMITTER = "multi_emitter"
    ASYMMETRIC = "asymmetric"
    BAD_FIT = "bad_fit"


class FitError(RuntimeError):
    """A frame could not be described by a single Gaussian spot."""


@dataclass(frozen=True)
class SelectionCriteria:
    """Acceptance rules for burst frames.

    ``min_photons``/``max_photons`` left as ``None`` are set to half and
    one and a half times the typical burst size found in the stack.
    """

    min_photons: int | None = None
    max_photons: int | None = None
    max_asymmetry: float = 1.3
    max_residual: float = 1.5
    roi_px: int = 11
    sigma_bounds: tuple[float, float] = (0.3, 3.0)
    min_snr: float = 5.0

    def __post_init__(self):
        if self.min_photons is not None and self.max_photons is not None and not self.min_photons < self.max_photons:
            raise ValueError("min_photons must be below max_photons")
        if not self.max_asymmetry > 1.0:
            raise ValueError("max_asymmetry must exceed 1")
        if self.roi_px < 3:
            raise ValueError("roi_px must be at least 3")


@dataclass(frozen=True)
class Localization:
    frame_index: int
    x_nm: float
    y_nm: float
    sigma_psf_nm: float
    n_photons: float
    sigma_loc_nm: float
    mw_tag_mhz: float | None = None
    background: float = 0.0


@dataclass(frozen=True)
class PsfFit:
    x_nm: float
    y_nm: float
    sigma_psf_nm: float
    n_photons: float
    background: float
    residual: float


def localization_uncertainty(n, sigma_psf_nm, pixel_nm, background_per_px):
    """Per-axis standard deviation of a fitted spot centre.

    Shot noise, pixelation and background terms:
    ``sqrt(s**2/n + (a**2/12)/n + 8*pi*s**4*b**2/(a**2*n**2))``.
    """
    n = np.asarray(n, dtype=float)
    s = np.asarray(sigma_psf_nm, dtype=float)
    a = np.asarray(pixel_nm, dtype=float)
    b = np.asarray(background_per_px, dtype=float)
    if np.any(n <= 0) or np.any(s <= 0) or np.any(a <= 0) or np.any(b < 0):
        raise ValueError("photon count, PSF width and pixel size must be positive, background non-negative")
    var = s * s / n + (a * a / 12.0) / n + 8.0 * math.pi * s**4 * b * b / (a * a * n * n)
    out = np.sqrt(var)
    return float(out) if out.ndim == 0 else out


def _roi_size(camera: CameraConfig, roi_px: int) -> int:
    return min(roi_px, camera.width_px, camera.height_px)


def frame_totals(stack: FrameStack, roi_px: int = 11, chunk: int = 4096):
    """Background-subtracted photons in a window around each frame's brightest spot.

    Returns ``(totals, row0, col0, background)``; ``row0/col0`` are the
    window's top-left pixel and ``background`` the per-pixel level taken
    from the pixels outside the window (or its rim, for small frames).
    """
    cam = stack.camera
    r = _roi_size(cam, roi_px)
    n = len(stack)
    totals = np.empty(n)
    row0 = np.empty(n, dtype=int)
    col0 = np.empty(n, dtype=int)
    bg = np.empty(n)
    area = r * r
    outside = cam.width_px * cam.height_px - area
    for s in range(0, n, chunk):
        px = stack.pixels[s:s + chunk].astype(np.float64)
        sm = ndimage.uniform_filter(px, size=(1, 3, 3), mode="nearest")
        flat = sm.reshape(len(px), -1).argmax(axis=1)
        pr, pc = np.divmod(flat, cam.width_px)
        r0 = np.clip(pr - r // 2, 0, cam.height_px - r)
        c0 = np.clip(pc - r // 2, 0, cam.width_px - r)
        rows = r0[:, None] + np.arange(r)[None, :]
        cols = c0[:, None] + np.arange(r)[None, :]
        idx = np.arange(len(px))[:, None, None]
        roi = px[idx, rows[:, :, None], cols[:, None, :]]
        roi_sum = roi.sum(axis=(1, 2))
        if outside >= area // 2:
            level = (px.sum(axis=(1, 2)) - roi_sum) / outside
        else:
            rim = np.concatenate([roi[:, 0, :], roi[:, -1, :], roi[:, 1:-1, 0], roi[:, 1:-1, -1]], axis=1)
            level = rim.mean(axis=1)
        totals[s:s + chunk] = roi_sum - area * level
        row0[s:s + chunk] = r0
        col0[s:s + chunk] = c0
        bg[s:s + chunk] = level
    return totals, row0, col0, bg


def typical_burst_photons(totals: np.ndarray, noise: float | None = None) -> float:
    """Mode of the photon-total histogram above the empty-frame cluster.

    Empty frames scatter around zero with width ``noise``; everything beyond
    six such widths is treated as signal. Without ``noise`` the width is
    taken from the median absolute deviation, which needs most frames to
    be empty.
    """
    totals = np.asarray(totals, dtype=float)
    if noise is None:
        med = np.median(totals)
        noise = 1.4826 * np.median(np.abs(totals - med))
    else:
        med = 0.0
    lit = totals[totals > med + 6.0 * max(noise, 1.0)]
    if lit.size < 5:
        return float("nan")
    hi = np.quantile(lit, 0.98)
    lo = lit.min()
    n_bins = int(np.clip(np.sqrt(lit.size), 10, 60))
    counts, edges = np.histogram(lit, bins=n_bins, range=(lo, hi))
    # upper half of the lit range: partial bursts pile up at low totals
    k = int(np.argmax(counts * (edges[:-1] >= lo + 0.25 * (hi - lo))))
    mode = 0.5 * (edges[k] + edges[k + 1])
    near = lit[np.abs(lit - mode) < 0.15 * mode]
    return float(near.mean()) if near.size else float(mode)


@dataclass
class Selection:
    candidates: np.ndarray
    rejected: dict[int, Reject]
    window: tuple[float, float]
    totals: np.ndarray
    row0: np.ndarray
    col0: np.ndarray
    background: np.ndarray


def select_frames(stack: FrameStack, criteria: SelectionCriteria | None = None) -> Selection:
    """Photon-window gate (stage one); fit-based checks happen in :func:`localize_stack`."""
    criteria = criteria or SelectionCriteria()
    if len(stack) == 0:
        raise ValueError("empty stack")
    totals, row0, col0, bg = frame_totals(stack, criteria.roi_px)
    lo, hi = criteria.min_photons, criteria.max_photons
    if lo is None or hi is None:
        r = _roi_size(stack.camera, criteria.roi_px)
        nbar = typical_burst_photons(totals, math.sqrt(r * r * max(float(np.median(bg)), 0.0)))
        if not np.isfinite(nbar):
            # nothing above the noise floor; any window rejects everything
            nbar = float("inf")
        lo = 0.5 * nbar if lo is None else lo
        hi = 1.5 * nbar if hi is None else hi
    rejected: dict[int, Reject] = {}
    for i in np.flatnonzero(totals < lo):
        rejected[int(i)] = Reject.EMPTY
    for i in np.flatnonzero(totals > hi):
        rejected[int(i)] = Reject.MULTI_EMITTER
    keep = np.flatnonzero((totals >= lo) & (totals <= hi))
    return Selection(keep, rejected, (float(lo), float(hi)), totals, row0, col0, bg)


def _extract(pixels: np.ndarray, row0, col0, r: int) -> np.ndarray:
    rows = row0[:, None] + np.arange(r)[None, :]
    cols = col0[:, None] + np.arange(r)[None, :]
    idx = np.arange(len(pixels))[:, None, None]
    return pixels[idx, rows[:, :, None], cols[:, None, :]].astype(np.float64)


def _snr(n, sigma, background, pixel_nm):
    footprint = 4.0 * math.pi * sigma**2 / pixel_nm**2
    return n / np.sqrt(n + footprint * np.maximum(background, 0.0))


def _fit_rois(rois, row0, col0, camera: CameraConfig, criteria: SelectionCriteria, objective: str, init=None):
    a = camera.pixel_size_nm
    ox = col0 * a
    oy = row0 * a
    iso = fit_batch(rois, ox, oy, a, camera.psf_sigma_nm, objective=objective, init=init)
    lo_s, hi_s = criteria.sigma_bounds
    sig = iso.sigma
    bad = (
        ~iso.converged
        | (sig < lo_s * camera.psf_sigma_nm) | (sig > hi_s * camera.psf_sigma_nm)
        | (iso.residual > criteria.max_residual)
        | (_snr(iso.photons, sig, iso.background, a) < criteria.min_snr)
    )
    start = np.column_stack([iso.x, iso.y, sig, iso.photons, np.maximum(iso.background, 1e-3)])
    ell = fit_batch(rois, ox, oy, a, camera.psf_sigma_nm, objective=objective, elliptical=True, init=start)
    sx, sy = ell.params[:, 2], ell.params[:, 3]
    ratio = np.maximum(sx, sy) / np.minimum(sx, sy)
    asym = (~bad) & ell.converged & (ratio > criteria.max_asymmetry)
    return iso, bad, asym


def fit_psf(frame: np.ndarray, camera: CameraConfig, init: tuple[float, float] | None = None,
            criteria: SelectionCriteria | None = None, objective: str = "mle") -> PsfFit:
    """Fit one frame with a pixel-integrated Gaussian plus constant background.

    The fit window is centred on ``init`` (x, y in nm) when given, else on
    the brightest smoothed pixel. Raises :class:`FitError` when the fit does
    not converge, the width is implausible or the spot is not significant.
    """
    criteria = criteria or SelectionCriteria()
    frame = np.asarray(frame)
    r = _roi_size(camera, criteria.roi_px)
    if init is None:
        sm = ndimage.uniform_filter(frame.astype(float), size=3, mode="nearest")
        pr, pc = np.unravel_index(int(np.argmax(sm)), sm.shape)
    else:
        pc, pr = int(init[0] // camera.pixel_size_nm), int(init[1] // camera.pixel_size_nm)
    r0 = np.array([int(np.clip(pr - r // 2, 0, camera.height_px - r))])
    c0 = np.array([int(np.clip(pc - r // 2, 0, camera.width_px - r))])
    rois = _extract(frame[None], r0, c0, r)
    iso, bad, asym = _fit_rois(rois, r0, c0, camera, criteria, objective)
    if bad[0]:
        raise FitError(
            f"no acceptable single-spot fit (converged={bool(iso.converged[0])}, "
            f"sigma={iso.sigma[0]:.1f} nm, photons={iso.photons[0]:.1f}, residual={iso.residual[0]:.2f})")
    return PsfFit(float(iso.x[0]), float(iso.y[0]), float(iso.sigma[0]), float(iso.photons[0]),
                  float(iso.background[0]), float(iso.residual[0]))


@dataclass
class LocalizationResult:
    localizations: list[Localization]
    rejected: dict[int, Reject] = field(default_factory=dict)
    window: tuple[float, float] = (float("nan"), float("nan"))
    n_frames: int = 0

    def __len__(self):
        return len(self.localizations)

    def __iter__(self):
        return iter(self.localizations)

    def summary(self) -> dict[str, int]:
        out = {"frames": self.n_frames, "accepted": len(self.localizations)}
        for reason in Reject:
            out[reason.value] = sum(1 for v in self.rejected.values() if v is reason)
        return out


def localize_stack(stack: FrameStack, criteria: SelectionCriteria | None = None,
                   camera: CameraConfig | None = None, objective: str = "mle",
                   chunk: int = 8192) -> LocalizationResult:
    """Select, fit and score every frame; results ordered by frame index."""
    criteria = criteria or SelectionCriteria()
    camera = camera or stack.camera
    sel = select_frames(stack, criteria)
    rejected = dict(sel.rejected)
    r = _roi_size(camera, criteria.roi_px)
    locs: list[Localization] = []
    a = camera.pixel_size_nm
    for s in range(0, sel.candidates.size, chunk):
        idx = sel.candidates[s:s + chunk]
        rois = _extract(stack.pixels[idx], sel.row0[idx], sel.col0[idx], r)
        iso, bad, asym = _fit_rois(rois, sel.row0[idx], sel.col0[idx], camera, criteria, objective)
        ok = ~(bad | asym)
        bg = np.maximum(iso.background, 0.0)
        sig_loc = np.full(idx.size, np.nan)
        if ok.any():
            sig_loc[ok] = localization_uncertainty(iso.photons[ok], iso.sigma[ok], a, bg[ok])
        for j, frame in enumerate(idx.tolist()):
            if bad[j]:
                rejected[frame] = Reject.BAD_FIT
            elif asym[j]:
                rejected[frame] = Reject.ASYMMETRIC
            else:
                tag = stack.mw_tags_mhz[frame]
                locs.append(Localization(
                    frame_index=frame, x_nm=float(iso.x[j]), y_nm=float(iso.y[j]),
                    sigma_psf_nm=float(iso.sigma[j]), n_photons=float(iso.photons[j]),
                    sigma_loc_nm=float(sig_loc[j]), mw_tag_mhz=None if np.isnan(tag) else float(tag),
                    background=float(bg[j]),
                ))
    return LocalizationResult(locs, dict(sorted(rejected.items())), sel.window, len(stack))


def as_arrays(locs: Sequence[Localization]) -> dict[str, np.ndarray]:
    return {
        "frame": np.array([l.frame_index for l in locs], dtype=int),
        "x": np.array([l.x_nm for l in locs], dtype=float),
        "y": np.array([l.y_nm for l in locs], dtype=float),
        "sigma_psf": np.array([l.sigma_psf_nm for l in locs], dtype=float),
        "n": np.array([l.n_photons for l in locs], dtype=float),
        "sigma": np.array([l.sigma_loc_nm for l in locs], dtype=float),
        "tag": np.array([np.nan if l.mw_tag_mhz is None else l.mw_tag_mhz for l in locs], dtype=float),
        "background": np.array([l.background for l in locs], dtype=float),
    }


CSV_COLUMNS = ("frame", "x_nm", "y_nm", "sigma_psf_nm", "n_photons", "sigma_loc_nm", "mw_tag_mhz")


def write_localizations_csv(locs: Iterable[Localization], path: str | os.PathLike,
                            comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for l in locs:
            w.writerow([l.frame_index, repr(l.x_nm), repr(l.y_nm), repr(l.sigma_psf_nm),
                        repr(l.n_photons), repr(l.sigma_loc_nm),
                        "" if l.mw_tag_mhz is None else repr(l.mw_tag_mhz)])


def read_localizations_csv(path: str | os.PathLike) -> list[Localization]:
    """Read a localization table; background is not stored and comes back as 0."""
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        return [
            Localization(int(r["frame"]), float(r["x_nm"]), float(r["y_nm"]), float(r["sigma_psf_nm"]),
                         float(r["n_photons"]), float(r["sigma_loc_nm"]),
                         float(r["mw_tag_mhz"]) if r["mw_tag_mhz"] else None)
            for r in rows
        ]
