"""Poisson CCD frame-stack simulation of blinking emitters."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import rng as _rng
from .physics import EmitterModel, RateSet, TelegraphTrace, odmr_emission_rate, sample_traces
from .psf import integrated_profile, pixel_edges

log = logging.getLogger(__name__)

DRIFT_KINDS = ("none", "random_walk", "linear")


@dataclass(frozen=True)
class CameraConfig:
    width_px: int = 24
    height_px: int = 24
    pixel_size_nm: float = 100.0
    exposure_s: float = 2.0
    psf_sigma_nm: float = 130.0
    background_base: float = 1.0
    background_rate: float = 0.3

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1:
            raise ValueError("frame dimensions must be positive")
        for name in ("pixel_size_nm", "exposure_s", "psf_sigma_nm"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.background_base < 0 or self.background_rate < 0:
            raise ValueError("background parameters must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    @property
    def background_per_px(self) -> float:
        """Expected background photons per pixel in one exposure."""
        return self.background_base + self.background_rate * self.exposure_s

    @property
    def field_nm(self) -> tuple[float, float]:
        return (self.width_px * self.pixel_size_nm, self.height_px * self.pixel_size_nm)


@dataclass(frozen=True)
class DriftModel:
    kind: str = "random_walk"
    sigma_drift_nm: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DRIFT_KINDS:
            raise ValueError(f"drift kind must be one of {DRIFT_KINDS}, got {self.kind!r}")
        if self.sigma_drift_nm < 0:
            raise ValueError("sigma_drift_nm must be non-negative")


class Frame(NamedTuple):
    pixels: np.ndarray
    mw_tag_mhz: float | None
    t_start_s: float


class FrameStack:
    """Frames stored as one ``(n_frames, height, width)`` uint32 array.

    Microwave tags are float MHz with NaN meaning no drive.
    """

    def __init__(self, camera: CameraConfig, pixels: np.ndarray, mw_tags_mhz=None, t_start_s=None):
        pixels = np.asarray(pixels)
        if pixels.ndim != 3 or pixels.shape[1:] != camera.shape:
            raise ValueError(f"pixel array shape {pixels.shape} does not match camera {camera.shape}")
        if pixels.shape[0] < 1:
            raise ValueError("a frame stack needs at least one frame")
        if pixels.dtype != np.uint32:
            if np.any(pixels < 0) or not np.all(np.equal(np.mod(pixels, 1), 0)):
                raise ValueError("pixel counts must be non-negative integers")
            pixels = pixels.astype(np.uint32)
        n = pixels.shape[0]
        tags = np.full(n, np.nan) if mw_tags_mhz is None else np.array(
            [np.nan if t is None else float(t) for t in mw_tags_mhz], dtype=float)
        if tags.shape != (n,):
            raise ValueError("one microwave tag per frame required")
        t = camera.exposure_s * np.arange(n, dtype=float) if t_start_s is None else np.asarray(t_start_s, dtype=float)
        if t.shape != (n,) or (n > 1 and np.any(np.diff(t) <= 0)):
            raise ValueError("frame start times must be strictly increasing")
        self.camera = camera
        self.pixels = pixels
        self.mw_tags_mhz = tags
        self.t_start_s = t

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def __getitem__(self, i: int) -> Frame:
        tag = self.mw_tags_mhz[i]
        return Frame(self.pixels[i], None if np.isnan(tag) else float(tag), float(self.t_start_s[i]))

    def __iter__(self) -> Iterator[Frame]:
        return (self[i] for i in range(len(self)))

    @property
    def frames(self) -> list[Frame]:
        return list(self)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameStack):
            return NotImplemented
        return (
            self.camera == other.camera
            and np.array_equal(self.pixels, other.pixels)
            and np.array_equal(self.mw_tags_mhz, other.mw_tags_mhz, equal_nan=True)
            and np.array_equal(self.t_start_s, other.t_start_s)
        )

    def __repr__(self) -> str:
        return f"FrameStack({len(self)} frames, {self.camera.width_px}x{self.camera.height_px} px)"


def drift_trajectory(model: DriftModel, n_frames: int) -> np.ndarray:
    """Per-frame ``(dx, dy)`` sample offsets in nm, shape ``(n_frames, 2)``.

    A random walk starts at the origin and is rescaled so that the standard
    deviation of its offsets over the trajectory is ``sigma_drift_nm`` on
    each axis. The linear mode moves along a diagonal with the same
    per-axis spread.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    out = np.zeros((n_frames, 2))
    if model.kind == "none" or model.sigma_drift_nm == 0 or n_frames == 1:
        return out
    gen = _rng.substream(model.seed, _rng.DRIFT)
    if model.kind == "random_walk":
        steps = gen.standard_normal((n_frames - 1, 2))
        out[1:] = np.cumsum(steps, axis=0)
    else:
        signs = np.where(gen.random(2) < 0.5, -1.0, 1.0)
        out[:] = np.arange(n_frames, dtype=float)[:, None] * signs[None, :]
    spread = out.std(axis=0)
    return out * (model.sigma_drift_nm / np.where(spread > 0, spread, 1.0))


def frame_tags(mw_schedule: Sequence[float | None] | None, n_frames: int) -> np.ndarray:
    if not mw_schedule:
        return np.full(n_frames, np.nan)
    if n_frames % len(mw_schedule) != 0:
        raise ValueError(
            f"microwave schedule length {len(mw_schedule)} must divide n_frames={n_frames} "
            "so every tag gets the same number of frames")
    sched = np.array([np.nan if t is None else float(t) for t in mw_schedule], dtype=float)
    return np.resize(sched, n_frames)


def photon_budget(emitters, rate_sets, traces, camera: CameraConfig, tags: np.ndarray) -> np.ndarray:
    """Expected signal photons of each emitter in each frame, ``(n_frames, n_emitters)``."""
    n_frames = tags.size
    t0 = camera.exposure_s * np.arange(n_frames, dtype=float)
    t1 = t0 + camera.exposure_s
    out = np.empty((n_frames, len(emitters)))
    for k, (em, rates, trace) in enumerate(zip(emitters, rate_sets, traces)):
        rate = np.where(np.isnan(tags), rates.gamma_cps, odmr_emission_rate(em, rates.gamma_cps, tags))
        out[:, k] = rate * trace.on_time_between(t0, t1)
    return out


def _check_field(emitters, camera: CameraConfig):
    w, h = camera.field_nm
    margin = 3.0 * camera.psf_sigma_nm
    for i, em in enumerate(emitters):
        outside = max(-em.x_nm, em.x_nm - w, -em.y_nm, em.y_nm - h)
        if outside > margin:
            log.warning("emitter %d at (%.1f, %.1f) nm lies %.0f nm outside the field; PSF tails clipped",
                        i, em.x_nm, em.y_nm, outside)


def expected_images(camera: CameraConfig, emitters, photons: np.ndarray, offsets: np.ndarray,
                    frames: slice | None = None) -> np.ndarray:
    """Noise-free expected photon images (float64) including background."""
    frames = frames or slice(0, photons.shape[0])
    ph = photons[frames]
    off = offsets[frames]
    n = ph.shape[0]
    img = np.full((n, camera.height_px, camera.width_px), camera.background_per_px)
    if not emitters:
        return img
    ex = pixel_edges(camera.width_px, camera.pixel_size_nm)
    ey = pixel_edges(camera.height_px, camera.pixel_size_nm)
    sig = np.full(n, camera.psf_sigma_nm)
    for k, em in enumerate(emitters):
        px = integrated_profile(ex, em.x_nm + off[:, 0], sig)
        py = integrated_profile(ey, em.y_nm + off[:, 1], sig)
        img += ph[:, k, None, None] * py[:, :, None] * px[:, None, :]
    return img


def render_stack(
    camera: CameraConfig,
    emitters: Sequence[EmitterModel],
    rate_sets: Sequence[RateSet],
    drift: DriftModel,
    n_frames: int,
    mw_schedule: Sequence[float | None] | None = None,
    seed: int = 0,
    traces: Sequence[TelegraphTrace] | None = None,
    threads: int = 1,
    chunk: int = 2048,
) -> FrameStack:
    """Simulate a Poisson frame stack.

    Each frame's expected image is the time-weighted bright emission of
    every emitter (rate set by the frame's microwave tag), spread by the
    pixel-integrated PSF around its drifted position, plus uniform
    background. Frame ``k`` is then sampled from the substream
    ``(seed, k)``, so the output does not depend on ``threads``.
    """
    if len(emitters) != len(rate_sets):
        raise ValueError("need one rate set per emitter")
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    _check_field(emitters, camera)
    tags = frame_tags(mw_schedule, n_frames)
    if traces is None:
        traces = sample_traces(rate_sets, n_frames * camera.exposure_s, seed)
    photons = photon_budget(emitters, rate_sets, traces, camera, tags)
    offsets = drift_trajectory(drift, n_frames)
    pixels = np.empty((n_frames, camera.height_px, camera.width_px), dtype=np.uint32)

    def work(start: int):
        stop = min(start + chunk, n_frames)
        mu = expected_images(camera, emitters, photons, offsets, slice(start, stop))
        for j in range(stop - start):
            pixels[start + j] = _rng.substream(seed, _rng.FRAME, start + j).poisson(mu[j])

    starts = range(0, n_frames, chunk)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for s in starts:
            work(s)
    return FrameStack(camera, pixels, tags, None)


def simulate(camera, emitters, rate_sets, drift, n_frames, mw_schedule=None, seed=0, threads=1):
    """Render a stack and also return the ground truth behind it.

    Returns ``(stack, traces, photons, offsets)`` where ``photons`` is the
    expected per-frame signal of each emitter.
    """
    traces = sample_traces(rate_sets, n_frames * camera.exposure_s, seed)
    stack = render_stack(camera, emitters, rate_sets, drift, n_frames, mw_schedule, seed, traces, threads)
    tags = stack.mw_tags_mhz
    photons = photon_budget(emitters, rate_sets, traces, camera, tags)
    return stack, traces, photons, drift_trajectory(drift, n_frames)
