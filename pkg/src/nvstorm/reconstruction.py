"""Super-resolution rendering, emitter clustering and resolution estimates."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .camera import CameraConfig
from .localization import Localization, as_arrays, localization_uncertainty
from .physics import IlluminationConfig, scale_rates
from .psf import integrated_profile, pixel_edges

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
LOW_CONFIDENCE_M = 10


@dataclass
class RenderedImage:
    """Raster of a localization density; ``grid[row, col]`` with rows along y.

    Pixel ``(j, i)`` covers ``[origin_x + i*p, origin_x + (i+1)*p)`` in x and
    the analogous range in y, ``p = pixel_nm``.
    """

    grid: np.ndarray
    origin_x_nm: float
    origin_y_nm: float
    pixel_nm: float
    normalization: str = "sum_of_weights"

    @property
    def extent(self) -> tuple[float, float, float, float]:
        h, w = self.grid.shape
        return (self.origin_x_nm, self.origin_x_nm + w * self.pixel_nm,
                self.origin_y_nm, self.origin_y_nm + h * self.pixel_nm)

    def integral(self) -> float:
        return float(self.grid.sum())

    def value_at(self, x_nm, y_nm) -> np.ndarray:
        """Bilinear interpolation at pixel centres; zero outside the raster."""
        col = (np.asarray(x_nm, dtype=float) - self.origin_x_nm) / self.pixel_nm - 0.5
        row = (np.asarray(y_nm, dtype=float) - self.origin_y_nm) / self.pixel_nm - 0.5
        return ndimage.map_coordinates(self.grid, [np.atleast_1d(row), np.atleast_1d(col)], order=1,
                                       mode="constant", cval=0.0)

    def line_profile(self, p1, p2, step_nm: float | None = None):
        """Samples along the segment p1 -> p2; returns ``(distance_nm, values, xs, ys)``."""
        p1 = np.asarray(p1, dtype=float)
        p2 = np.asarray(p2, dtype=float)
        length = float(np.hypot(*(p2 - p1)))
        step = step_nm or 0.25 * self.pixel_nm
        n = max(int(math.ceil(length / step)) + 1, 2)
        t = np.linspace(0.0, 1.0, n)
        xs = p1[0] + t * (p2[0] - p1[0])
        ys = p1[1] + t * (p2[1] - p1[1])
        return t * length, self.value_at(xs, ys), xs, ys


def default_extent(x, y, sigma, margin_sigma: float = 5.0):
    pad = margin_sigma * float(np.max(sigma))
    return (float(np.min(x)) - pad, float(np.max(x)) + pad, float(np.min(y)) - pad, float(np.max(y)) + pad)


def render_points(x, y, sigma, weights, render_pixel_nm: float = 2.0, extent=None) -> RenderedImage:
    """Sum of isotropic unit-area Gaussians integrated over each render pixel."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    weights = np.broadcast_to(np.asarray(weights, dtype=float), x.shape)
    if x.size == 0:
        raise ValueError("nothing to render")
    if extent is None:
        extent = default_extent(x, y, sigma)
    x0, x1, y0, y1 = extent
    p = render_pixel_nm
    nx = max(int(math.ceil((x1 - x0) / p)), 1)
    ny = max(int(math.ceil((y1 - y0) / p)), 1)
    grid = np.zeros((ny, nx))
    ex = pixel_edges(nx, p, x0)
    ey = pixel_edges(ny, p, y0)
    # chunks keep the (n_locs x n_px) profile matrices small
    for s in range(0, x.size, 4096):
        sl = slice(s, s + 4096)
        px = integrated_profile(ex, x[sl], sigma[sl])
        py = integrated_profile(ey, y[sl], sigma[sl])
        grid += (py * weights[sl, None]).T @ px
    return RenderedImage(grid, x0, y0, p)


def render_distribution(locs: Sequence[Localization], render_pixel_nm: float = 2.0, extent=None,
                        weights=None) -> RenderedImage:
    """Location density: one Gaussian per burst with its own uncertainty as width.

    With the default unit weights the image integrates to the number of
    localizations (minus whatever falls outside ``extent``).
    """
    if not locs:
        raise ValueError("no localizations to render")
    arr = as_arrays(locs)
    w = 1.0 if weights is None else weights
    return render_points(arr["x"], arr["y"], arr["sigma"], w, render_pixel_nm, extent)


def total_sigma(sigma_loc_nm: float, sigma_drift_nm: float) -> float:
    """Per-burst uncertainty broadened by drift, added in quadrature."""
    if sigma_loc_nm < 0 or sigma_drift_nm < 0:
        raise ValueError("standard deviations must be non-negative")
    return math.hypot(sigma_loc_nm, sigma_drift_nm)


@dataclass
class EmitterEstimate:
    members: list[Localization]
    mean_x_nm: float
    mean_y_nm: float
    sigma_x_nm: float
    sigma_y_nm: float
    low_confidence: bool = False
    drift_correlated: bool = False

    @property
    def M(self) -> int:
        return len(self.members)

    @property
    def sigma_cluster_nm(self) -> float:
        """Per-axis spread, pooled over x and y."""
        return math.sqrt(0.5 * (self.sigma_x_nm**2 + self.sigma_y_nm**2))

    @property
    def accuracy_nm(self) -> float:
        return self.sigma_cluster_nm / math.sqrt(self.M)

    @property
    def fwhm_nm(self) -> float:
        return FWHM_PER_SIGMA * self.sigma_cluster_nm

    @classmethod
    def from_members(cls, members: Sequence[Localization], drift_correlated: bool = False) -> "EmitterEstimate":
        if not members:
            raise ValueError("a cluster needs at least one localization")
        x = np.array([l.x_nm for l in members])
        y = np.array([l.y_nm for l in members])
        ddof = 1 if len(members) > 1 else 0
        return cls(list(members), float(x.mean()), float(y.mean()), float(x.std(ddof=ddof)),
                   float(y.std(ddof=ddof)), len(members) < LOW_CONFIDENCE_M, drift_correlated)


def _seed_peaks(image: RenderedImage, min_sep_nm: float, rel_height: float):
    g = image.grid
    size = max(int(round(min_sep_nm / image.pixel_nm)) | 1, 3)
    peaks = (g == ndimage.maximum_filter(g, size=size, mode="constant")) & (g > rel_height * g.max())
    rows, cols = np.nonzero(peaks)
    order = np.argsort(-g[rows, cols], kind="stable")
    xs = image.origin_x_nm + (cols[order] + 0.5) * image.pixel_nm
    ys = image.origin_y_nm + (rows[order] + 0.5) * image.pixel_nm
    seeds: list[tuple[float, float]] = []
    for px, py in zip(xs, ys):
        if all(math.hypot(px - sx, py - sy) >= min_sep_nm for sx, sy in seeds):
            seeds.append((float(px), float(py)))
    return seeds


def cluster_emitters(locs: Sequence[Localization], render_pixel_nm: float = 2.0,
                     rel_height: float = 0.1, drift_correlated: bool = False) -> list[EmitterEstimate]:
    """Group bursts into emitters.

    Seeds are local maxima of the rendered density at least three median
    uncertainties apart and above ``rel_height`` of the global maximum.
    Every burst joins the nearest seed within five median uncertainties,
    otherwise it is dropped as an outlier. A second pass re-centres the
    seeds on their members' means and widens the capture radius to five
    times the observed cluster spread when that is larger.
    """
    if not locs:
        raise ValueError("no localizations to cluster")
    arr = as_arrays(locs)
    med = float(np.median(arr["sigma"]))
    image = render_distribution(locs, render_pixel_nm)
    seeds = np.array(_seed_peaks(image, 3.0 * med, rel_height))
    pts = np.column_stack([arr["x"], arr["y"]])
    radius = np.full(len(seeds), 5.0 * med)
    for _pass in range(2):
        dist = np.hypot(pts[:, None, 0] - seeds[None, :, 0], pts[:, None, 1] - seeds[None, :, 1])
        nearest = dist.argmin(axis=1)
        inside = dist[np.arange(len(pts)), nearest] <= radius[nearest]
        new_seeds, new_radius = [], []
        for k in range(len(seeds)):
            m = inside & (nearest == k)
            if not m.any():
                new_seeds.append(seeds[k])
                new_radius.append(radius[k])
                continue
            sub = pts[m]
            spread = math.sqrt(0.5 * (sub[:, 0].var() + sub[:, 1].var()))
            new_seeds.append(sub.mean(axis=0))
            new_radius.append(max(5.0 * med, 5.0 * spread))
        seeds = np.array(new_seeds)
        radius = np.array(new_radius)
    out = []
    for k in range(len(seeds)):
        m = np.flatnonzero(inside & (nearest == k))
        if m.size:
            out.append(EmitterEstimate.from_members([locs[i] for i in m], drift_correlated))
    return out


def _half_max_crossings(d, v, peak_index):
    half = 0.5 * v[peak_index]

    def walk(step):
        i = peak_index
        while 0 <= i + step < len(v) and v[i + step] > half:
            i += step
        j = i + step
        if not 0 <= j < len(v):
            return None
        # linear interpolation between samples i (above) and j (below)
        return d[i] + (half - v[i]) * (d[j] - d[i]) / (v[j] - v[i])

    return walk(-1), walk(+1)


def peak_fwhm(image: RenderedImage, center, direction, half_length_nm: float) -> float:
    """FWHM of the peak nearest ``center`` on a line scan along ``direction``."""
    u = np.asarray(direction, dtype=float)
    u = u / np.hypot(*u)
    c = np.asarray(center, dtype=float)
    d, v, _, _ = image.line_profile(c - half_length_nm * u, c + half_length_nm * u)
    mid = len(d) // 2
    window = slice(max(mid - len(d) // 8, 0), mid + len(d) // 8 + 1)
    k = window.start + int(np.argmax(v[window]))
    lo, hi = _half_max_crossings(d, v, k)
    if lo is None or hi is None:
        return float("nan")
    return float(hi - lo)


def cluster_fwhm(image: RenderedImage, clusters: Sequence[EmitterEstimate], half_length_nm: float = 60.0) -> list[float]:
    """Line-scan FWHM of each cluster, scanning along the line joining cluster means.

    With a single cluster the scan runs along x.
    """
    out = []
    for k, c in enumerate(clusters):
        if len(clusters) > 1:
            other = clusters[1] if k == 0 else clusters[0]
            direction = (other.mean_x_nm - c.mean_x_nm, other.mean_y_nm - c.mean_y_nm)
        else:
            direction = (1.0, 0.0)
        out.append(peak_fwhm(image, (c.mean_x_nm, c.mean_y_nm), direction, half_length_nm))
    return out


@dataclass
class ExposurePoint:
    tau_on_s: float
    intensity_kw_cm2: float
    photons: float
    background: float
    sigma_loc_nm: float
    sigma_total_nm: float

    @property
    def fwhm_nm(self) -> float:
        return FWHM_PER_SIGMA * self.sigma_total_nm


def exposure_point(illumination: IlluminationConfig, camera: CameraConfig, sigma_drift_nm: float) -> ExposurePoint:
    """Predicted resolution when the exposure equals the mean bright time."""
    rates = scale_rates(illumination)
    tau = rates.tau_on_s
    n = rates.photons_per_burst
    b = camera.background_base + camera.background_rate * tau
    s_loc = localization_uncertainty(n, camera.psf_sigma_nm, camera.pixel_size_nm, b)
    return ExposurePoint(tau, illumination.intensity_kw_cm2, n, b, s_loc, total_sigma(s_loc, sigma_drift_nm))


def optimal_exposure_curve(illumination, camera: CameraConfig, sigma_drift_nm: float) -> list[ExposurePoint]:
    """Predicted FWHM over an intensity sweep.

    ``illumination`` is a sequence of :class:`IlluminationConfig`; photons
    per burst follow ``n ~ sqrt(tau_on)`` through the intensity scaling and
    the per-pixel background grows linearly with the exposure.
    """
    pts = [exposure_point(cfg, camera, sigma_drift_nm) for cfg in illumination]
    return sorted(pts, key=lambda p: p.tau_on_s)


def tau_on_sweep(base: IlluminationConfig, tau_on_values: Sequence[float]) -> list[IlluminationConfig]:
    return [base.with_intensity(base.intensity_for_tau_on(t)) for t in tau_on_values]


def curve_minimum(points: Sequence[ExposurePoint]) -> ExposurePoint:
    return min(points, key=lambda p: p.fwhm_nm)


def is_unimodal(values: Sequence[float]) -> bool:
    """Strictly decreasing then strictly increasing, with the minimum inside."""
    v = np.asarray(values, dtype=float)
    k = int(np.argmin(v))
    if k == 0 or k == len(v) - 1:
        return False
    return bool(np.all(np.diff(v[: k + 1]) < 0) and np.all(np.diff(v[k:]) > 0))


def write_pgm(image: np.ndarray, path: str | os.PathLike) -> tuple[float, float]:
    """16-bit binary PGM after min-max scaling; returns ``(offset, scale)``.

    A stored value ``q`` maps back to ``offset + q * scale``.
    """
    g = np.asarray(image, dtype=float)
    lo, hi = float(g.min()), float(g.max())
    scale = (hi - lo) / 65535.0 if hi > lo else 1.0
    q = np.round((g - lo) / scale).clip(0, 65535).astype(">u2")
    h, w = g.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(q.tobytes())
    return lo, scale


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(parts[4], dtype=dtype, count=w * h).reshape(h, w)


def write_sidecar(path: str | os.PathLike, image: RenderedImage, offset: float, scale: float,
                  extra: dict | None = None) -> None:
    fields = {
        "origin_x_nm": image.origin_x_nm, "origin_y_nm": image.origin_y_nm,
        "pixel_nm": image.pixel_nm, "width": image.grid.shape[1], "height": image.grid.shape[0],
        "value_offset": offset, "value_scale": scale, "normalization": image.normalization,
    }
    fields.update(extra or {})
    with open(path, "w") as fh:
        for k, v in fields.items():
            fh.write(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n")


def export_image(image: RenderedImage, path: str | os.PathLike, extra: dict | None = None) -> None:
    offset, scale = write_pgm(image.grid, path)
    write_sidecar(f"{os.fspath(path)}.txt", image, offset, scale, extra)


CLUSTER_COLUMNS = ("cluster_id", "mean_x_nm", "mean_y_nm", "sigma_nm", "M", "accuracy_nm")


def write_cluster_csv(clusters: Sequence[EmitterEstimate], path: str | os.PathLike,
                      comments: Sequence[str] = (), fwhm: Sequence[float] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        cols = list(CLUSTER_COLUMNS) + ["low_confidence", "drift_correlated"]
        if fwhm is not None:
            cols.append("fwhm_nm")
        w.writerow(cols)
        for k, c in enumerate(clusters):
            row = [k, repr(c.mean_x_nm), repr(c.mean_y_nm), repr(c.sigma_cluster_nm), c.M,
                   repr(c.accuracy_nm), int(c.low_confidence), int(c.drift_correlated)]
            if fwhm is not None:
                row.append(repr(float(fwhm[k])))
            w.writerow(row)
