"""Pixel-integrated 2D Gaussian point spread function.

All coordinates are in nanometres. Pixel ``(row j, column i)`` covers
``x in [i*a, (i+1)*a)`` and ``y in [j*a, (j+1)*a)`` for pixel size ``a``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def pixel_edges(n_px: int, pixel_nm: float, origin_nm: float = 0.0) -> np.ndarray:
    return origin_nm + pixel_nm * np.arange(n_px + 1, dtype=float)


def integrated_profile(edges: np.ndarray, center: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Fraction of a unit 1D Gaussian falling in each bin.

    ``center`` and ``sigma`` broadcast over a leading batch axis; the
    result has shape ``(batch, len(edges) - 1)``.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))[:, None]
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))[:, None]
    cdf = 0.5 * erf((edges[None, :] - center) / (_SQRT2 * sigma))
    return np.diff(cdf, axis=1)


def profile_and_derivatives(edges, center, sigma):
    """Integrated profile plus its derivatives w.r.t. center and sigma.

    Returns three arrays of shape ``(batch, n_bins)``.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))[:, None]
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))[:, None]
    u = edges[None, :] - center
    cdf = 0.5 * erf(u / (_SQRT2 * sigma))
    dens = _INV_SQRT_2PI / sigma * np.exp(-0.5 * (u / sigma) ** 2)
    prof = np.diff(cdf, axis=1)
    d_center = -np.diff(dens, axis=1)
    d_sigma = -np.diff(u * dens, axis=1) / sigma
    return prof, d_center, d_sigma


def gaussian_image(
    shape: tuple[int, int],
    pixel_nm: float,
    x_nm,
    y_nm,
    sigma_nm,
    photons=1.0,
    sigma_y_nm=None,
) -> np.ndarray:
    """Expected photon image of one or more point emitters.

    Emitters are summed; ``photons`` is the total expected count of each
    emitter before clipping by the finite field.
    """
    height, width = shape
    x = np.atleast_1d(np.asarray(x_nm, dtype=float))
    y = np.atleast_1d(np.asarray(y_nm, dtype=float))
    sx = np.broadcast_to(np.asarray(sigma_nm, dtype=float), x.shape)
    sy = sx if sigma_y_nm is None else np.broadcast_to(np.asarray(sigma_y_nm, dtype=float), x.shape)
    w = np.broadcast_to(np.asarray(photons, dtype=float), x.shape)
    px = integrated_profile(pixel_edges(width, pixel_nm), x, sx)
    py = integrated_profile(pixel_edges(height, pixel_nm), y, sy)
    return np.einsum("k,ky,kx->yx", w, py, px)
