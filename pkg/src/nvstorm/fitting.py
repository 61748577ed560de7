"""Batched Levenberg-Marquardt fitting of pixel-integrated Gaussian spots.

Every routine here works on a stack of equally sized regions of interest
at once, so thousands of bursts can be fitted with a handful of numpy
calls per iteration. Two objectives are supported:

``"lsq"``
    unweighted least squares, ``sum (d - mu)**2``.
``"mle"``
    Poisson maximum likelihood, minimised by damped Fisher scoring
    (iteratively reweighted least squares with weights ``1/mu``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .psf import pixel_edges, profile_and_derivatives

OBJECTIVES = ("lsq", "mle")

_MIN_MU = 1e-9


@dataclass
class BatchFit:
    """Result arrays of a batched fit, one row per region of interest.

    ``params`` columns are ``x, y, sigma_x, sigma_y, photons, background``
    (``sigma_x == sigma_y`` for isotropic fits).
    """

    params: np.ndarray
    converged: np.ndarray
    iterations: np.ndarray
    residual: np.ndarray

    @property
    def x(self):
        return self.params[:, 0]

    @property
    def y(self):
        return self.params[:, 1]

    @property
    def sigma(self):
        return np.sqrt(self.params[:, 2] * self.params[:, 3])

    @property
    def photons(self):
        return self.params[:, 4]

    @property
    def background(self):
        return self.params[:, 5]


def _expand(p: np.ndarray, elliptical: bool) -> np.ndarray:
    # internal vector -> (x, y, sx, sy, N, c)
    if elliptical:
        return p
    return np.column_stack([p[:, 0], p[:, 1], p[:, 2], p[:, 2], p[:, 3], p[:, 4]])


def _model_and_jacobian(p, ex, ey, elliptical, want_jac=True):
    full = _expand(p, elliptical)
    x, y, sx, sy, n, c = full.T
    px, dpx_c, dpx_s = profile_and_derivatives(ex, x, sx)
    py, dpy_c, dpy_s = profile_and_derivatives(ey, y, sy)
    shape_img = py[:, :, None] * px[:, None, :]
    mu = n[:, None, None] * shape_img + c[:, None, None]
    if not want_jac:
        return mu, None
    nn = n[:, None, None]
    cols = [
        nn * py[:, :, None] * dpx_c[:, None, :],
        nn * dpy_c[:, :, None] * px[:, None, :],
    ]
    if elliptical:
        cols.append(nn * py[:, :, None] * dpx_s[:, None, :])
        cols.append(nn * dpy_s[:, :, None] * px[:, None, :])
    else:
        cols.append(nn * (dpy_s[:, :, None] * px[:, None, :] + py[:, :, None] * dpx_s[:, None, :]))
    cols.append(shape_img)
    cols.append(np.ones_like(shape_img))
    jac = np.stack(cols, axis=-1).reshape(len(p), -1, len(cols))
    return mu, jac


def _cost(data, mu, objective):
    if objective == "lsq":
        return np.sum((data - mu) ** 2, axis=(1, 2))
    mu = np.maximum(mu, _MIN_MU)
    return np.sum(mu - data * np.log(mu), axis=(1, 2))


def _valid(p, elliptical):
    full = _expand(p, elliptical)
    return (full[:, 2] > 0) & (full[:, 3] > 0) & (full[:, 4] > 0) & (full[:, 5] > -1e-6) & np.all(np.isfinite(full), axis=1)


def initial_guess(data: np.ndarray, origin_x, origin_y, pixel_nm: float, sigma_guess_nm: float) -> np.ndarray:
    """Background-subtracted centroid and second-moment start values.

    Returns ``(batch, 5)`` isotropic parameters ``x, y, sigma, N, c``.
    """
    data = np.asarray(data, dtype=float)
    b, h, w = data.shape
    border = np.concatenate(
        [data[:, 0, :], data[:, -1, :], data[:, 1:-1, 0], data[:, 1:-1, -1]], axis=1
    )
    c0 = np.maximum(border.mean(axis=1), 1e-3)
    sig = np.clip(data - c0[:, None, None], 0.0, None)
    tot = sig.sum(axis=(1, 2))
    safe = np.where(tot > 0, tot, 1.0)
    xc = origin_x[:, None] + pixel_nm * (np.arange(w) + 0.5)[None, :]
    yc = origin_y[:, None] + pixel_nm * (np.arange(h) + 0.5)[None, :]
    wx = sig.sum(axis=1)
    wy = sig.sum(axis=2)
    mx = (wx * xc).sum(axis=1) / safe
    my = (wy * yc).sum(axis=1) / safe
    vx = (wx * (xc - mx[:, None]) ** 2).sum(axis=1) / safe
    vy = (wy * (yc - my[:, None]) ** 2).sum(axis=1) / safe
    s0 = np.sqrt(np.clip(0.5 * (vx + vy) - pixel_nm**2 / 12.0, 0.0, None))
    # clipped positive residuals inflate the moment; fall back to the nominal width
    s0 = np.where((s0 > 0.5 * sigma_guess_nm) & (s0 < 2.0 * sigma_guess_nm), s0, sigma_guess_nm)
    n0 = np.maximum(tot, 1.0)
    no_signal = tot <= 0
    mx = np.where(no_signal, origin_x + 0.5 * w * pixel_nm, mx)
    my = np.where(no_signal, origin_y + 0.5 * h * pixel_nm, my)
    return np.column_stack([mx, my, s0, n0, c0])


def fit_batch(
    data,
    origin_x,
    origin_y,
    pixel_nm: float,
    sigma_guess_nm: float,
    objective: str = "lsq",
    elliptical: bool = False,
    init: np.ndarray | None = None,
    tol_nm: float = 1e-3,
    max_iter: int = 200,
) -> BatchFit:
    """Fit ``N * G(x - x0, y - y0; sigma) + c`` to each region of interest.

    Parameters
    ----------
    data : array (batch, h, w)
        Photon counts.
    origin_x, origin_y : array (batch,)
        Position in nm of the top-left corner of each region.
    init : array (batch, 5), optional
        Isotropic start values ``x, y, sigma, N, c``; computed from
        moments when omitted.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}; expected one of {OBJECTIVES}")
    data = np.asarray(data, dtype=float)
    if data.ndim == 2:
        data = data[None]
    b, h, w = data.shape
    origin_x = np.broadcast_to(np.asarray(origin_x, dtype=float), (b,)).copy()
    origin_y = np.broadcast_to(np.asarray(origin_y, dtype=float), (b,)).copy()
    ex = pixel_edges(w, pixel_nm)
    ey = pixel_edges(h, pixel_nm)

    p0 = initial_guess(data, origin_x, origin_y, pixel_nm, sigma_guess_nm) if init is None else np.array(init, dtype=float)
    # work in ROI-local coordinates so the edges are shared across the batch
    p0[:, 0] -= origin_x
    p0[:, 1] -= origin_y
    if elliptical:
        p = np.column_stack([p0[:, 0], p0[:, 1], p0[:, 2], p0[:, 2], p0[:, 3], p0[:, 4]])
    else:
        p = p0
    n_par = p.shape[1]

    lam = np.full(b, 1e-3)
    active = np.ones(b, dtype=bool)
    converged = np.zeros(b, dtype=bool)
    iterations = np.zeros(b, dtype=int)
    mu, _ = _model_and_jacobian(p, ex, ey, elliptical, want_jac=False)
    cost = _cost(data, mu, objective)
    eye = np.eye(n_par)

    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        pa = p[idx]
        d = data[idx].reshape(idx.size, -1)
        mu_a, jac = _model_and_jacobian(pa, ex, ey, elliptical)
        mu_a = mu_a.reshape(idx.size, -1)
        r = d - mu_a
        if objective == "mle":
            wgt = 1.0 / np.maximum(mu_a, _MIN_MU)
        else:
            wgt = np.ones_like(mu_a)
        jw = jac * wgt[:, :, None]
        a_mat = np.einsum("bkp,bkq->bpq", jw, jac)
        g = np.einsum("bkp,bk->bp", jw, r)
        diag = np.einsum("bpp->bp", a_mat)
        iterations[idx] += 1

        # inner loop: raise damping until the step lowers the cost
        pending = np.ones(idx.size, dtype=bool)
        step = np.zeros_like(pa)
        for _inner in range(12):
            sel = np.flatnonzero(pending)
            if sel.size == 0:
                break
            damped = a_mat[sel] + lam[idx[sel], None, None] * (diag[sel, :, None] * eye + 1e-12 * eye)
            try:
                dp = np.linalg.solve(damped, g[sel][:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                dp = np.stack([np.linalg.lstsq(m, v, rcond=None)[0] for m, v in zip(damped, g[sel])])
            trial = pa[sel] + dp
            ok = _valid(trial, elliptical)
            mu_t, _ = _model_and_jacobian(np.where(ok[:, None], trial, pa[sel]), ex, ey, elliptical, want_jac=False)
            c_t = _cost(data[idx[sel]], mu_t, objective)
            better = ok & (c_t <= cost[idx[sel]])
            good = sel[better]
            step[good] = dp[better]
            p[idx[good]] = trial[better]
            cost[idx[good]] = c_t[better]
            lam[idx[good]] = np.maximum(lam[idx[good]] / 10.0, 1e-9)
            lam[idx[sel[~better]]] *= 10.0
            pending[good] = False
        stuck = pending & (lam[idx] > 1e9)
        done = (~pending) & (np.max(np.abs(step[:, :2]), axis=1) < tol_nm)
        converged[idx[done]] = True
        # a step that cannot reduce the cost any further is a stationary point
        converged[idx[stuck]] = True
        active[idx[done | stuck]] = False

    full = _expand(p, elliptical)
    mu, _ = _model_and_jacobian(p, ex, ey, elliptical, want_jac=False)
    chi = np.mean((data - mu) ** 2 / np.maximum(mu, _MIN_MU), axis=(1, 2))
    full = full.copy()
    full[:, 0] += origin_x
    full[:, 1] += origin_y
    return BatchFit(params=full, converged=converged, iterations=iterations, residual=np.sqrt(chi))
