"""Mutual information from a partial-volume joint histogram."""

from __future__ import annotations

import logging
import math

import numba
import numpy as np

from ..imgcore import GrayImage

log = logging.getLogger(__name__)


@numba.njit(cache=True, inline="always")
def _pv_add(H, fb, mb, w):
    nb_f = H.shape[0]
    nb_m = H.shape[1]
    f0 = int(math.floor(fb))
    if f0 >= nb_f - 1:
        f0 = nb_f - 2
    if f0 < 0:
        f0 = 0
    ff = fb - f0
    m0 = int(math.floor(mb))
    if m0 >= nb_m - 1:
        m0 = nb_m - 2
    if m0 < 0:
        m0 = 0
    fm = mb - m0
    H[f0, m0] += w * (1.0 - ff) * (1.0 - fm)
    H[f0, m0 + 1] += w * (1.0 - ff) * fm
    H[f0 + 1, m0] += w * ff * (1.0 - fm)
    H[f0 + 1, m0 + 1] += w * ff * fm


@numba.njit(cache=True)
def mi_from_histogram(H):
    nb_f, nb_m = H.shape
    total = 0.0
    pf = np.zeros(nb_f)
    pm = np.zeros(nb_m)
    for i in range(nb_f):
        for j in range(nb_m):
            v = H[i, j]
            if v > 1e-12:
                pf[i] += v
                pm[j] += v
                total += v
    if total <= 0.0:
        return 0.0
    mi = 0.0
    for i in range(nb_f):
        for j in range(nb_m):
            v = H[i, j]
            if v > 1e-12:
                mi += v * math.log(v * total / (pf[i] * pm[j]))
    return mi / total


@numba.njit(cache=True)
def joint_histogram(fb, mb, nb_f, nb_m):
    """Partial-volume joint histogram of continuous bin coordinates."""
    H = np.zeros((nb_f, nb_m))
    flat_f = fb.ravel()
    flat_m = mb.ravel()
    for k in range(flat_f.size):
        _pv_add(H, flat_f[k], flat_m[k], 1.0)
    return H


@numba.njit(cache=True, inline="always")
def _bilinear(mov, c, r):
    h, w = mov.shape
    if not (c >= 0.0 and c <= w - 1 and r >= 0.0 and r <= h - 1):
        return 0.0
    rc = round(c)
    if abs(c - rc) < 1e-9:
        c = rc
    rr = round(r)
    if abs(r - rr) < 1e-9:
        r = rr
    c0 = int(math.floor(c))
    r0 = int(math.floor(r))
    if c0 > w - 2:
        c0 = w - 2
    if r0 > h - 2:
        r0 = h - 2
    if c0 < 0:
        c0 = 0
    if r0 < 0:
        r0 = 0
    fc = c - c0
    fr = r - r0
    c1 = min(c0 + 1, w - 1)
    r1 = min(r0 + 1, h - 1)
    return (mov[r0, c0] * (1 - fc) * (1 - fr) + mov[r0, c1] * fc * (1 - fr)
            + mov[r1, c0] * (1 - fc) * fr + mov[r1, c1] * fc * fr)


@numba.njit(cache=True)
def histogram_at_coords(fb, mov, qc, qr, mlo, mscale, nb):
    """Joint histogram of fixed bins vs moving sampled at pixel coords (qc, qr)."""
    H = np.zeros((nb, nb))
    h, w = fb.shape
    for i in range(h):
        for j in range(w):
            v = _bilinear(mov, qc[i, j], qr[i, j])
            _pv_add(H, fb[i, j], (v - mlo) * mscale, 1.0)
    return H


@numba.njit(cache=True)
def affine_histogram(fb, mov, nb, mlo, mscale, fsx, fsy, msx, msy, a11, a12, a21, a22, b1, b2):
    H = np.zeros((nb, nb))
    h, w = fb.shape
    for i in range(h):
        y = i * fsy
        for j in range(w):
            x = j * fsx
            qc = (a11 * x + a12 * y + b1) / msx
            qr = (a21 * x + a22 * y + b2) / msy
            v = _bilinear(mov, qc, qr)
            _pv_add(H, fb[i, j], (v - mlo) * mscale, 1.0)
    return H


@numba.njit(parallel=True, cache=True)
def bspline_fd_gradient(fb, mov, qc, qr, mlo, mscale, nb, H0,
                        cellx, wx, celly, wy, ncx, ncy, jac, step):
    """Central-difference gradient of -MI w.r.t. every B-spline coefficient.

    Perturbing one coefficient only moves pixels inside its 4x4-cell
    support, so each difference updates a copy of the base histogram
    locally instead of rebuilding it.
    """
    gcols = ncx + 3
    grows = ncy + 3
    h, w = fb.shape
    colstart = np.full(ncx, w, np.int64)
    colend = np.zeros(ncx, np.int64)
    for j in range(w):
        c = cellx[j]
        colstart[c] = min(colstart[c], j)
        colend[c] = max(colend[c], j + 1)
    rowstart = np.full(ncy, h, np.int64)
    rowend = np.zeros(ncy, np.int64)
    for i in range(h):
        c = celly[i]
        rowstart[c] = min(rowstart[c], i)
        rowend[c] = max(rowend[c], i + 1)

    n_params = grows * gcols * 2
    grad = np.zeros(n_params)
    for p in numba.prange(n_params):
        d = p % 2
        a = (p // 2) % gcols
        b = (p // 2) // gcols
        j0 = w
        j1 = 0
        for c in range(max(a - 3, 0), min(a, ncx - 1) + 1):
            j0 = min(j0, colstart[c])
            j1 = max(j1, colend[c])
        i0 = h
        i1 = 0
        for c in range(max(b - 3, 0), min(b, ncy - 1) + 1):
            i0 = min(i0, rowstart[c])
            i1 = max(i1, rowend[c])
        if j1 <= j0 or i1 <= i0:
            continue
        Hp = H0.copy()
        Hm = H0.copy()
        dqc = jac[0, d] * step
        dqr = jac[1, d] * step
        for i in range(i0, i1):
            ky = b - celly[i]
            if ky < 0 or ky > 3:
                continue
            wyv = wy[i, ky]
            for j in range(j0, j1):
                kx = a - cellx[j]
                if kx < 0 or kx > 3:
                    continue
                wt = wyv * wx[j, kx]
                if wt == 0.0:
                    continue
                f = fb[i, j]
                v0 = (_bilinear(mov, qc[i, j], qr[i, j]) - mlo) * mscale
                vp = (_bilinear(mov, qc[i, j] + wt * dqc, qr[i, j] + wt * dqr) - mlo) * mscale
                vm = (_bilinear(mov, qc[i, j] - wt * dqc, qr[i, j] - wt * dqr) - mlo) * mscale
                _pv_add(Hp, f, v0, -1.0)
                _pv_add(Hp, f, vp, 1.0)
                _pv_add(Hm, f, v0, -1.0)
                _pv_add(Hm, f, vm, 1.0)
        grad[p] = (mi_from_histogram(Hm) - mi_from_histogram(Hp)) / (2.0 * step)
    return grad


def bin_coords(data: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    if hi <= lo:
        return np.zeros_like(data, dtype=np.float64)
    return np.clip((data - lo) / (hi - lo), 0.0, 1.0) * (bins - 1)


def is_informative(image: GrayImage) -> bool:
    return float(np.ptp(image.data)) > 0.0


def mutual_information(fixed: GrayImage, moving: GrayImage, bins: int = 32) -> float:
    """MI (nats) between two same-sized images, each scaled to its own range."""
    if fixed.data.shape != moving.data.shape:
        raise ValueError(f"shape mismatch {fixed.data.shape} vs {moving.data.shape}")
    if bins < 2:
        raise ValueError("need at least 2 histogram bins")
    if not is_informative(fixed):
        log.warning("constant fixed image: mutual information is non-informative")
        return 0.0
    f, m = fixed.data, moving.data
    fb = bin_coords(f, f.min(), f.max(), bins)
    mb = bin_coords(m, m.min(), m.max(), bins)
    return float(mi_from_histogram(joint_histogram(fb, mb, bins, bins)))


def mi_cost(fixed: GrayImage, moving: GrayImage, bins: int = 32) -> float:
    """Registration cost: negative mutual information."""
    return -mutual_information(fixed, moving, bins)
