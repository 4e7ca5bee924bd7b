"""ACE gas detection and image / detection metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

SHRINKAGE = 1e-3
COV_FLOOR = 1e-8
PSNR_CAP = 99.0


@dataclass
class BackgroundModel:
    mean: np.ndarray
    cov: np.ndarray
    cov_reg: np.ndarray
    inv: np.ndarray
    n_pixels: int


def fit_background(cube, shrinkage=SHRINKAGE):
    """Mean and shrinkage-regularised covariance over every pixel of ``cube``.

    ``Sigma_reg = (1 - d) Sigma + d * tr(Sigma) / c * I`` with a ``1e-8 I``
    floor added when the covariance is degenerate (zero trace).
    """
    x = np.asarray(cube, dtype=np.float64)
    x = x.reshape(-1, x.shape[-1])
    n, c = x.shape
    if n < 2:
        raise ValueError("need at least two pixels to estimate a background")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    cov = 0.5 * (cov + cov.T)
    trace = np.trace(cov)
    reg = (1.0 - shrinkage) * cov + shrinkage * trace / c * np.eye(c)
    if trace <= 0:
        reg = reg + COV_FLOOR * np.eye(c)
    inv = np.linalg.inv(reg)
    inv = 0.5 * (inv + inv.T)
    return BackgroundModel(mean, cov, reg, inv, n)


def ace_map(cube, target, bg: BackgroundModel):
    """Adaptive coherence estimator score for every pixel.

    ``(t' S^-1 (y - mu))^2 / ((t' S^-1 t) ((y - mu)' S^-1 (y - mu)))``;
    pixels at the background mean score 0.
    """
    x = np.asarray(cube, dtype=np.float64)
    shape = x.shape[:-1]
    x = x.reshape(-1, x.shape[-1])
    t = np.asarray(target, dtype=np.float64)
    if t.shape != bg.mean.shape:
        raise ValueError("target spectrum and background have different channel counts")
    tt = t @ bg.inv @ t
    if not tt >= 1e-24:
        raise ValueError("target spectrum has (near) zero whitened norm")
    r = x - bg.mean
    proj = r @ (bg.inv @ t)
    rr = np.einsum("ij,jk,ik->i", r, bg.inv, r)
    ok = rr >= 1e-24
    score = np.where(ok, proj * proj / (tt * np.where(ok, rr, 1.0)), 0.0)
    return np.clip(score, 0.0, 1.0).reshape(shape)


def threshold_mask(scores, tau=0.6):
    if not 0.0 <= tau <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return np.asarray(scores) > tau


def roc_auc(scores, labels):
    """Mann-Whitney AUC with midranks for ties.

    Probability that a random positive outranks a random negative, ties
    counting one half.  Raises ValueError if only one class is present.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=bool).ravel()
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def tpr_fpr(pred, ref):
    pred = np.asarray(pred, dtype=bool)
    ref = np.asarray(ref, dtype=bool)
    if pred.shape != ref.shape:
        raise ValueError("masks differ in shape")
    n_ref = int(ref.sum())
    if n_ref == 0:
        raise ValueError("reference mask is empty; TPR undefined")
    n_neg = ref.size - n_ref
    tpr = float(np.sum(pred & ref) / n_ref)
    fpr = float(np.sum(pred & ~ref) / n_neg) if n_neg else 0.0
    return tpr, fpr


def psnr(render, truth, peak):
    """PSNR in dB over every pixel and channel, capped at 99 dB."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    diff = np.asarray(render, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, win):
    from numpy.lib.stride_tricks import sliding_window_view

    patches = sliding_window_view(img, win.shape)
    return np.einsum("ijkl,kl->ij", patches, win)


def ssim(render, truth, data_range, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean single-scale SSIM over channels.

    Each channel is filtered with a normalised ``win_size`` Gaussian window
    over the valid region only.  ``data_range`` is supplied by the caller
    (e.g. the max - min of the ground-truth evaluation set).
    """
    a = np.asarray(render, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < win_size or a.shape[1] < win_size:
        raise ValueError(f"images must be at least {win_size}x{win_size} for SSIM")
    win = gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    vals = []
    for j in range(a.shape[-1]):
        x, y = a[..., j], b[..., j]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def nearest_channel(wavelengths, target_um):
    return int(np.argmin(np.abs(np.asarray(wavelengths) - target_um)))


def falsecolor(cube, wavelengths, rgb_um=(10.4, 8.1, 8.5), lo_pct=1.0, hi_pct=99.0):
    """8-bit RGB composite from three nearest channels with percentile stretch."""
    cube = np.asarray(cube, dtype=np.float64)
    wl = np.asarray(wavelengths, dtype=np.float64)
    band = (wl.min(), wl.max())
    out = np.empty(cube.shape[:2] + (3,), dtype=np.uint8)
    for k, lam in enumerate(rgb_um):
        if not band[0] - 1e-9 <= lam <= band[1] + 1e-9:
            raise ValueError(f"{lam} um lies outside the band {band}")
        ch = cube[..., nearest_channel(wl, lam)]
        lo, hi = np.percentile(ch, [lo_pct, hi_pct])
        if hi - lo <= 0:
            out[..., k] = 128
            continue
        scaled = np.clip((ch - lo) / (hi - lo), 0.0, 1.0)
        out[..., k] = np.round(scaled * 255).astype(np.uint8)
    return out


@dataclass
class DetectionResult:
    scores: np.ndarray
    mask: np.ndarray
    tau: float


def detect(cube, target, tau=0.6, shrinkage=SHRINKAGE):
    """Fit the image background, score with ACE and threshold."""
    bg = fit_background(cube, shrinkage)
    scores = ace_map(cube, target, bg)
    return DetectionResult(scores, threshold_mask(scores, tau), tau)
