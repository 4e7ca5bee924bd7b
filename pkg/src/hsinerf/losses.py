"""Training objective: L2, spectral angle, adaptive weighted L2, geometry regularization.

Every loss returns ``(value, gradient)`` with the gradient taken with
respect to the rendered quantity it consumes.  Batch reductions are
means over rays; the geometry term sums neighbour pairs inside a patch
and averages over patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError

SAM_EPS = 1e-12


# ---------------------------------------------------------------------------
# schedules


def _ramp(k, k0, k1, v0, v1):
    if k <= k0:
        return float(v0)
    if k >= k1:
        return float(v1)
    return v0 + (v1 - v0) * (k - k0) / (k1 - k0)


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.1
    lambda_f: float = 1.0
    lambda_sam: float = 2.0
    awl2_start: int = 5000
    awl2_end: int = 25000
    awl2_max: float = 100.0
    gr_start_value: float = 10000.0
    gr_end_value: float = 1.0
    gr_decay_iters: int = 6000

    def lambda_awl2(self, k):
        return _ramp(k, self.awl2_start, self.awl2_end, 0.0, self.awl2_max)

    def lambda_gr(self, k):
        return _ramp(k, 0, self.gr_decay_iters, self.gr_start_value, self.gr_end_value)


DEFAULT_WEIGHTS = LossWeights()


def lambda_awl2(k, weights: LossWeights = DEFAULT_WEIGHTS):
    return weights.lambda_awl2(k)


def lambda_gr(k, weights: LossWeights = DEFAULT_WEIGHTS):
    return weights.lambda_gr(k)


# ---------------------------------------------------------------------------
# colour losses


def l2_loss(c_coarse, c_fine, target, lambda_c=0.1, lambda_f=1.0):
    """``lambda_c |C_c - C|^2 + lambda_f |C_f - C|^2`` averaged over rays."""
    n = target.shape[0]
    rc = c_coarse - target
    rf = c_fine - target
    value = (lambda_c * np.sum(rc * rc) + lambda_f * np.sum(rf * rf)) / n
    return float(value), (2.0 * lambda_c / n) * rc, (2.0 * lambda_f / n) * rf


def sam_loss(c_fine, target):
    """Mean spectral angle between rendered and true spectra.

    Pairs where either vector has norm below 1e-12 contribute zero, and
    the cosine is clamped just inside [-1, 1] so the arccos stays
    differentiable.
    """
    n = target.shape[0]
    nu = np.linalg.norm(c_fine, axis=-1)
    nv = np.linalg.norm(target, axis=-1)
    ok = (nu >= SAM_EPS) & (nv >= SAM_EPS)
    denom = np.where(ok, nu * nv, 1.0)
    cos = np.where(ok, np.sum(c_fine * target, axis=-1) / denom, 1.0)
    lo, hi = -1.0 + SAM_EPS, 1.0 - SAM_EPS
    clamped = np.clip(cos, lo, hi)
    angle = np.where(ok, np.arccos(clamped), 0.0)
    value = float(angle.sum() / n)

    inside = ok & (cos > lo) & (cos < hi)
    dcos = np.where(inside, -1.0 / np.sqrt(np.maximum(1.0 - clamped * clamped, SAM_EPS)), 0.0)
    nu_safe = np.where(ok, nu, 1.0)
    grad = (target / denom[:, None] - cos[:, None] * c_fine / (nu_safe * nu_safe)[:, None])
    grad = (dcos / n)[:, None] * grad
    return value, grad.astype(c_fine.dtype, copy=False)


def awl2_loss(c_fine, target, weights):
    """``sum_j w_j (C_j - C_hat_j)^2`` averaged over rays."""
    n = target.shape[0]
    w = np.asarray(weights, dtype=c_fine.dtype)
    r = c_fine - target
    value = float(np.sum(w * r * r) / n)
    return value, (2.0 / n) * w * r


# ---------------------------------------------------------------------------
# channel weights


@dataclass
class ChannelWeights:
    weights: np.ndarray
    updated_at: int = -1

    @classmethod
    def uniform(cls, c):
        return cls(np.full(c, 1.0 / c))

    def __array__(self, dtype=None):
        return self.weights if dtype is None else self.weights.astype(dtype)


def channel_weights_from_residuals(residuals, iteration=-1):
    """Normalised mean squared residual per channel.

    ``residuals`` has shape (..., C).  All-zero residuals give uniform weights.
    """
    r = np.asarray(residuals, dtype=np.float64)
    r = r.reshape(-1, r.shape[-1])
    msr = np.mean(r * r, axis=0)
    total = msr.sum()
    if total <= 0:
        return ChannelWeights(np.full(r.shape[-1], 1.0 / r.shape[-1]), iteration)
    return ChannelWeights(msr / total, iteration)


def update_channel_weights(render_fn, rays, targets, iteration=-1, subsample=4096, rng=None):
    """Refresh channel weights from the model's fine renders.

    ``render_fn(rays) -> (R, C)`` fine colours in standardized space.  With
    ``subsample=None`` every supplied ray is used; otherwise a random
    subset of that size drawn from ``rng``.
    """
    if subsample is not None and len(rays) > subsample:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = np.sort(rng.choice(len(rays), size=subsample, replace=False))
        rays = rays.subset(idx)
        targets = targets[idx]
    pred = render_fn(rays)
    return channel_weights_from_residuals(pred - targets, iteration)


# ---------------------------------------------------------------------------
# geometry regularization


def gr_loss(depths):
    """Squared neighbour differences of patch mean depths.

    ``depths`` is (P, S, S) or (S, S).  Every vertical and horizontal
    neighbour pair inside a patch is summed; the result is averaged over
    patches.
    """
    d = np.asarray(depths)
    single = d.ndim == 2
    if single:
        d = d[None]
    p = d.shape[0]
    dv = d[:, :-1, :] - d[:, 1:, :]
    dh = d[:, :, :-1] - d[:, :, 1:]
    value = float((np.sum(dv * dv) + np.sum(dh * dh)) / p)
    g = np.zeros_like(d)
    g[:, :-1, :] += 2 * dv
    g[:, 1:, :] -= 2 * dv
    g[:, :, :-1] += 2 * dh
    g[:, :, 1:] -= 2 * dh
    g /= p
    return value, (g[0] if single else g)


# ---------------------------------------------------------------------------
# composite objective


@dataclass
class LossToggles:
    sam: bool = True
    awl2: bool = True
    gr: bool = True

    @classmethod
    def baseline(cls):
        return cls(False, False, False)


@dataclass
class LossResult:
    value: float
    terms: dict
    d_coarse: np.ndarray
    d_fine: np.ndarray
    d_patch_depth: np.ndarray | None = None
    lambdas: dict = field(default_factory=dict)


def total_loss(c_coarse, c_fine, target, k, channel_weights=None, patch_depths=None,
               toggles: LossToggles | None = None, weights: LossWeights = DEFAULT_WEIGHTS,
               force_lambdas=None):
    """Full objective at iteration ``k``.

    SAM and AWL2 see only the fine render; disabled terms are never
    evaluated.  ``force_lambdas`` overrides any schedule value by name
    (``"sam"``, ``"awl2"``, ``"gr"``).
    """
    toggles = toggles or LossToggles()
    lam = {"sam": weights.lambda_sam, "awl2": weights.lambda_awl2(k), "gr": weights.lambda_gr(k)}
    lam.update(force_lambdas or {})
    terms = {}
    l2, d_coarse, d_fine = l2_loss(c_coarse, c_fine, target, weights.lambda_c, weights.lambda_f)
    terms["l2"] = l2
    total = l2
    if toggles.sam:
        v, g = sam_loss(c_fine, target)
        terms["sam"] = v
        total += lam["sam"] * v
        d_fine = d_fine + lam["sam"] * g
    if toggles.awl2:
        cw = channel_weights if channel_weights is not None else \
            ChannelWeights.uniform(target.shape[-1])
        v, g = awl2_loss(c_fine, target, np.asarray(cw))
        terms["awl2"] = v
        total += lam["awl2"] * v
        d_fine = d_fine + lam["awl2"] * g
    d_depth = None
    if toggles.gr and patch_depths is not None:
        v, g = gr_loss(patch_depths)
        terms["gr"] = v
        total += lam["gr"] * v
        d_depth = lam["gr"] * g
    for name, v in terms.items():
        if not np.isfinite(v):
            raise NumericError(f"loss term {name!r} is not finite")
    return LossResult(float(total), terms, d_coarse, d_fine, d_depth,
                      {k_: lam[k_] for k_ in lam})
