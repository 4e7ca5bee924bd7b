"""Rays, hierarchical sampling and volume compositing with gradients."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .field import FieldConfig, field_backward, field_forward


class InvariantError(RuntimeError):
    """Internal invariant violated (negative density or interval)."""


# ---------------------------------------------------------------------------
# cameras and rays


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    pixels: np.ndarray = None
    image_ids: np.ndarray = None

    def __post_init__(self):
        n = len(self.origins)
        self.near = np.broadcast_to(np.asarray(self.near, dtype=np.float64), (n,)).copy()
        self.far = np.broadcast_to(np.asarray(self.far, dtype=np.float64), (n,)).copy()
        if self.pixels is None:
            self.pixels = np.zeros((n, 2), dtype=np.int64)
        if self.image_ids is None:
            self.image_ids = np.zeros(n, dtype=np.int64)

    def __len__(self):
        return len(self.origins)

    def subset(self, idx):
        return RayBatch(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx],
                        self.pixels[idx], self.image_ids[idx])

    @classmethod
    def concat(cls, batches):
        return cls(*(np.concatenate([getattr(b, f) for b in batches]) for f in
                     ("origins", "dirs", "near", "far", "pixels", "image_ids")))

    def normalized(self, center, radius):
        """Translate by ``center`` and divide every length by ``radius``."""
        return RayBatch((self.origins - np.asarray(center)) / radius, self.dirs.copy(),
                        self.near / radius, self.far / radius, self.pixels.copy(),
                        self.image_ids.copy())


def look_at(origin, target, up=(0.0, 0.0, 1.0)):
    """Camera-to-world matrix for a camera at ``origin`` facing ``target``.

    The camera looks down its local -z axis with +y up and +x right.
    """
    origin = np.asarray(origin, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - origin
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-6:
        right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward
    c2w[:3, 3] = origin
    return c2w


def rays_for_camera(c2w, focal, width, height, near, far, image_id=0):
    """One ray per pixel centre of a pinhole camera.

    Raises ValueError when the rotation block is not orthonormal to 1e-6.
    """
    c2w = np.asarray(c2w, dtype=np.float64)
    R = c2w[:3, :3]
    if c2w.shape != (4, 4) or np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
        raise ValueError("camera rotation is not orthonormal")
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    x = (cols + 0.5 - width / 2.0) / focal
    y = -(rows + 0.5 - height / 2.0) / focal
    local = np.stack([x, y, -np.ones_like(x)], axis=-1).reshape(-1, 3)
    dirs = local @ R.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(c2w[:3, 3], dirs.shape).copy()
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=-1)
    ids = np.full(len(dirs), image_id, dtype=np.int64)
    return RayBatch(origins, dirs, near, far, pixels, ids)


# ---------------------------------------------------------------------------
# sampling


def stratified_samples(near, far, n, rng=None, dtype=np.float64):
    """One draw per equal-width bin of ``[near, far]``; bin midpoints when ``rng`` is None."""
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    if n < 2:
        raise ValueError("need at least two coarse samples")
    if rng is None:
        u = np.full((near.shape[0], n), 0.5)
    else:
        u = rng.random((near.shape[0], n))
    t = near + (far - near) * (np.arange(n) + u) / n
    return t.astype(dtype)


def anneal_planes(k, near, far, n_k, p_s=0.85):
    """Shrink ``[near, far]`` about its midpoint by ``clamp(k / n_k, p_s, 1)``."""
    if not 0 < p_s <= 1 or n_k < 1:
        raise ValueError("need 0 < p_s <= 1 and n_k >= 1")
    eta = min(max(k / n_k, p_s), 1.0)
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    mid = 0.5 * (near + far)
    return mid + (near - mid) * eta, mid + (far - mid) * eta


def anneal_factor(k, n_k, p_s=0.85):
    return min(max(k / n_k, p_s), 1.0)


def sample_intervals(t, far):
    """``delta_i = t_{i+1} - t_i``; the last interval runs to the far plane."""
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype).reshape(-1, 1), (t.shape[0], 1))
    return np.concatenate([np.diff(t, axis=-1), far - t[:, -1:]], axis=-1)


def bin_edges(t, near, far):
    shape = (t.shape[0], 1)
    near = np.broadcast_to(np.asarray(near, dtype=t.dtype).reshape(-1, 1), shape)
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype).reshape(-1, 1), shape)
    mids = 0.5 * (t[:, 1:] + t[:, :-1])
    return np.concatenate([near, mids, far], axis=-1)


def pdf_resample(weights, t_coarse, near, far, n_fine, rng=None, merge=True):
    """Inverse-transform draws from the piecewise-constant PDF of ``weights``.

    Each coarse sample owns the bin between its neighbouring midpoints
    (the outermost bins extend to the near/far planes).  Draws use
    stratified uniforms, or bin-centred ones when ``rng`` is None.  Rows
    whose weights are all zero fall back to a uniform PDF.

    Returns the sorted union of coarse and fine distances when ``merge``
    is set, otherwise the fine distances alone.
    """
    w = np.asarray(weights, dtype=np.float64)
    t_coarse = np.asarray(t_coarse)
    n_rays, n_c = w.shape
    total = w.sum(axis=-1, keepdims=True)
    empty = total[:, 0] <= 0
    if np.any(empty):
        warnings.warn(f"{int(empty.sum())} rays with all-zero weights; using a uniform PDF")
        w = np.where(empty[:, None], 1.0, w)
        total = w.sum(axis=-1, keepdims=True)
    pdf = w / total
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (n_rays, n_fine))
    else:
        u = (np.arange(n_fine) + rng.random((n_rays, n_fine))) / n_fine
    idx = np.sum(cdf[:, None, :] <= u[:, :, None], axis=-1) - 1
    idx = np.clip(idx, 0, n_c - 1)
    edges = bin_edges(t_coarse.astype(np.float64), near, far)
    lo_c = np.take_along_axis(cdf, idx, axis=-1)
    hi_c = np.take_along_axis(cdf, idx + 1, axis=-1)
    lo_e = np.take_along_axis(edges, idx, axis=-1)
    hi_e = np.take_along_axis(edges, idx + 1, axis=-1)
    width = hi_c - lo_c
    frac = np.where(width > 0, (u - lo_c) / np.where(width > 0, width, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    t_fine = (lo_e + frac * (hi_e - lo_e)).astype(t_coarse.dtype)
    if not merge:
        return t_fine
    return np.sort(np.concatenate([t_coarse, t_fine], axis=-1), axis=-1)


# ---------------------------------------------------------------------------
# compositing


def _transmittance(sigma, delta):
    """Return ``(T_i, T_{i+1}, alpha, w)`` for densities of shape (R, N, K)."""
    if np.any(sigma < 0) or np.any(delta < 0):
        raise InvariantError("negative density or sample interval")
    tau = sigma * delta[..., None]
    acc = np.cumsum(tau, axis=1)
    t_next = np.exp(-acc)
    t_here = np.exp(-(acc - tau))
    t_here[:, 0] = 1.0
    alpha = -np.expm1(-tau)
    return t_here, t_next, alpha, t_here * alpha


def composite(sigma, rad, delta):
    """Single-density compositing.

    ``sigma`` is (R, N) or (R, N, 1), ``rad`` (R, N, C).  Returns the
    colour (R, C) and weights (R, N).
    """
    sigma = np.asarray(sigma)
    if sigma.ndim == 2:
        sigma = sigma[..., None]
    _, _, _, w = _transmittance(sigma, delta)
    color = np.einsum("rn,rnc->rc", w[..., 0], rad)
    return color, w[..., 0]


def composite_md(sigma, rad, delta):
    """Per-channel compositing.

    Returns ``(color (R, C), w (R, N, C), w_star (R, N))`` where ``w_star``
    is the channel-summed weight normalised to sum to one over samples
    (zero rows stay zero).
    """
    _, _, _, w = _transmittance(np.asarray(sigma), delta)
    color = np.sum(w * rad, axis=1)
    w_star = w.sum(axis=-1)
    total = w_star.sum(axis=-1, keepdims=True)
    w_star = np.where(total > 0, w_star / np.where(total > 0, total, 1.0), 0.0)
    return color, w, w_star


def render_depth(w, t, sigma=None, mode="distance"):
    """Expected depth per density channel and its channel mean.

    ``mode="distance"`` weights sample distances; ``mode="literal"`` weights
    the densities themselves instead.
    """
    w = np.asarray(w)
    if w.ndim == 2:
        w = w[..., None]
    if mode == "distance":
        d = np.einsum("rnk,rn->rk", w, t)
    elif mode == "literal":
        s = np.asarray(sigma)
        if s.ndim == 2:
            s = s[..., None]
        d = np.sum(w * s, axis=1)
    else:
        raise ValueError(f"unknown depth mode {mode!r}")
    return d, d.mean(axis=-1)


def composite_backward(sigma, rad, delta, t, dcolor=None, ddepth=None, depth_mode="distance"):
    """Cotangents of densities and radiance for ``composite_md``-style renders.

    ``sigma`` has shape (R, N, K) with K = 1 (tied) or C; ``ddepth`` is the
    cotangent of the per-K depth (R, K).  Returns ``(dsigma, drad)``.
    """
    t_here, t_next, alpha, w = _transmittance(sigma, delta)
    gw = np.zeros_like(w)
    drad = None
    if dcolor is not None:
        if sigma.shape[-1] == 1:
            gw[..., 0] += np.einsum("rc,rnc->rn", dcolor, rad)
        else:
            gw += dcolor[:, None, :] * rad
        drad = w * dcolor[:, None, :]
    dsigma_direct = 0
    if ddepth is not None:
        if depth_mode == "distance":
            gw += ddepth[:, None, :] * t[..., None]
        else:
            gw += ddepth[:, None, :] * sigma
            dsigma_direct = ddepth[:, None, :] * w
    gww = gw * w
    later = np.sum(gww, axis=1, keepdims=True) - np.cumsum(gww, axis=1)
    dtau = gw * t_next - later
    dsigma = dtau * delta[..., None] + dsigma_direct
    return dsigma, drad


# ---------------------------------------------------------------------------
# full hierarchical render


@dataclass
class RenderOptions:
    n_coarse: int = 32
    n_fine: int = 64
    depth_mode: str = "distance"
    chunk: int = 1024


@dataclass
class PassResult:
    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    rad: np.ndarray
    weights: np.ndarray
    color: np.ndarray
    cache: object = None


@dataclass
class RenderResult:
    color_coarse: np.ndarray
    color_fine: np.ndarray
    depth: np.ndarray
    mean_depth: np.ndarray
    weights_fine: np.ndarray
    t_coarse: np.ndarray
    t_fine: np.ndarray
    passes: dict = field(default_factory=dict)


def _run_pass(params, config, rays, t, radiance, keep_cache):
    n_rays, n = t.shape
    dtype = params.dtype
    x = rays.origins[:, None, :].astype(dtype) + t[..., None] * rays.dirs[:, None, :].astype(dtype)
    d = np.broadcast_to(rays.dirs[:, None, :], x.shape).astype(dtype) if radiance else None
    sigma, rad, cache = field_forward(params, x.reshape(-1, 3),
                                      None if d is None else d.reshape(-1, 3),
                                      config, radiance=radiance)
    sigma = sigma.reshape(n_rays, n, -1)
    delta = sample_intervals(t, rays.far.astype(dtype))
    _, _, _, w = _transmittance(sigma, delta)
    color = None
    if radiance:
        rad = rad.reshape(n_rays, n, -1)
        if sigma.shape[-1] == 1:
            color = np.einsum("rn,rnc->rc", w[..., 0], rad)
        else:
            color = np.sum(w * rad, axis=1)
    return PassResult(t, delta, sigma, rad, w, color, cache if keep_cache else None)


def render_rays(params, config: FieldConfig, rays: RayBatch, opts: RenderOptions, rng=None,
                near=None, far=None, radiance=True, grad=True, t_coarse=None, t_fine=None):
    """Coarse pass, importance resampling, fine pass over all samples.

    ``near``/``far`` override the ray planes (used for annealing).  Passing
    ``t_coarse``/``t_fine`` replays fixed sample positions.  With
    ``radiance=False`` only densities and depth are produced, and the
    coarse pass keeps no gradient state.
    """
    near = rays.near if near is None else np.asarray(near)
    far = rays.far if far is None else np.asarray(far)
    dtype = params.dtype
    if t_coarse is None:
        t_coarse = stratified_samples(near, far, opts.n_coarse, rng, dtype=dtype)
    coarse = _run_pass(params, config, rays, t_coarse, radiance, grad and radiance)
    if t_fine is None:
        w_pdf = coarse.weights.sum(axis=-1)
        t_fine = pdf_resample(w_pdf, t_coarse, near, far, opts.n_fine, rng).astype(dtype)
    fine = _run_pass(params, config, rays, t_fine, radiance, grad)
    depth, mean_depth = render_depth(fine.weights, t_fine, fine.sigma, opts.depth_mode)
    if depth.shape[-1] == 1 and config.channels > 1:
        depth = np.repeat(depth, config.channels, axis=-1)
    return RenderResult(coarse.color, fine.color, depth, mean_depth, fine.weights,
                        t_coarse, t_fine, {"coarse": coarse, "fine": fine})


def render_backward(params, config: FieldConfig, result: RenderResult, d_coarse=None,
                    d_fine=None, d_mean_depth=None, depth_mode="distance"):
    """Push cotangents of the rendered colours and mean depth into ``params.grads``."""
    fine = result.passes["fine"]
    k = fine.sigma.shape[-1]
    ddepth = None
    if d_mean_depth is not None:
        ddepth = np.repeat((d_mean_depth / k)[:, None], k, axis=-1).astype(fine.sigma.dtype)
    if d_fine is not None or ddepth is not None:
        dsig, drad = composite_backward(fine.sigma, fine.rad, fine.delta, fine.t,
                                        d_fine, ddepth, depth_mode)
        field_backward(params, config, fine.cache, dsig.reshape(-1, k),
                       None if drad is None else drad.reshape(-1, drad.shape[-1]))
    if d_coarse is not None:
        coarse = result.passes["coarse"]
        dsig, drad = composite_backward(coarse.sigma, coarse.rad, coarse.delta, coarse.t,
                                        d_coarse, None)
        field_backward(params, config, coarse.cache, dsig.reshape(-1, k),
                       drad.reshape(-1, drad.shape[-1]))


def render_image(params, config, rays: RayBatch, opts: RenderOptions, rng=None):
    """Forward-only render in chunks; returns fine colours and mean depths."""
    colors, depths = [], []
    for start in range(0, len(rays), opts.chunk):
        sub = rays.subset(slice(start, start + opts.chunk))
        res = render_rays(params, config, sub, opts, rng=rng, grad=False)
        colors.append(res.color_fine)
        depths.append(res.mean_depth)
    return np.concatenate(colors), np.concatenate(depths)
