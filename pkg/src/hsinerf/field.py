"""The spectral radiance field: encoding, MLP, density heads, standardization."""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (ConfigError, ParamStore, affine_backward, affine_forward,
                       relu, relu_backward, softplus, softplus_backward)

DENSITY_MODES = ("single", "per_channel")


@dataclass(frozen=True)
class FieldConfig:
    """Architecture of the field MLP.

    The defaults are the full-size network; :meth:`desk` gives the small
    preset used for single-core experiments.
    """

    channels: int = 8
    base_depth: int = 8
    base_width: int = 256
    head_depth: int = 2
    head_width: int = 128
    l_pos: int = 16
    l_dir: int = 4
    density_mode: str = "per_channel"
    skip_layer: int | None = 5
    density_bias: float = -1.0

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if self.l_pos < 1 or self.l_dir < 1:
            raise ConfigError("encoding frequencies must be >= 1")
        if self.base_depth < 1 or self.head_depth < 0:
            raise ConfigError("base_depth must be >= 1 and head_depth >= 0")
        if self.density_mode not in DENSITY_MODES:
            raise ConfigError(f"density_mode must be one of {DENSITY_MODES}")
        if self.skip_layer is not None and not 0 < self.skip_layer < self.base_depth:
            raise ConfigError("skip_layer must index an inner base layer")

    @classmethod
    def desk(cls, channels=8, **overrides):
        kw = dict(channels=channels, base_depth=4, base_width=64, head_depth=1,
                  head_width=32, l_pos=6, l_dir=2, skip_layer=2)
        kw.update(overrides)
        return cls(**kw)

    @property
    def density_dim(self):
        return self.channels if self.density_mode == "per_channel" else 1

    @property
    def pos_dim(self):
        return 6 * self.l_pos

    @property
    def dir_dim(self):
        return 6 * self.l_dir

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# encoding


def encode(v, L):
    """Sinusoidal encoding of the last axis of ``v``.

    Each coordinate ``y`` becomes ``[sin(2^0 pi y), cos(2^0 pi y), ...,
    sin(2^(L-1) pi y), cos(2^(L-1) pi y)]``; coordinates are laid out one
    after the other, so a 3-vector maps to ``6 L`` features.
    """
    if L < 1:
        raise ConfigError("L must be >= 1")
    v = np.asarray(v)
    dtype = v.dtype if np.issubdtype(v.dtype, np.floating) else np.float64
    freqs = (np.pi * 2.0 ** np.arange(L)).astype(dtype)
    arg = v[..., :, None] * freqs
    out = np.stack([np.sin(arg), np.cos(arg)], axis=-1)
    return out.reshape(*v.shape[:-1], v.shape[-1] * 2 * L)


class PositionalEncoder:
    """Classic frequency encoding; integrated variants can slot in here."""

    def __init__(self, L):
        self.L = L

    def __call__(self, v):
        return encode(v, self.L)

    def dim(self, n_coords=3):
        return 2 * self.L * n_coords


# ---------------------------------------------------------------------------
# parameters


def layer_shapes(config: FieldConfig):
    """Return ``[(name, fan_out, fan_in), ...]`` in evaluation order."""
    shapes = []
    width = config.base_width
    fan_in = config.pos_dim
    for i in range(config.base_depth):
        if config.skip_layer is not None and i == config.skip_layer:
            fan_in = width + config.pos_dim
        shapes.append((f"base{i}", width, fan_in))
        fan_in = width
    shapes.append(("density", config.density_dim, width))
    fan_in = width + config.dir_dim
    for i in range(config.head_depth):
        shapes.append((f"head{i}", config.head_width, fan_in))
        fan_in = config.head_width
    shapes.append(("radiance", config.channels, fan_in))
    return shapes


def init_field(config: FieldConfig, rng, dtype=np.float64):
    """He-initialised hidden layers, small linear output layers."""
    params = ParamStore()
    for name, fan_out, fan_in in layer_shapes(config):
        if name in ("density", "radiance"):
            std = np.sqrt(1.0 / fan_in) * 0.1
        else:
            std = np.sqrt(2.0 / fan_in)
        W = rng.normal(0.0, std, size=(fan_out, fan_in)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        if name == "density":
            b += config.density_bias
        params.add(f"{name}.W", W)
        params.add(f"{name}.b", b)
    return params


def check_params(params: ParamStore, config: FieldConfig):
    for name, fan_out, fan_in in layer_shapes(config):
        W = params.params.get(f"{name}.W")
        b = params.params.get(f"{name}.b")
        if W is None or b is None or W.shape != (fan_out, fan_in) or b.shape != (fan_out,):
            raise ConfigError(f"parameters for layer {name!r} do not match the field config")


def tie_density(params: ParamStore, single: FieldConfig):
    """Copy a single-density field into a per-channel field with tied densities."""
    per = FieldConfig(**{**single.to_dict(), "density_mode": "per_channel"})
    out = params.copy()
    c = single.channels
    out.params["density.W"] = np.repeat(params["density.W"], c, axis=0)
    out.params["density.b"] = np.repeat(params["density.b"], c, axis=0)
    out.grads["density.W"] = np.zeros_like(out.params["density.W"])
    out.grads["density.b"] = np.zeros_like(out.params["density.b"])
    return out, per


# ---------------------------------------------------------------------------
# evaluation


class FieldCache:
    __slots__ = ("layers", "density", "head", "want_radiance")

    def __init__(self):
        self.layers = []
        self.density = None
        self.head = []
        self.want_radiance = True


def field_forward(params: ParamStore, x, d, config: FieldConfig, radiance=True):
    """Evaluate the field on flattened samples.

    Parameters
    ----------
    x : (M, 3) positions, already normalised by the scene radius.
    d : (M, 3) unit view directions, or None when ``radiance`` is False.
    radiance : skip the head MLP when only densities are needed.

    Returns
    -------
    sigma : (M, K) non-negative densities, K = 1 or channels.
    rad : (M, channels) standardized radiance, or None.
    cache : state for :func:`field_backward`.
    """
    dtype = params.dtype
    enc = encode(np.asarray(x, dtype=dtype), config.l_pos)
    cache = FieldCache()
    h = enc
    for i in range(config.base_depth):
        if config.skip_layer is not None and i == config.skip_layer:
            h = np.concatenate([h, enc], axis=-1)
        z, aff = affine_forward(h, params[f"base{i}.W"], params[f"base{i}.b"])
        h, act = relu(z, inplace=True)
        cache.layers.append((aff, act))
    logits, aff = affine_forward(h, params["density.W"], params["density.b"])
    sigma, sp = softplus(logits)
    cache.density = (aff, sp)
    cache.want_radiance = radiance
    rad = None
    if radiance:
        denc = encode(np.asarray(d, dtype=dtype), config.l_dir)
        g = np.concatenate([h, denc], axis=-1)
        for i in range(config.head_depth):
            z, aff = affine_forward(g, params[f"head{i}.W"], params[f"head{i}.b"])
            g, act = relu(z, inplace=True)
            cache.head.append((aff, act))
        rad, aff = affine_forward(g, params["radiance.W"], params["radiance.b"])
        cache.head.append((aff, None))
    return sigma, rad, cache


def field_backward(params: ParamStore, config: FieldConfig, cache: FieldCache,
                   dsigma, drad=None):
    """Accumulate parameter gradients given cotangents of sigma and radiance."""
    W = config.base_width
    aff, sp = cache.density
    dlogits = softplus_backward(dsigma, sp)
    dh, dW, db = affine_backward(dlogits, aff)
    params.accumulate("density.W", dW)
    params.accumulate("density.b", db)

    if cache.want_radiance and drad is not None:
        aff, _ = cache.head[-1]
        dg, dW, db = affine_backward(drad, aff)
        params.accumulate("radiance.W", dW)
        params.accumulate("radiance.b", db)
        for i in reversed(range(config.head_depth)):
            aff, act = cache.head[i]
            dz = relu_backward(dg, act)
            dg, dW, db = affine_backward(dz, aff)
            params.accumulate(f"head{i}.W", dW)
            params.accumulate(f"head{i}.b", db)
        dh = dh + dg[..., :W]

    for i in reversed(range(config.base_depth)):
        aff, act = cache.layers[i]
        dz = relu_backward(dh, act)
        dh, dW, db = affine_backward(dz, aff, need_dx=i > 0)
        params.accumulate(f"base{i}.W", dW)
        params.accumulate(f"base{i}.b", db)
        if i > 0 and config.skip_layer is not None and i == config.skip_layer:
            dh = dh[..., :W]
    # encoding has no parameters; input gradients are dropped here


# ---------------------------------------------------------------------------
# standardization


class Standardizer:
    """Per-channel z-scoring of radiance estimated from training pixels."""

    def __init__(self, mean, std):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, pixels, floor=1e-8):
        pixels = np.asarray(pixels, dtype=np.float64)
        pixels = pixels.reshape(-1, pixels.shape[-1])
        if pixels.shape[0] < 2:
            raise ValueError("need at least two pixels to fit a standardizer")
        mean = pixels.mean(axis=0)
        std = pixels.std(axis=0)
        flat = std < floor
        if np.any(flat):
            warnings.warn(f"constant channels {np.flatnonzero(flat).tolist()}; "
                          f"clamping their scale to {floor}")
            std = np.where(flat, floor, std)
        return cls(mean, std)

    @property
    def channels(self):
        return self.mean.size

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])
