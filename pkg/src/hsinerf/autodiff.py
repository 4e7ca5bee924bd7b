"""Hand-written reverse-mode pieces for the field MLP.

Only what the fixed architecture needs: affine layers, ReLU, softplus,
a named parameter store with gradient buffers, Adam and the learning-rate
schedule.  Every layer primitive is a ``forward`` returning ``(y, cache)``
plus a ``backward`` consuming ``(dy, cache)``; arrays may carry any number
of leading batch dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Shapes or settings that cannot work together."""


class UsageError(RuntimeError):
    """An API was called out of order or with unusable arguments."""


class NumericError(FloatingPointError):
    """A NaN or infinity showed up where a finite value is required."""


# ---------------------------------------------------------------------------
# layer primitives


def affine_forward(x, W, b):
    """Compute ``W @ x + b`` over the last axis of ``x``.

    ``W`` has shape (out, in) and ``b`` shape (out,).  Returns the output
    and the cache needed by :func:`affine_backward`.
    """
    x = np.asarray(x)
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise ConfigError(
            f"affine shapes do not match: x {x.shape}, W {W.shape}, b {b.shape}")
    y = x @ W.T
    y += b
    return y, (x, W)


def affine_backward(dy, cache, need_dx=True):
    """Return ``(dx, dW, db)`` for an affine layer.

    Batch dimensions are summed into ``dW`` and ``db``.  With
    ``need_dx=False`` the input gradient is skipped and returned as None.
    """
    if cache is None:
        raise UsageError("affine_backward called without a forward cache")
    x, W = cache
    dy = np.asarray(dy)
    if dy.shape[:-1] != x.shape[:-1] or dy.shape[-1] != W.shape[0]:
        raise UsageError(
            f"stale cache: dy {dy.shape} does not match forward x {x.shape}, W {W.shape}")
    dx = dy @ W if need_dx else None
    dy2 = dy.reshape(-1, dy.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    dW = dy2.T @ x2
    db = dy2.sum(axis=0)
    return dx, dW, db


def relu(x, inplace=False):
    mask = x > 0
    out = np.maximum(x, 0, out=x if inplace else None)
    return out, mask


def relu_backward(dy, cache):
    # subgradient at exactly 0 is 0
    return dy * cache


def softplus(x):
    """Overflow-safe ``log(1 + exp(x))``."""
    x = np.asarray(x)
    return np.logaddexp(0, x).astype(x.dtype, copy=False), x


def sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_backward(dy, cache):
    return dy * sigmoid(cache)


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Ordered named parameter arrays with parallel gradient buffers.

    Layers are stored as ``"<layer>.W"`` / ``"<layer>.b"`` pairs; the store
    itself does not care about the naming beyond keeping insertion order.
    """

    def __init__(self, arrays=None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name, value):
        value = np.array(value, copy=True)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"parameter {name!r} has non-finite entries")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def items(self):
        return self.params.items()

    def accumulate(self, name, grad):
        g = self.grads[name]
        if grad.shape != g.shape:
            raise ConfigError(f"gradient for {name!r} has shape {grad.shape}, expected {g.shape}")
        g += grad

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def size(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        out = ParamStore()
        for name, value in self.params.items():
            out.params[name] = value.copy()
            out.grads[name] = self.grads[name].copy()
        return out

    def astype(self, dtype):
        out = ParamStore()
        for name, value in self.params.items():
            out.params[name] = value.astype(dtype)
            out.grads[name] = np.zeros_like(out.params[name])
        return out

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ParamStore, **kw):
        state = cls(**kw)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        return state


def adam_step(params: ParamStore, state: AdamState, lr: float):
    """One bias-corrected Adam update in place; gradients are zeroed after.

    Raises :class:`NumericError` naming the first parameter whose gradient
    holds a NaN, before anything is modified.
    """
    for name, g in params.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    state.step += 1
    k = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** k
    c2 = 1.0 - b2 ** k
    for name, p in params.params.items():
        g = params.grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.eps
        p -= (lr / c1) * m / denom
    params.zero_grad()
    return params


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup followed by a cosine ramp down, constant afterwards."""

    lr_min: float = 1e-5
    lr_max: float = 1e-3
    warmup_iters: int = 2000
    decay_end_iter: int = 150000

    def __call__(self, k):
        return self.lr_at(k)

    def lr_at(self, k):
        if k < 0:
            raise UsageError("iteration must be non-negative")
        if k == self.warmup_iters:
            return self.lr_max
        if k < self.warmup_iters:
            return self.lr_min + (self.lr_max - self.lr_min) * (k / self.warmup_iters)
        if k >= self.decay_end_iter:
            return self.lr_min
        frac = (k - self.warmup_iters) / (self.decay_end_iter - self.warmup_iters)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + math.cos(math.pi * frac))


DEFAULT_SCHEDULE = LrSchedule()


def lr_at(k, schedule: LrSchedule = DEFAULT_SCHEDULE):
    return schedule.lr_at(k)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(loss_fn, params: ParamStore, h=1e-6, names=None, max_entries=None, rng=None,
               atol=1e-10):
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` must return ``(loss, grads)`` where ``grads`` maps
    parameter names to arrays.  For each checked parameter tensor the
    relative error ``|g_a - g_n| / (|g_a| + |g_n|)`` (2-norms, tensor-wise)
    is computed; the maximum over tensors is returned together with the
    per-tensor breakdown.

    ``max_entries`` limits how many entries per tensor are perturbed
    (chosen with ``rng``); the comparison then runs on that subset.  Tensors
    whose gradient norms sum below ``atol`` use ``atol`` as denominator so
    round-off on vanishing gradients does not read as a failure.
    """
    loss0, analytic = loss_fn(params)
    loss0_again, _ = loss_fn(params)
    if loss0 != loss0_again:
        raise UsageError("loss_fn is not deterministic: two evaluations differ")
    analytic = {k: np.array(v, dtype=np.float64, copy=True) for k, v in analytic.items()}
    rng = np.random.default_rng(0) if rng is None else rng
    report = {}
    for name in names or params.names():
        p = params.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            lp, _ = loss_fn(params)
            flat[i] = old - h
            lm, _ = loss_fn(params)
            flat[i] = old
            numeric[n] = (lp - lm) / (2 * h)
        a = analytic[name].reshape(-1)[idx]
        num = np.linalg.norm(a - numeric)
        den = np.linalg.norm(a) + np.linalg.norm(numeric)
        report[name] = num / max(den, atol)
    return max(report.values()), report
