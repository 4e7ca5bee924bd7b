"""Run configuration, dataset loading and the training loop."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import formats
from .autodiff import AdamState, ConfigError, LrSchedule, NumericError, ParamStore, adam_step
from .field import FieldConfig, Standardizer, init_field
from .losses import (ChannelWeights, LossToggles, LossWeights, gr_loss, total_loss,
                     update_channel_weights)
from .render import RayBatch, RenderOptions, anneal_planes, render_backward, render_image, \
    render_rays, rays_for_camera
from .scene import CameraPose, biased_fps, random_patch_cameras

TOGGLES = ("sam", "awl2", "md", "gr", "anneal")


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Everything a training run depends on.

    ``model`` selects the ``desk`` or ``full`` network preset; the
    individual ``model_*`` fields override it when set.
    """

    data_dir: str = "data"
    out_dir: str = "run"
    train_views: int = 20
    eval_views: int = 8
    view_seed: int = 0
    init_seed: int = 0
    iterations: int = 10000
    batch_rays: int = 4096
    chunk: int = 1024
    n_coarse: int = 32
    n_fine: int = 64
    sam: bool = True
    awl2: bool = True
    md: bool = True
    gr: bool = True
    anneal: bool = True
    anneal_iters: int = 2000
    anneal_start: float = 0.85
    n_patches: int = 16
    patch_size: int = 8
    patch_cameras: int = 10000
    awl2_every: int = 5000
    awl2_subsample: int = 4096
    checkpoint_every: int = 1000
    eval_every: int = 0
    early_stop_patience: int = 0
    model: str = "desk"
    model_base_depth: int = 0
    model_base_width: int = 0
    model_head_depth: int = -1
    model_head_width: int = 0
    model_l_pos: int = 0
    model_l_dir: int = 0
    lr_min: float = 1e-5
    lr_max: float = 1e-3
    lr_warmup: int = 2000
    lr_decay_end: int = 150000
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_rays < 1:
            raise ConfigError("train.batch_rays must be >= 1")
        if self.chunk < 1:
            raise ConfigError("train.chunk must be >= 1")
        if self.iterations < 0:
            raise ConfigError("train.iterations must be >= 0")
        if self.train_views < 1 or self.eval_views < 0:
            raise ConfigError("need at least one training view")
        if self.model not in ("desk", "full"):
            raise ConfigError("model.preset must be desk or full")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("train.dtype must be float32 or float64")
        if not 0.0 < self.anneal_start <= 1.0:
            raise ConfigError("anneal.start must lie in (0, 1]")

    @property
    def toggles(self):
        return {name: getattr(self, name) for name in TOGGLES}

    def field_config(self, channels):
        base = FieldConfig.desk(channels) if self.model == "desk" else FieldConfig(channels)
        over = {}
        for key in ("base_depth", "base_width", "head_width", "l_pos", "l_dir"):
            v = getattr(self, "model_" + key)
            if v > 0:
                over[key] = v
        if self.model_head_depth >= 0:
            over["head_depth"] = self.model_head_depth
        if "base_depth" in over and base.skip_layer is not None \
                and base.skip_layer >= over["base_depth"]:
            over["skip_layer"] = over["base_depth"] // 2 or None
        over["density_mode"] = "per_channel" if self.md else "single"
        try:
            return replace(base, **over)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def render_options(self):
        return RenderOptions(self.n_coarse, self.n_fine, "distance", self.chunk)

    def schedule(self):
        return LrSchedule(self.lr_min, self.lr_max, self.lr_warmup, self.lr_decay_end)

    def loss_toggles(self):
        return LossToggles(self.sam, self.awl2, self.gr)

    def to_dict(self):
        return asdict(self)

    def digest(self, exclude=("out_dir", "checkpoint_every", "eval_every")):
        d = {k: v for k, v in self.to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# dotted config key -> RunConfig attribute
TRAIN_KEYS = {
    "data.dir": "data_dir",
    "run.out": "out_dir",
    "views.train": "train_views",
    "views.eval": "eval_views",
    "views.seed": "view_seed",
    "train.seed": "init_seed",
    "train.iterations": "iterations",
    "train.batch_rays": "batch_rays",
    "train.chunk": "chunk",
    "train.checkpoint_every": "checkpoint_every",
    "train.eval_every": "eval_every",
    "train.early_stop_patience": "early_stop_patience",
    "train.dtype": "dtype",
    "render.n_coarse": "n_coarse",
    "render.n_fine": "n_fine",
    "loss.sam": "sam",
    "loss.awl2": "awl2",
    "loss.md": "md",
    "loss.gr": "gr",
    "loss.anneal": "anneal",
    "loss.awl2_every": "awl2_every",
    "loss.awl2_subsample": "awl2_subsample",
    "anneal.iters": "anneal_iters",
    "anneal.start": "anneal_start",
    "patch.count": "n_patches",
    "patch.size": "patch_size",
    "patch.cameras": "patch_cameras",
    "model.preset": "model",
    "model.base_depth": "model_base_depth",
    "model.base_width": "model_base_width",
    "model.head_depth": "model_head_depth",
    "model.head_width": "model_head_width",
    "model.l_pos": "model_l_pos",
    "model.l_dir": "model_l_dir",
    "lr.min": "lr_min",
    "lr.max": "lr_max",
    "lr.warmup": "lr_warmup",
    "lr.decay_end": "lr_decay_end",
}


def convert_value(raw, kind, key):
    """Parse a config string into ``kind`` (bool, int, float or str)."""
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("1", "true", "on", "yes"):
                return True
            if low in ("0", "false", "off", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def _field_types(cls):
    defaults = cls()
    return {f.name: type(getattr(defaults, f.name)) for f in fields(cls)}


def run_config_from(mapping, base: RunConfig | None = None):
    """Apply the ``train``-side keys of ``mapping`` (already validated) to ``base``."""
    base = base or RunConfig()
    types = _field_types(RunConfig)
    over = {}
    for key, raw in mapping.items():
        attr = TRAIN_KEYS.get(key)
        if attr is None:
            continue
        over[attr] = raw if not isinstance(raw, str) else convert_value(raw, types[attr], key)
    return replace(base, **over)


# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    poses: list
    cubes: list
    wavelengths: np.ndarray
    bounding_radius: float
    stack_base: np.ndarray
    absorption: np.ndarray | None = None
    tau_od: float | None = None
    root: Path | None = None

    @property
    def channels(self):
        return len(self.wavelengths)

    def mask_path(self, i):
        return self.root / "masks" / (Path(self.poses[i].file).stem + ".png")


def load_dataset(data_dir, load_cubes=True):
    root = Path(data_dir)
    poses, radius, base = formats.read_poses(root / "poses.json")
    spectra = root / "spectra.json"
    absorption = tau_od = None
    wl = None
    if spectra.exists():
        doc = formats.read_json(spectra)
        absorption = np.asarray(doc.get("gas_absorption"), dtype=np.float64)
        tau_od = doc.get("tau_od")
        wl = np.asarray(doc["wavelengths_um"], dtype=np.float64)
    cubes = []
    if load_cubes:
        for p in poses:
            cube, cwl = formats.read_hsic(root / p.file)
            if cube.shape[:2] != (p.height, p.width):
                raise formats.FormatError(f"{p.file}: cube is {cube.shape[:2]}, pose says "
                                          f"{(p.height, p.width)}")
            if wl is None:
                wl = cwl
            elif len(cwl) != len(wl):
                raise formats.FormatError(f"{p.file}: {len(cwl)} channels, expected {len(wl)}")
            cubes.append(cube)
    if wl is None:
        raise formats.FormatError(f"{root}: no wavelengths found (spectra.json or cubes)")
    return Dataset(poses, cubes, wl, radius, base, absorption, tau_od, root)


def split_views(n_views, poses, k_train, k_eval, seed):
    """Biased-FPS training views and a simple random sample of the rest for evaluation."""
    if k_train > n_views:
        raise ConfigError(f"asked for {k_train} training views, dataset has {n_views}")
    train = sorted(biased_fps(poses, k_train, seed=seed))
    rest = [i for i in range(n_views) if i not in set(train)]
    if k_eval > len(rest):
        raise ConfigError(f"asked for {k_eval} eval views, only {len(rest)} remain")
    rng = np.random.default_rng([seed, 1])
    evals = sorted(int(i) for i in rng.choice(rest, size=k_eval, replace=False))
    return train, evals


def check_disjoint(train_ids, eval_ids):
    overlap = sorted(set(train_ids) & set(eval_ids))
    if overlap:
        raise ConfigError(f"train and eval views overlap: {overlap}")


def world_rays(poses, ids):
    return RayBatch.concat([poses[i].rays(image_id=i) for i in ids])


# ---------------------------------------------------------------------------
# model state and checkpoints


@dataclass
class TrainState:
    params: ParamStore
    adam: AdamState
    iteration: int
    channel_weights: ChannelWeights
    standardizer: Standardizer
    field_config: FieldConfig
    config: RunConfig
    train_ids: list
    eval_ids: list
    wavelengths: np.ndarray
    center: np.ndarray
    radius: float
    best_loss: float = math.inf
    since_best: int = 0
    log: list = field(default_factory=list)


def _manifest(state: TrainState):
    return {
        "format": "hsinerf-checkpoint",
        "config": state.config.to_dict(),
        "config_hash": state.config.digest(),
        "iteration": state.iteration,
        "adam_step": state.adam.step,
        "channel_weights": [float(v) for v in state.channel_weights.weights],
        "channel_weights_updated_at": state.channel_weights.updated_at,
        "standardizer": state.standardizer.to_dict(),
        "field": state.field_config.to_dict(),
        "train_ids": list(state.train_ids),
        "eval_ids": list(state.eval_ids),
        "wavelengths_um": [float(v) for v in state.wavelengths],
        "center": [float(v) for v in state.center],
        "radius": float(state.radius),
        "rng": {"kind": "numpy-default_rng", "entropy": [state.config.init_seed, "iteration"]},
        "best_loss": state.best_loss if math.isfinite(state.best_loss) else None,
        "since_best": state.since_best,
    }


def save_checkpoint(path, state: TrainState):
    tensors = {}
    for name, p in state.params.items():
        tensors["param/" + name] = p
    for name in state.params.names():
        tensors["adam_m/" + name] = state.adam.m[name]
        tensors["adam_v/" + name] = state.adam.v[name]
    formats.write_checkpoint(path, _manifest(state), tensors)


def load_checkpoint(path):
    manifest, tensors = formats.read_checkpoint(path)
    try:
        config = RunConfig(**manifest["config"])
        fc = FieldConfig(**manifest["field"])
        dtype = np.dtype(config.dtype)
        params = ParamStore()
        adam = AdamState(step=int(manifest["adam_step"]))
        for name, arr in tensors.items():
            kind, pname = name.split("/", 1)
            if kind == "param":
                params.add(pname, arr.astype(dtype))
            elif kind == "adam_m":
                adam.m[pname] = arr.astype(dtype)
            elif kind == "adam_v":
                adam.v[pname] = arr.astype(dtype)
        if set(adam.m) != set(params.names()) or set(adam.v) != set(params.names()):
            raise ValueError("optimizer moments do not match parameters")
        cw = ChannelWeights(np.asarray(manifest["channel_weights"], dtype=np.float64),
                            int(manifest["channel_weights_updated_at"]))
        best = manifest.get("best_loss")
        state = TrainState(params, adam, int(manifest["iteration"]), cw,
                           Standardizer.from_dict(manifest["standardizer"]), fc, config,
                           list(manifest["train_ids"]), list(manifest["eval_ids"]),
                           np.asarray(manifest["wavelengths_um"], dtype=np.float64),
                           np.asarray(manifest["center"], dtype=np.float64),
                           float(manifest["radius"]),
                           math.inf if best is None else float(best),
                           int(manifest.get("since_best", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise formats.FormatError(f"{path}: checkpoint manifest is incomplete ({exc})") from exc
    from .field import check_params
    check_params(state.params, fc)
    return state


# ---------------------------------------------------------------------------
# training


class Trainer:
    """Single-writer training loop over a loaded dataset.

    Every iteration draws its randomness from ``default_rng([seed, k])``
    so a run resumed from a checkpoint at iteration ``k`` continues
    exactly as the uninterrupted run would.
    """

    def __init__(self, config: RunConfig, data: Dataset, state: TrainState | None = None,
                 log_path=None):
        self.config = config
        self.data = data
        if state is None:
            state = self._fresh_state()
        self.state = state
        self.opts = config.render_options()
        self.schedule = config.schedule()
        self.weights = LossWeights()
        self.log_path = log_path
        self._prepare()

    def _fresh_state(self):
        cfg = self.config
        train_ids, eval_ids = split_views(len(self.data.poses), self.data.poses,
                                          cfg.train_views, cfg.eval_views, cfg.view_seed)
        fc = cfg.field_config(self.data.channels)
        dtype = np.dtype(cfg.dtype)
        params = init_field(fc, np.random.default_rng(cfg.init_seed), dtype=dtype)
        pixels = np.concatenate([self.data.cubes[i].reshape(-1, self.data.channels)
                                 for i in train_ids])
        return TrainState(params, AdamState.for_params(params), 0,
                          ChannelWeights.uniform(self.data.channels), Standardizer.fit(pixels),
                          fc, cfg, train_ids, eval_ids, self.data.wavelengths,
                          np.asarray(self.data.stack_base, dtype=np.float64),
                          float(self.data.bounding_radius))

    def _prepare(self):
        st = self.state
        check_disjoint(st.train_ids, st.eval_ids)
        rays = world_rays(self.data.poses, st.train_ids)
        self.rays = rays.normalized(st.center, st.radius)
        pix = np.concatenate([self.data.cubes[i].reshape(-1, self.data.channels)
                              for i in st.train_ids])
        self.targets = st.standardizer.apply(pix).astype(st.params.dtype)
        self.patch_pool = []
        if self.config.gr and self.config.n_patches > 0:
            p0 = self.data.poses[st.train_ids[0]]
            origins = np.array([self.data.poses[i].origin for i in st.train_ids])
            if len(st.train_ids) == 1:
                origins = np.vstack([origins, st.center + (origins[0] - st.center) * 0.5])
            self.patch_pool = random_patch_cameras(
                self.config.patch_cameras, origins, st.center, st.radius, p0.focal,
                p0.width, p0.height, seed=self.config.init_seed)

    # -- pieces ---------------------------------------------------------

    def _planes(self, rays, k):
        if self.config.anneal and k < self.config.anneal_iters:
            return anneal_planes(k, rays.near, rays.far, self.config.anneal_iters,
                                 self.config.anneal_start)
        return rays.near, rays.far

    def _patch_rays(self, rng):
        cfg = self.config
        s = cfg.patch_size
        picks = rng.integers(0, len(self.patch_pool), size=cfg.n_patches)
        batches = []
        for j in picks:
            cam: CameraPose = self.patch_pool[int(j)]
            r0 = int(rng.integers(0, cam.height - s + 1))
            c0 = int(rng.integers(0, cam.width - s + 1))
            rays = rays_for_camera(cam.c2w, cam.focal, cam.width, cam.height, cam.near, cam.far)
            idx = ((np.arange(r0, r0 + s)[:, None] * cam.width) + np.arange(c0, c0 + s)).ravel()
            batches.append(rays.subset(idx))
        return RayBatch.concat(batches).normalized(self.state.center, self.state.radius)

    def render_standardized(self, rays, rng=None):
        """Fine colours (standardized space) for normalized ``rays``."""
        color, _ = render_image(self.state.params, self.state.field_config, rays, self.opts,
                                rng=rng)
        return color

    def _refresh_weights(self, k, rng):
        self.state.channel_weights = update_channel_weights(
            lambda r: self.render_standardized(r), self.rays, self.targets, k,
            subsample=self.config.awl2_subsample, rng=rng)

    # -- one step -------------------------------------------------------

    def step(self):
        """Run one iteration; returns the log record."""
        st = self.state
        cfg = self.config
        k = st.iteration
        rng = np.random.default_rng([cfg.init_seed, k])
        if cfg.awl2 and cfg.awl2_every > 0 and k > 0 and k % cfg.awl2_every == 0:
            self._refresh_weights(k, np.random.default_rng([cfg.init_seed, k, 1]))
        idx = rng.integers(0, len(self.rays), size=cfg.batch_rays)
        rays = self.rays.subset(idx)
        target = self.targets[idx]
        near, far = self._planes(rays, k)
        toggles = cfg.loss_toggles()
        n = cfg.batch_rays
        value = 0.0
        terms = {}
        lambdas = {}
        for start in range(0, n, cfg.chunk):
            sl = slice(start, start + cfg.chunk)
            sub = rays.subset(sl)
            res = render_rays(st.params, st.field_config, sub, self.opts, rng, near[sl], far[sl])
            out = total_loss(res.color_coarse, res.color_fine, target[sl], k,
                             st.channel_weights, None, toggles, self.weights)
            frac = len(sub) / n
            render_backward(st.params, st.field_config, res, frac * out.d_coarse,
                            frac * out.d_fine)
            value += frac * out.value
            for name, v in out.terms.items():
                terms[name] = terms.get(name, 0.0) + frac * v
            lambdas = out.lambdas
        if cfg.gr and self.patch_pool:
            prays = self._patch_rays(rng)
            pnear, pfar = self._planes(prays, k)
            res = render_rays(st.params, st.field_config, prays, self.opts, rng, pnear, pfar,
                              radiance=False)
            s = cfg.patch_size
            depths = res.mean_depth.reshape(cfg.n_patches, s, s)
            v, g = gr_loss(depths)
            if not np.isfinite(v):
                raise NumericError("loss term 'gr' is not finite")
            lam = lambdas["gr"]
            terms["gr"] = v
            value += lam * v
            render_backward(st.params, st.field_config, res,
                            d_mean_depth=(lam * g).reshape(-1).astype(st.params.dtype))
        if not np.isfinite(value):
            raise NumericError("total loss is not finite")
        lr = self.schedule.lr_at(k)
        adam_step(st.params, st.adam, lr)
        st.iteration = k + 1
        record = {"iter": k, "loss": float(value), "lr": lr}
        record.update({f"loss_{name}": float(v) for name, v in terms.items()})
        record.update({f"lambda_{name}": float(v) for name, v in lambdas.items()})
        return record

    # -- loop -----------------------------------------------------------

    def run(self, out_dir=None, iterations=None, on_record=None):
        """Train until ``iterations`` (default: the config's) and checkpoint.

        On a numeric failure the last good state is written to
        ``last_good.ckpt`` before the error propagates.
        """
        cfg = self.config
        total = cfg.iterations if iterations is None else iterations
        out = Path(out_dir) if out_dir is not None else None
        log = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log = open(out / "train_log.jsonl", "a" if self.state.iteration else "w")
        t0 = time.perf_counter()
        try:
            while self.state.iteration < total:
                try:
                    record = self.step()
                except NumericError:
                    if out is not None:
                        save_checkpoint(out / "last_good.ckpt", self.state)
                    raise
                record["elapsed_s"] = round(time.perf_counter() - t0, 3)
                if log is not None:
                    log.write(json.dumps(record) + "\n")
                    log.flush()
                if on_record is not None:
                    on_record(record)
                k = self.state.iteration
                if out is not None and cfg.checkpoint_every and k % cfg.checkpoint_every == 0 \
                        and k < total:
                    save_checkpoint(out / "latest.ckpt", self.state)
                if self._should_stop(record):
                    break
        finally:
            if log is not None:
                log.close()
        if out is not None:
            save_checkpoint(out / "final.ckpt", self.state)
        return self.state

    def _should_stop(self, record):
        patience = self.config.early_stop_patience
        if patience <= 0:
            return False
        st = self.state
        if record["loss"] < st.best_loss:
            st.best_loss = record["loss"]
            st.since_best = 0
        else:
            st.since_best += 1
        return st.since_best >= patience


def render_cube(state: TrainState, pose: CameraPose, opts: RenderOptions | None = None):
    """Destandardized (H, W, C) render of ``pose`` from a trained state."""
    opts = opts or RenderOptions(state.config.n_coarse, state.config.n_fine, "distance",
                                 state.config.chunk)
    rays = pose.rays().normalized(state.center, state.radius)
    color, _ = render_image(state.params, state.field_config, rays, opts, rng=None)
    cube = state.standardizer.invert(color)
    return cube.reshape(pose.height, pose.width, -1)
