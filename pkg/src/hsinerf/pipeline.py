"""Command implementations: simulate, train, render, detect, evaluate, ablate.

Every command takes a resolved settings mapping (see :func:`resolve_settings`)
plus explicit paths, and communicates with the others only through files.
"""

from __future__ import annotations

import hashlib
import json
import math
import multiprocessing as mp
import resource
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import detect as det
from . import formats
from . import scene as sl
from .autodiff import ConfigError
from .render import look_at
from .train import (TRAIN_KEYS, RunConfig, Trainer, check_disjoint, convert_value,
                    load_checkpoint, load_dataset, render_cube, run_config_from)

# ---------------------------------------------------------------------------
# settings

SCENE_PRESETS = {
    "desk": {"scene.poses": 64, "scene.width": 32, "scene.height": 32, "scene.channels": 8},
    "full": {"scene.poses": 231, "scene.width": 128, "scene.height": 128,
              "scene.channels": 128},
}

PLUME_KEYS = ("peak_density", "air_temp", "source_temp", "cooling_length", "sigma0",
              "spread_rate", "wind_speed", "n_puffs", "rise_rate")

OTHER_DEFAULTS = {
    "scene.preset": "desk",
    "scene.poses": 0,
    "scene.width": 0,
    "scene.height": 0,
    "scene.channels": 0,
    "scene.seed": 0,
    "scene.radius": 1000.0,
    "scene.n_steps": 512,
    "scene.tau_od": sl.DEFAULT_TAU_OD,
    "detect.tau": 0.6,
    "detect.labels": "truth",
    "render.frames": 10,
    "render.falsecolor": True,
    "ablate.views": "10",
    "ablate.arms": "baseline,gr,full",
    "ablate.seeds": "0,1,2",
}
for _k in PLUME_KEYS:
    OTHER_DEFAULTS["plume." + _k] = float("nan")


def _train_defaults():
    d = RunConfig().to_dict()
    return {key: d[attr] for key, attr in TRAIN_KEYS.items()}


def known_keys():
    return set(OTHER_DEFAULTS) | set(TRAIN_KEYS)


def resolve_settings(mapping=None, overrides=None):
    """Merge defaults, a parsed config mapping and explicit overrides.

    Raw string values are converted to the type of the default.  Unknown
    keys raise :class:`ConfigError`.
    """
    defaults = dict(OTHER_DEFAULTS)
    defaults.update(_train_defaults())
    out = dict(defaults)
    for source in (mapping or {}), (overrides or {}):
        for key, raw in source.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            kind = type(defaults[key])
            out[key] = convert_value(raw, kind, key) if isinstance(raw, str) else kind(raw)
    preset = out["scene.preset"]
    if preset not in SCENE_PRESETS:
        raise ConfigError(f"scene.preset must be one of {sorted(SCENE_PRESETS)}")
    for key, value in SCENE_PRESETS[preset].items():
        if out[key] == 0:
            out[key] = value
    if not 0.0 <= out["detect.tau"] <= 1.0:
        raise ConfigError("detect.tau must lie in [0, 1]")
    if out["detect.labels"] not in ("truth", "ace"):
        raise ConfigError("detect.labels must be truth or ace")
    if out["scene.tau_od"] <= 0:
        raise ConfigError("scene.tau_od must be positive")
    run_config(out)
    return out


def load_settings(config_path=None, overrides=None):
    mapping = formats.read_config(config_path) if config_path else {}
    return resolve_settings(mapping, overrides)


def run_config(settings, **extra):
    mapping = {k: v for k, v in settings.items() if k in TRAIN_KEYS}
    cfg = run_config_from(mapping)
    return replace(cfg, **extra) if extra else cfg


# ---------------------------------------------------------------------------
# simulate


def build_scene(settings):
    plume = {k: settings["plume." + k] for k in PLUME_KEYS
             if not math.isnan(settings["plume." + k])}
    if "n_puffs" in plume:
        plume["n_puffs"] = int(plume["n_puffs"])
    return sl.make_default_scene(settings["scene.channels"], settings["scene.seed"], **plume)


def build_poses(settings, scene):
    return sl.hemisphere_poses(settings["scene.poses"], R=settings["scene.radius"],
                               seed=settings["scene.seed"], width=settings["scene.width"],
                               height=settings["scene.height"], target=scene.center,
                               bounding_radius=scene.bounding_radius)


def cmd_simulate(settings, out_dir):
    """Render the analytic scene from every hemisphere pose into ``out_dir``."""
    scene = build_scene(settings)
    poses = build_poses(settings, scene)
    frames = sl.emit_dataset(scene, poses, out_dir, n_steps=settings["scene.n_steps"],
                             tau_od=settings["scene.tau_od"])
    return frames


# ---------------------------------------------------------------------------
# train


def cmd_train(settings, data_dir, out_dir, resume=None, on_record=None):
    """Train a field on ``data_dir``; checkpoints and the JSON-lines log go to ``out_dir``."""
    cfg = run_config(settings, data_dir=str(data_dir), out_dir=str(out_dir))
    data = load_dataset(data_dir)
    state = None
    if resume is not None:
        state = load_checkpoint(resume)
        # the horizon may grow on resume; everything else must match
        keep = ("out_dir", "checkpoint_every", "eval_every", "iterations")
        if state.config.digest(exclude=keep) != cfg.digest(exclude=keep):
            raise ConfigError("resume checkpoint was written with a different configuration")
        state.config = cfg
    trainer = Trainer(cfg, data, state)
    trainer.run(out_dir, on_record=on_record)
    return trainer.state


# ---------------------------------------------------------------------------
# render


def orbit_poses(poses, keyframes, n_frames, target):
    """``n_frames`` poses interpolated on the sphere through the keyframe poses.

    Directions from ``target`` are slerped and distances interpolated
    linearly between consecutive keyframes; intrinsics come from the first
    keyframe.
    """
    if len(keyframes) < 2:
        raise ConfigError("an orbit needs at least two keyframes")
    if n_frames < 2:
        raise ConfigError("an orbit needs at least two frames")
    target = np.asarray(target, dtype=np.float64)
    keys = [poses[i] for i in keyframes]
    offsets = [p.origin - target for p in keys]
    segs = len(keys) - 1
    out = []
    for f in range(n_frames):
        u = f / (n_frames - 1) * segs
        s = min(int(u), segs - 1)
        a = u - s
        p, q = offsets[s], offsets[s + 1]
        rp, rq = np.linalg.norm(p), np.linalg.norm(q)
        up, uq = p / rp, q / rq
        omega = math.acos(float(np.clip(up @ uq, -1.0, 1.0)))
        if omega < 1e-9:
            d = up
        else:
            d = (math.sin((1 - a) * omega) * up + math.sin(a * omega) * uq) / math.sin(omega)
        origin = target + ((1 - a) * rp + a * rq) * d
        k0 = keys[0]
        dist = (1 - a) * rp + a * rq
        radius = 0.5 * (k0.far - k0.near)
        out.append(sl.CameraPose(look_at(origin, target), k0.focal, k0.width, k0.height,
                                 dist - radius, dist + radius,
                                 "top" if d[2] >= 0.5 else "bottom", f"frame_{f:04d}.hsic"))
    return out


def cmd_render(checkpoint, out_dir, poses_path=None, keyframes=None, n_frames=10,
               wavelengths=None, falsecolor=True):
    """Render cubes (and false-colour PNGs) for a pose file or an orbit path."""
    state = load_checkpoint(checkpoint)
    if wavelengths is not None and len(wavelengths) != state.field_config.channels:
        raise ConfigError(f"checkpoint has {state.field_config.channels} channels, "
                          f"{len(wavelengths)} wavelengths requested")
    if poses_path is None:
        poses_path = Path(state.config.data_dir) / "poses.json"
    poses, _, _ = formats.read_poses(poses_path)
    if keyframes:
        poses = orbit_poses(poses, keyframes, n_frames, state.center)
    out = Path(out_dir)
    written = []
    for i, pose in enumerate(poses):
        cube = render_cube(state, pose)
        name = Path(pose.file).name or f"frame_{i:04d}.hsic"
        formats.write_hsic(out / "cubes" / name, cube, state.wavelengths)
        if falsecolor:
            rgb = det.falsecolor(cube, state.wavelengths)
            formats.write_png(out / "falsecolor" / (Path(name).stem + ".png"), rgb)
        written.append(out / "cubes" / name)
    return written


# ---------------------------------------------------------------------------
# detect


def _read_spectrum(path):
    doc = formats.read_json(path)
    try:
        return np.asarray(doc["gas_absorption"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise formats.FormatError(f"{path}: no gas_absorption list ({exc})") from exc


DETECT_COLUMNS = ["image", "auc", "tpr", "fpr", "positives"]


def cmd_detect(cube_paths, spectrum, out_dir, tau=0.6, mask_dir=None, notice=print):
    """ACE maps and masks for each cube; metric rows when reference masks exist.

    ``spectrum`` is an absorption vector or a path to ``spectra.json``.
    """
    target = _read_spectrum(spectrum) if isinstance(spectrum, (str, Path)) else \
        np.asarray(spectrum, dtype=np.float64)
    out = Path(out_dir)
    rows = []
    missing = []
    for path in cube_paths:
        path = Path(path)
        cube, _ = formats.read_hsic(path)
        if cube.shape[-1] != target.size:
            raise ConfigError(f"{path}: {cube.shape[-1]} channels but the target spectrum "
                              f"has {target.size}")
        res = det.detect(cube, target, tau)
        (out / "maps").mkdir(parents=True, exist_ok=True)
        np.save(out / "maps" / (path.stem + ".npy"), res.scores)
        formats.write_mask_png(out / "masks" / (path.stem + ".png"), res.mask)
        ref_path = Path(mask_dir) / (path.stem + ".png") if mask_dir else None
        if ref_path is None or not ref_path.exists():
            missing.append(path.stem)
            continue
        ref = formats.read_mask_png(ref_path)
        rows.append(_detection_row(path.stem, res, ref))
    if missing:
        notice(f"notice: no reference mask for {len(missing)} image(s); metrics omitted "
               f"for those")
    if rows:
        formats.write_csv(out / "detect_metrics.csv", rows, DETECT_COLUMNS)
    return rows


def _detection_row(name, res, ref):
    row = {"image": name, "positives": int(ref.sum())}
    row["auc"] = _safe_auc(res.scores, ref)
    try:
        row["tpr"], row["fpr"] = det.tpr_fpr(res.mask, ref)
    except ValueError:
        row["tpr"], row["fpr"] = float("nan"), float(np.mean(res.mask))
    return row


def _safe_auc(scores, labels):
    try:
        return det.roc_auc(scores, labels)
    except ValueError:
        return float("nan")


# ---------------------------------------------------------------------------
# evaluate

METRIC_COLUMNS = ["image", "file", "psnr", "ssim", "auc", "tpr", "fpr"]
SUMMARY_METRICS = ("psnr", "ssim", "auc", "tpr", "fpr")


def reference_masks(data, ids, labels, tau=0.6):
    """Truth masks from the dataset, or ACE masks of the ground-truth cubes."""
    out = {}
    for i in ids:
        if labels == "truth":
            out[i] = formats.read_mask_png(data.mask_path(i))
        else:
            out[i] = det.detect(data.cubes[i], data.absorption, tau).mask
    return out


def evaluate_cubes(renders, truths, refs, target, names, files, tau=0.6):
    """Metric rows for paired rendered / true cubes.

    PSNR peak and SSIM data range are both the value range of the
    ground-truth set.
    """
    lo = min(float(t.min()) for t in truths)
    hi = max(float(t.max()) for t in truths)
    peak = hi - lo if hi > lo else 1.0
    rows = []
    for render, truth, ref, name, file in zip(renders, truths, refs, names, files):
        res = det.detect(render, target, tau)
        row = {"image": name, "file": file,
               "psnr": det.psnr(render, truth, peak),
               "ssim": det.ssim(render, truth, peak)}
        d = _detection_row(name, res, ref)
        row.update({k: d[k] for k in ("auc", "tpr", "fpr")})
        rows.append(row)
    return rows


def summarize(rows, metrics=SUMMARY_METRICS):
    """mean, sample sd, min and max of each metric, ignoring NaNs."""
    out = {}
    for m in metrics:
        v = np.array([float(r[m]) for r in rows], dtype=np.float64)
        v = v[np.isfinite(v)]
        if v.size == 0:
            out[m] = {"mean": float("nan"), "sd": float("nan"), "min": float("nan"),
                      "max": float("nan"), "n": 0}
            continue
        out[m] = {"mean": float(np.mean(v)),
                  "sd": float(np.std(v, ddof=1)) if v.size > 1 else 0.0,
                  "min": float(np.min(v)), "max": float(np.max(v)), "n": int(v.size)}
    return out


def format_summary(summary, title="evaluation"):
    lines = [f"{title}", f"{'metric':<6} {'mean':>10} {'sd':>10} {'min':>10} {'max':>10}  n"]
    for m, s in summary.items():
        lines.append(f"{m:<6} {s['mean']:>10.4f} {s['sd']:>10.4f} {s['min']:>10.4f} "
                     f"{s['max']:>10.4f}  {s['n']}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(checkpoint, data_dir, out_dir, labels="truth", tau=0.6, eval_ids=None,
                 state=None):
    """Render the eval views of a checkpoint and write metrics.csv and summary files."""
    state = state if state is not None else load_checkpoint(checkpoint)
    data = load_dataset(data_dir)
    ids = list(state.eval_ids if eval_ids is None else eval_ids)
    check_disjoint(state.train_ids, ids)
    if not ids:
        raise ConfigError("no evaluation views")
    if data.absorption is None:
        raise formats.FormatError(f"{data_dir}: spectra.json with gas_absorption is required")
    refs = reference_masks(data, ids, labels, tau)
    renders = [render_cube(state, data.poses[i]) for i in ids]
    rows = evaluate_cubes(renders, [data.cubes[i] for i in ids], [refs[i] for i in ids],
                          data.absorption, [str(i) for i in ids],
                          [data.poses[i].file for i in ids], tau)
    summary = summarize(rows)
    out = Path(out_dir)
    formats.write_csv(out / "metrics.csv", rows, METRIC_COLUMNS)
    formats.write_json(out / "summary.json", {"labels": labels, "tau": tau, "summary": summary})
    text = format_summary(summary, f"evaluation of {len(ids)} views ({labels} labels)")
    (out / "summary.txt").write_text(text)
    return rows, summary


# ---------------------------------------------------------------------------
# ablate

ABLATION_COLUMNS = ["cell", "views", "arm", "seed", "iterations", "psnr", "ssim", "auc",
                    "tpr", "fpr", "seconds", "sec_per_iter", "peak_rss_mb"]


def arm_toggles(arm):
    """``baseline``, ``full`` or a ``+``-joined list of enabled toggles."""
    names = ("sam", "awl2", "md", "gr", "anneal")
    if arm == "baseline":
        return {n: False for n in names}
    if arm == "full":
        return {n: True for n in names}
    parts = arm.split("+")
    bad = [p for p in parts if p not in names]
    if bad:
        raise ConfigError(f"unknown toggle(s) {bad} in ablation arm {arm!r}")
    return {n: n in parts for n in names}


def _int_list(text, key):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers") from None


def ablation_cells(settings, data_fingerprint=""):
    views = _int_list(settings["ablate.views"], "ablate.views")
    seeds = _int_list(settings["ablate.seeds"], "ablate.seeds")
    arms = [a.strip() for a in settings["ablate.arms"].split(",") if a.strip()]
    cells = []
    for v in views:
        for arm in arms:
            toggles = arm_toggles(arm)
            for s in seeds:
                cfg = run_config(settings, train_views=v, init_seed=s, view_seed=s, **toggles)
                digest = cfg.digest(exclude=("out_dir", "data_dir", "checkpoint_every",
                                             "eval_every"))
                key = hashlib.sha256((digest + data_fingerprint).encode()).hexdigest()[:12]
                cells.append({"cell": key, "views": v, "arm": arm, "seed": s, "config": cfg})
    return cells


def _run_cell(cell, data_dir, cell_dir, labels, tau):
    cfg = replace(cell["config"], data_dir=str(data_dir), out_dir=str(cell_dir))
    data = load_dataset(data_dir)
    t0 = time.perf_counter()
    trainer = Trainer(cfg, data)
    trainer.run(cell_dir)
    seconds = time.perf_counter() - t0
    rows, summary = cmd_evaluate(None, data_dir, cell_dir, labels, tau, state=trainer.state)
    rss_kb = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    record = {"cell": cell["cell"], "views": cell["views"], "arm": cell["arm"],
              "seed": cell["seed"], "iterations": cfg.iterations,
              "seconds": round(seconds, 3),
              "sec_per_iter": round(seconds / max(cfg.iterations, 1), 6),
              "peak_rss_mb": round(rss_kb / 1024.0, 1)}
    for m in SUMMARY_METRICS:
        record[m] = summary[m]["mean"]
    formats.write_json(Path(cell_dir) / "cell.json", record)


def cmd_ablate(settings, data_dir, out_dir, isolate=True, notice=print):
    """Train and evaluate every cell of the grid; finished cells are reused.

    Each cell runs in a fresh process when ``isolate`` is set so its peak
    resident memory is measured on its own.  Rows are merged into
    ``ablation.csv`` in grid order.
    """
    out = Path(out_dir)
    poses_file = Path(data_dir) / "poses.json"
    try:
        fingerprint = hashlib.sha256(poses_file.read_bytes()).hexdigest()
    except OSError as exc:
        raise OSError(f"cannot read {poses_file}: {exc}") from exc
    cells = ablation_cells(settings, fingerprint)
    labels, tau = settings["detect.labels"], settings["detect.tau"]
    rows = []
    for cell in cells:
        cell_dir = out / "cells" / cell["cell"]
        done = cell_dir / "cell.json"
        if not done.exists():
            notice(f"cell {cell['cell']}: {cell['views']} views, {cell['arm']}, "
                   f"seed {cell['seed']}")
            if isolate:
                ctx = mp.get_context("spawn")
                proc = ctx.Process(target=_run_cell,
                                   args=(cell, data_dir, cell_dir, labels, tau))
                proc.start()
                proc.join()
                if proc.exitcode != 0 or not done.exists():
                    raise RuntimeError(f"ablation cell {cell['cell']} failed "
                                       f"(exit {proc.exitcode})")
            else:
                _run_cell(cell, data_dir, cell_dir, labels, tau)
        rows.append(formats.read_json(done))
    formats.write_csv(out / "ablation.csv", rows, ABLATION_COLUMNS)
    return rows

