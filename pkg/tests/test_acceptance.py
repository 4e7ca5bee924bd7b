"""Acceptance criteria 1 to 10.

Each test records one PASS or FAIL line, printed in the terminal summary.
Criteria 7 and 8 first time a few iterations at their stated configuration;
when the projected runtime exceeds the stated budget they fail with the
projection.  ``HSINERF_RUN_LONG=1`` runs them in full regardless.
"""

import contextlib
import math
import os
import shutil
import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE, TINY, tiny_settings
from hsinerf import detect as det
from hsinerf import formats, pipeline
from hsinerf import scene as sl
from hsinerf.autodiff import grad_check, lr_at
from hsinerf.cli import main
from hsinerf.field import FieldConfig, init_field, tie_density
from hsinerf.losses import ChannelWeights, LossToggles, lambda_awl2, lambda_gr, total_loss
from hsinerf.render import (RayBatch, RenderOptions, anneal_factor, anneal_planes, composite,
                            composite_md, render_backward, render_rays, sample_intervals,
                            stratified_samples)
from hsinerf.train import Trainer, load_checkpoint, load_dataset, save_checkpoint

RUN_LONG = os.environ.get("HSINERF_RUN_LONG") == "1"


@contextlib.contextmanager
def criterion(n):
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        msg = str(exc).strip().splitlines()
        ACCEPTANCE[n] = (False, (info["detail"] + " | " if info["detail"] else "") +
                         (msg[0] if msg else type(exc).__name__))
        raise
    ACCEPTANCE[n] = (True, info["detail"])


def _toy_rays(n, seed):
    rng = np.random.default_rng(seed)
    o = rng.normal(0, 0.2, size=(n, 3)) + np.array([0, 0, 2.0])
    d = rng.normal(0, 0.2, size=(n, 3)) + np.array([0, 0, -1.0])
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return RayBatch(o, d, 1.0, 3.0)


def test_c1_gradient_integrity():
    with criterion(1) as info:
        t0 = time.perf_counter()
        cfg = FieldConfig(channels=3, base_depth=2, base_width=8, head_depth=1, head_width=6,
                          l_pos=2, l_dir=1, skip_layer=1, density_bias=0.5,
                          density_mode="per_channel")
        params = init_field(cfg, np.random.default_rng(0), dtype=np.float64)
        opts = RenderOptions(n_coarse=8, n_fine=8)
        rays = _toy_rays(4, 1)
        patch = _toy_rays(4, 2)
        # annealed planes for the ray batch, full planes for the patch
        near, far = anneal_planes(500, rays.near, rays.far, 2000)
        first = render_rays(params, cfg, rays, opts, np.random.default_rng(3), near, far)
        pfirst = render_rays(params, cfg, patch, opts, np.random.default_rng(4))
        rng = np.random.default_rng(5)
        target = rng.normal(size=(4, 3))
        cw = ChannelWeights(np.array([0.2, 0.3, 0.5]))
        k = 15000

        def loss(p):
            res = render_rays(p, cfg, rays, opts, t_coarse=first.t_coarse, t_fine=first.t_fine)
            pres = render_rays(p, cfg, patch, opts, t_coarse=pfirst.t_coarse,
                               t_fine=pfirst.t_fine)
            out = total_loss(res.color_coarse, res.color_fine, target, k, cw,
                             pres.mean_depth.reshape(1, 2, 2), LossToggles())
            assert set(out.terms) == {"l2", "sam", "awl2", "gr"}
            assert all(out.lambdas[name] > 0 for name in ("sam", "awl2", "gr"))
            p.zero_grad()
            render_backward(p, cfg, res, out.d_coarse, out.d_fine)
            render_backward(p, cfg, pres, d_mean_depth=out.d_patch_depth.reshape(-1))
            return out.value, {n: g.copy() for n, g in p.grads.items()}

        err, _ = grad_check(loss, params)
        elapsed = time.perf_counter() - t0
        info["detail"] = f"max rel err {err:.2e}, {elapsed:.1f} s"
        assert err < 1e-4
        assert elapsed < 10


def _random_scene_rays(n, seed):
    rng = np.random.default_rng(seed)
    poses = sl.hemisphere_poses(16, seed=seed)
    picks = []
    for _ in range(n):
        p = poses[rng.integers(len(poses))]
        k = int(rng.integers(p.width * p.height))
        picks.append(p.rays().subset(slice(k, k + 1)))
    return RayBatch.concat(picks)


def test_c2_renderer_oracle_equivalence():
    with criterion(2) as info:
        t0 = time.perf_counter()
        scene = sl.make_default_scene(8, 0)
        rays = _random_scene_rays(100, 2)
        n = 1024
        oracle = sl.oracle_render(scene, rays, n)
        t = sl.oracle_samples(rays, n)
        pts = rays.origins[:, None, :] + t[..., None] * rays.dirs[:, None, :]
        sigma, rad = sl.scene_fields(scene, pts)
        ours, _, _ = composite_md(sigma, rad, sample_intervals(t, rays.far))
        nz = oracle != 0
        # rays that miss everything must come out exactly zero
        assert np.all(ours[~nz] == 0)
        oracle_err = float(np.max(np.abs(ours[nz] - oracle[nz]) / np.abs(oracle[nz])))

        segs = [(1.0, 3.0, 0.5, 2.0), (3.0, 4.2, 2.0, 5.0), (6.0, 6.5, 8.0, 1.0)]
        exact, T = 0.0, 1.0
        for a, b, s, c in segs:
            exact += T * c * (1 - math.exp(-s * (b - a)))
            T *= math.exp(-s * (b - a))
        ts = stratified_samples(np.zeros(1), np.full(1, 8.0), n)
        sv = np.zeros_like(ts)
        cv = np.zeros_like(ts)
        for a, b, s, c in segs:
            inside = (ts >= a) & (ts < b)
            sv[inside], cv[inside] = s, c
        col, _ = composite(sv, cv[..., None], sample_intervals(ts, np.full(1, 8.0)))
        closed_err = abs(col[0, 0] - exact) / exact
        elapsed = time.perf_counter() - t0
        info["detail"] = (f"oracle rel err {oracle_err:.1e}, closed-form rel err "
                          f"{closed_err:.1e}, {elapsed:.1f} s")
        assert oracle_err < 1e-6
        assert closed_err < 1e-3
        assert elapsed < 30


def test_c3_md_tying():
    with criterion(3) as info:
        single = FieldConfig(channels=4, density_mode="single", base_depth=2, base_width=16,
                             head_depth=1, head_width=8, l_pos=3, l_dir=2, skip_layer=1)
        params = init_field(single, np.random.default_rng(5), dtype=np.float64)
        tied, per = tie_density(params, single)
        assert per.density_mode == "per_channel"
        rays = _toy_rays(1000, 6)
        opts = RenderOptions(n_coarse=16, n_fine=16)
        a = render_rays(params, single, rays, opts, rng=np.random.default_rng(7), grad=False)
        b = render_rays(tied, per, rays, opts, rng=np.random.default_rng(7), grad=False)
        rel = np.abs(b.color_fine - a.color_fine) / np.maximum(np.abs(a.color_fine), 1e-300)
        info["detail"] = f"max rel diff {rel.max():.1e} over 1000 rays"
        assert rel.max() <= 1e-12
        np.testing.assert_allclose(b.color_coarse, a.color_coarse, rtol=1e-12, atol=0)


def test_c4_schedules():
    with criterion(4) as info:
        assert lr_at(0) == 1e-5
        assert lr_at(2000) == 1e-3
        assert lambda_awl2(5000) == 0
        assert lambda_awl2(25000) == 100
        assert lambda_gr(0) == 10000
        assert lambda_gr(6000) == 1
        assert anneal_factor(0, 2000) == 0.85
        assert anneal_factor(2000, 2000) == 1.0
        info["detail"] = "all eight values exact"


def test_c5_ace():
    with criterion(5) as info:
        rng = np.random.default_rng(1)
        cube = rng.normal(size=(50, 4))
        bg = det.fit_background(cube)
        t = np.array([1.0, 0.5, -0.2, 0.3])
        collinear = det.ace_map((bg.mean + 3 * t)[None], t, bg)[0]
        L = np.linalg.cholesky(bg.inv)
        wt = L.T @ t
        v = rng.normal(size=4)
        v -= (v @ wt) / (wt @ wt) * wt
        ortho = det.ace_map((bg.mean + np.linalg.solve(L.T, v))[None], t, bg)[0]
        cov = np.diag([1.0, 4.0])
        hand_bg = det.BackgroundModel(np.zeros(2), cov, cov, np.linalg.inv(cov), 0)
        hand = det.ace_map(np.array([[1.0, 1.0]]), np.array([1.0, 0.0]), hand_bg)[0]
        auc = det.roc_auc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1]))
        info["detail"] = f"collinear {collinear:.12f}, orthogonal {ortho:.1e}, hand {hand:.12f}, " \
                         f"auc {auc}"
        assert abs(collinear - 1.0) <= 1e-10
        assert abs(ortho) <= 1e-10
        assert abs(hand - 0.8) <= 1e-10
        assert auc == 0.75


def test_c6_oracle_detection():
    with criterion(6) as info:
        t0 = time.perf_counter()
        settings = pipeline.resolve_settings()
        scene = pipeline.build_scene(settings)
        poses = pipeline.build_poses(settings, scene)
        aucs = []
        for pose in poses:
            mask = sl.plume_truth_mask(scene, pose, settings["scene.tau_od"])
            if not mask.any() or mask.all():
                continue
            cube = sl.render_view(scene, pose, settings["scene.n_steps"])
            assert cube.shape == (32, 32, 8)
            aucs.append(det.roc_auc(det.detect(cube, scene.absorption).scores, mask))
            if len(aucs) == 16:
                break
        elapsed = time.perf_counter() - t0
        info["detail"] = f"{len(aucs)} images, min AUC {min(aucs):.4f}, {elapsed:.1f} s"
        assert len(aucs) == 16
        assert min(aucs) >= 0.99
        assert elapsed < 60


@pytest.fixture(scope="module")
def desk_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    pipeline.cmd_simulate(pipeline.resolve_settings(), out)
    return out


def _seconds_per_iter(settings, data, steps=3):
    trainer = Trainer(pipeline.run_config(settings), data)
    trainer.step()
    t0 = time.perf_counter()
    for _ in range(steps - 1):
        trainer.step()
    return (time.perf_counter() - t0) / (steps - 1)


def test_c7_desk_end_to_end(desk_data, tmp_path):
    budget = 30 * 60
    with criterion(7) as info:
        settings = pipeline.resolve_settings({"views.train": "20", "views.eval": "8"})
        cfg = pipeline.run_config(settings)
        assert (cfg.iterations, cfg.batch_rays) == (10000, 4096)
        assert all(cfg.toggles.values())
        if not RUN_LONG:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                spi = _seconds_per_iter(settings, load_dataset(desk_data))
            projected = spi * cfg.iterations
            info["detail"] = (f"{spi:.2f} s/iter on {os.cpu_count()} cpu(s), projected "
                              f"{projected / 3600:.1f} h vs {budget / 60:.0f} min budget")
            if projected > budget:
                pytest.fail("projected runtime exceeds the budget; set HSINERF_RUN_LONG=1 "
                            "to run the full training anyway")
        t0 = time.perf_counter()
        state = pipeline.cmd_train(settings, desk_data, tmp_path / "run")
        _, summary = pipeline.cmd_evaluate(None, desk_data, tmp_path / "eval", "truth",
                                           settings["detect.tau"], state=state)
        elapsed = time.perf_counter() - t0
        psnr, auc = summary["psnr"]["mean"], summary["auc"]["mean"]
        info["detail"] = f"PSNR {psnr:.2f} dB, AUC {auc:.3f}, {elapsed / 60:.1f} min"
        assert psnr >= 28
        assert auc >= 0.85
        assert elapsed <= budget


def _medians(rows, views, arm):
    sel = [r for r in rows if r["views"] == views and r["arm"] == arm]
    return (float(np.median([r["psnr"] for r in sel])),
            float(np.median([r["auc"] for r in sel])))


def test_c8_ablation_trend(desk_data, tmp_path):
    budget = 4 * 3600
    grids = [("10", "baseline,gr,full"), ("40", "baseline,full")]
    with criterion(8) as info:
        base = {"ablate.seeds": "0,1,2"}
        if not RUN_LONG:
            data = load_dataset(desk_data)
            cost = {}
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                for arm in ("baseline", "gr", "full"):
                    s = pipeline.resolve_settings({"views.train": "10",
                                                   **{f"loss.{k}": str(v) for k, v in
                                                      pipeline.arm_toggles(arm).items()}})
                    cost[arm] = _seconds_per_iter(s, data)
            iters = pipeline.run_config(pipeline.resolve_settings()).iterations
            projected = sum(3 * cost[a] * iters for _, arms in grids for a in arms.split(","))
            info["detail"] = (f"s/iter baseline {cost['baseline']:.2f}, gr {cost['gr']:.2f}, "
                              f"full {cost['full']:.2f}; projected {projected / 3600:.0f} h vs "
                              f"{budget / 3600:.0f} h budget")
            if projected > budget:
                pytest.fail("projected runtime exceeds the budget; set HSINERF_RUN_LONG=1 "
                            "to run the full grid anyway")
        t0 = time.perf_counter()
        rows = []
        for views, arms in grids:
            s = pipeline.resolve_settings({**base, "ablate.views": views, "ablate.arms": arms})
            rows += pipeline.cmd_ablate(s, desk_data, tmp_path, notice=lambda m: None)
        elapsed = time.perf_counter() - t0
        full, gr, baseline = (_medians(rows, 10, a) for a in ("full", "gr", "baseline"))
        full40, base40 = _medians(rows, 40, "full"), _medians(rows, 40, "baseline")
        info["detail"] = (f"10 views PSNR full/gr/base {full[0]:.2f}/{gr[0]:.2f}/"
                          f"{baseline[0]:.2f}, AUC {full[1]:.3f}/{gr[1]:.3f}/{baseline[1]:.3f}; "
                          f"40 views {full40[0]:.2f}/{base40[0]:.2f}; {elapsed / 3600:.1f} h")
        assert full[0] >= gr[0] >= baseline[0]
        assert full[1] >= gr[1] >= baseline[1]
        assert full[0] - baseline[0] >= 1.0
        assert full[1] - baseline[1] >= 0.05
        assert full40[0] >= base40[0] - 0.5
        assert elapsed <= budget


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def test_c9_determinism_and_resume(tmp_path):
    with criterion(9) as info:
        s = tiny_settings()
        root = tmp_path / "rerun"
        outputs = []
        for _ in range(2):
            # paths are part of the run record, so both runs use the same ones
            if root.exists():
                shutil.rmtree(root)
            pipeline.cmd_simulate(s, root / "data")
            pipeline.cmd_train(s, root / "data", root / "run")
            pipeline.cmd_evaluate(root / "run" / "final.ckpt", root / "data", root / "eval")
            outputs.append(_tree_bytes(root))
        first, second = outputs
        assert first.keys() == second.keys()
        assert sum(k.startswith("data") for k in first) > 12
        for f in first:
            if f.endswith(".jsonl"):
                # wall-clock column aside, the log is identical
                a, b = ([l.rsplit(', "elapsed_s"', 1)[0] for l in x[f].decode().splitlines()]
                        for x in outputs)
                assert a == b
            else:
                assert first[f] == second[f], f

        long = tiny_settings(train__iterations=150, loss__awl2_every=40,
                             loss__awl2_subsample=64)
        data = load_dataset(root / "data")
        cfg = pipeline.run_config(long, data_dir=str(root / "data"))
        straight = []
        Trainer(cfg, data).run(on_record=lambda r: straight.append(r["loss"]))
        head = Trainer(cfg, data)
        head.run(iterations=50)
        save_checkpoint(tmp_path / "mid.ckpt", head.state)
        tail = []
        pipeline.cmd_train(long, root / "data", tmp_path / "resumed",
                           resume=tmp_path / "mid.ckpt", on_record=lambda r: tail.append(r["loss"]))
        info["detail"] = f"byte-identical reruns; {len(tail)} resumed iterations match"
        assert len(tail) == 100
        assert tail == straight[50:]


def test_c10_format_conformance(tmp_path):
    with criterion(10) as info:
        from pathlib import Path
        fixtures = Path(__file__).parent / "fixtures"
        cube, wl = formats.read_hsic(fixtures / "golden.hsic")
        assert cube.shape == (2, 3, 2) and wl.tolist() == [8.0, 11.5]
        poses, radius, _ = formats.read_poses(fixtures / "poses.json")
        assert len(poses) == 2 and radius == 120.0
        manifest, tensors = formats.read_checkpoint(fixtures / "golden.ckpt")
        assert manifest["iteration"] == 7 and tensors["layer.W"].shape == (2, 3)

        raw = (fixtures / "golden.hsic").read_bytes()
        (tmp_path / "magic.hsic").write_bytes(b"HSIC\0\0\0\2" + raw[8:])
        (tmp_path / "short.hsic").write_bytes(raw[:-3])
        spectrum = tmp_path / "spectra.json"
        formats.write_json(spectrum, {"gas_absorption": [1.0, 0.5]})
        codes = [main(["detect", str(tmp_path / n), "--spectrum", str(spectrum),
                       "--out", str(tmp_path / "out")]) for n in ("magic.hsic", "short.hsic")]
        raw = (fixtures / "golden.ckpt").read_bytes()
        (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
        (tmp_path / "short.ckpt").write_bytes(raw[:-3])
        codes += [main(["render", str(tmp_path / n), "--out", str(tmp_path / "r")])
                  for n in ("magic.ckpt", "short.ckpt")]
        info["detail"] = f"fixtures parse; corrupt inputs exit {codes}"
        assert codes == [3, 3, 3, 3]
