import itertools
import json

import numpy as np
import pytest

from conftest import tiny_settings
from hsinerf import pipeline
from hsinerf.autodiff import ConfigError, NumericError
from hsinerf.field import init_field
from hsinerf.losses import LossWeights
from hsinerf.train import (RunConfig, Trainer, check_disjoint, load_checkpoint, load_dataset,
                           save_checkpoint, split_views)


def _trainer(data_dir, **extra):
    cfg = pipeline.run_config(tiny_settings(**extra))
    return Trainer(cfg, load_dataset(data_dir))


def test_run_config_validation():
    assert RunConfig().batch_rays == 4096
    assert RunConfig().iterations == 10000
    with pytest.raises(ConfigError):
        RunConfig(batch_rays=0)
    with pytest.raises(ConfigError):
        RunConfig(model="huge")


def test_every_toggle_combination_is_valid():
    names = ("sam", "awl2", "md", "gr", "anneal")
    for bits in itertools.product([False, True], repeat=5):
        cfg = RunConfig(**dict(zip(names, bits)))
        fc = cfg.field_config(8)
        assert fc.density_mode == ("per_channel" if cfg.md else "single")


def test_settings_keys_and_conversion():
    s = pipeline.resolve_settings({"train.batch_rays": "128", "loss.sam": "off"})
    assert s["train.batch_rays"] == 128 and s["loss.sam"] is False
    assert s["scene.poses"] == 64 and s["scene.channels"] == 8
    with pytest.raises(ConfigError, match="unknown"):
        pipeline.resolve_settings({"train.batchrays": "1"})
    with pytest.raises(ConfigError):
        pipeline.resolve_settings({"train.batch_rays": "many"})
    with pytest.raises(ConfigError):
        pipeline.resolve_settings({"detect.tau": "1.5"})


def test_split_views_disjoint(tiny_data):
    data = load_dataset(tiny_data)
    train, evals = split_views(12, data.poses, 4, 3, seed=5)
    assert len(train) == 4 and len(evals) == 3
    assert not set(train) & set(evals)
    assert (train, evals) == split_views(12, data.poses, 4, 3, seed=5)
    with pytest.raises(ConfigError):
        split_views(12, data.poses, 13, 0, seed=0)
    with pytest.raises(ConfigError, match="overlap"):
        check_disjoint([1, 2], [2, 3])


def test_zero_iterations_checkpoint_equals_init(tiny_data, tmp_path):
    tr = _trainer(tiny_data, train__iterations=0)
    tr.run(tmp_path)
    state = load_checkpoint(tmp_path / "final.ckpt")
    assert state.iteration == 0
    ref = init_field(state.field_config, np.random.default_rng(0), dtype=np.float32)
    for name, p in ref.items():
        np.testing.assert_array_equal(state.params[name], p)
        assert not state.adam.m[name].any()


def test_seeded_runs_identical(tiny_data, tmp_path):
    for name in ("a", "b"):
        _trainer(tiny_data).run(tmp_path / name)
    for f in ("final.ckpt",):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    la = [json.loads(l)["loss"] for l in (tmp_path / "a" / "train_log.jsonl").open()]
    lb = [json.loads(l)["loss"] for l in (tmp_path / "b" / "train_log.jsonl").open()]
    assert la == lb and len(la) == 3


def test_resume_is_bit_identical(tiny_data, tmp_path):
    extra = dict(train__iterations=6, loss__awl2_every=2, loss__awl2_subsample=32)
    straight = _trainer(tiny_data, **extra)
    losses = []
    straight.run(on_record=lambda r: losses.append(r["loss"]))

    first = _trainer(tiny_data, **extra)
    first.run(iterations=3)
    save_checkpoint(tmp_path / "mid.ckpt", first.state)
    state = load_checkpoint(tmp_path / "mid.ckpt")
    resumed = Trainer(first.config, load_dataset(tiny_data), state)
    tail = []
    resumed.run(on_record=lambda r: tail.append(r["loss"]))
    assert tail == losses[3:]
    for name, p in straight.state.params.items():
        np.testing.assert_array_equal(resumed.state.params[name], p)
    np.testing.assert_array_equal(resumed.state.channel_weights.weights,
                                  straight.state.channel_weights.weights)


def test_all_toggles_off_is_plain_l2(tiny_data):
    tr = _trainer(tiny_data, loss__sam="off", loss__awl2="off", loss__md="off",
                  loss__gr="off", loss__anneal="off")
    rec = tr.step()
    assert rec["loss"] == rec["loss_l2"]
    assert set(k for k in rec if k.startswith("loss_")) == {"loss_l2"}


@pytest.mark.parametrize("toggle,weights", [
    ("sam", LossWeights(lambda_sam=0.0)),
    ("gr", LossWeights(gr_start_value=0.0, gr_end_value=0.0)),
])
def test_enabled_term_with_zero_weight_matches_disabled(tiny_data, toggle, weights):
    off = {"loss__sam": "off", "loss__awl2": "off", "loss__gr": "off", "loss__anneal": "off"}
    base = _trainer(tiny_data, **off)
    on = dict(off)
    on["loss__" + toggle] = "on"
    other = _trainer(tiny_data, **on)
    other.weights = weights
    for _ in range(3):
        a, b = base.step(), other.step()
        assert a["loss"] == b["loss"]
    for name, p in base.state.params.items():
        np.testing.assert_array_equal(other.state.params[name], p)


def test_nan_loss_dumps_last_good(tiny_data, tmp_path):
    tr = _trainer(tiny_data, train__iterations=5)
    tr.run(iterations=2)
    tr.targets[:] = np.nan
    with pytest.raises(NumericError):
        tr.run(tmp_path)
    state = load_checkpoint(tmp_path / "last_good.ckpt")
    assert state.iteration == 2


def test_anneal_shrinks_planes_early(tiny_data):
    tr = _trainer(tiny_data, anneal__iters=10)
    rays = tr.rays.subset(np.arange(5))
    near, far = tr._planes(rays, 0)
    assert np.all(near > rays.near) and np.all(far < rays.far)
    near, far = tr._planes(rays, 10)
    np.testing.assert_array_equal(near, rays.near)
