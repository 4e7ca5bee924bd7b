from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hsinerf import formats
from hsinerf.scene import hemisphere_poses

FIXTURES = Path(__file__).parent / "fixtures"


def test_golden_hsic():
    cube, wl = formats.read_hsic(FIXTURES / "golden.hsic")
    assert cube.shape == (2, 3, 2)
    np.testing.assert_array_equal(wl, [8.0, 11.5])
    np.testing.assert_array_equal(cube.ravel(), np.arange(12) * 0.5)
    assert cube[1, 2, 1] == 5.5


def test_golden_poses():
    poses, radius, base = formats.read_poses(FIXTURES / "poses.json")
    assert radius == 120.0 and base.tolist() == [0, 0, 0]
    assert [p.half for p in poses] == ["top", "bottom"]
    np.testing.assert_array_equal(poses[0].origin, [0, 0, 1000])
    np.testing.assert_array_equal(poses[1].c2w[:3, 3], [1000, 0, 0])
    assert poses[1].file == "cubes/view_001.hsic" and poses[0].width == 32


def test_golden_checkpoint():
    manifest, tensors = formats.read_checkpoint(FIXTURES / "golden.ckpt")
    assert manifest["iteration"] == 7
    np.testing.assert_array_equal(tensors["layer.W"], [[1, 2, 3], [4, 5, 6]])
    np.testing.assert_array_equal(tensors["layer.b"], [-0.5, 0.25])


def test_writer_reproduces_golden_bytes():
    cube, wl = formats.read_hsic(FIXTURES / "golden.hsic")
    assert formats.encode_hsic(cube, wl) == (FIXTURES / "golden.hsic").read_bytes()
    manifest, tensors = formats.read_checkpoint(FIXTURES / "golden.ckpt")
    manifest = {k: v for k, v in manifest.items() if k not in ("tensors", "blob_sha256")}
    assert formats.encode_checkpoint(manifest, tensors) == (FIXTURES / "golden.ckpt").read_bytes()


@pytest.mark.parametrize("name,reader", [("golden.hsic", formats.read_hsic),
                                         ("golden.ckpt", formats.read_checkpoint)])
def test_corrupt_inputs(tmp_path, name, reader):
    data = (FIXTURES / name).read_bytes()
    bad_magic = tmp_path / ("magic_" + name)
    bad_magic.write_bytes(b"XXXX" + data[4:])
    truncated = tmp_path / ("trunc_" + name)
    truncated.write_bytes(data[:-5])
    for path in (bad_magic, truncated):
        with pytest.raises(formats.FormatError, match=path.name):
            reader(path)
    with pytest.raises(OSError):
        reader(tmp_path / "missing")


def test_poses_malformed(tmp_path):
    p = tmp_path / "poses.json"
    p.write_text('{"bounding_radius": 1, "stack_base": [0, 0], "frames": []}')
    with pytest.raises(formats.FormatError):
        formats.read_poses(p)
    p.write_text("{not json")
    with pytest.raises(formats.FormatError):
        formats.read_poses(p)


def test_hsic_header_checks(tmp_path):
    with pytest.raises(ValueError):
        formats.encode_hsic(np.zeros((2, 2, 3)), [1.0, 2.0])
    data = formats.encode_hsic(np.zeros((2, 2, 3)), [1.0, 2.0, 3.0])
    with pytest.raises(formats.FormatError, match="payload"):
        formats.decode_hsic(data + b"\0\0\0\0")


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_hsic_round_trip(cube):
    data = formats.encode_hsic(cube, np.arange(cube.shape[-1]) + 8.0)
    back, wl = formats.decode_hsic(data)
    np.testing.assert_array_equal(back, cube)
    assert wl.tolist() == list(np.arange(cube.shape[-1]) + 8.0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.W": rng.normal(size=(3, 4)).astype(np.float32), "a.b": np.zeros(3, np.float32)}
    formats.write_checkpoint(tmp_path / "x.ckpt", {"k": [1, 2]}, tensors)
    man, back = formats.read_checkpoint(tmp_path / "x.ckpt")
    assert man["k"] == [1, 2]
    for name in tensors:
        np.testing.assert_array_equal(back[name], tensors[name])


def test_poses_round_trip(tmp_path):
    poses = hemisphere_poses(6, seed=2)
    formats.write_poses(tmp_path / "p.json", poses, 120.0, (0, 0, 0))
    back, radius, _ = formats.read_poses(tmp_path / "p.json")
    assert radius == 120.0
    for a, b in zip(poses, back):
        np.testing.assert_array_equal(a.c2w, b.c2w)
        assert (a.focal, a.half, a.file, a.near) == (b.focal, b.half, b.file, b.near)


def test_config_parsing():
    cfg = formats.parse_config_text("# comment\ntrain.batch_rays = 4096\n\nloss.sam=off  # x\n")
    assert cfg == {"train.batch_rays": "4096", "loss.sam": "off"}
    assert formats.parse_config_text(formats.format_config(cfg)) == cfg
    for bad in ("novalue\n", "a = 1\na = 2\n", " = 3\n"):
        with pytest.raises(formats.ConfigSyntaxError):
            formats.parse_config_text(bad)


def test_mask_png_round_trip(tmp_path):
    mask = np.random.default_rng(1).random((7, 9)) > 0.5
    formats.write_mask_png(tmp_path / "m.png", mask)
    np.testing.assert_array_equal(formats.read_mask_png(tmp_path / "m.png"), mask)
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(formats.FormatError):
        formats.read_mask_png(tmp_path / "bad.png")


def test_csv_round_trip(tmp_path):
    rows = [{"image": 3, "psnr": 31.25, "ssim": 0.1 + 0.2}, {"image": 4, "psnr": 99.0}]
    formats.write_csv(tmp_path / "m.csv", rows, ["image", "psnr", "ssim"])
    back = formats.read_csv(tmp_path / "m.csv")
    assert list(back[0]) == ["image", "psnr", "ssim"]
    assert float(back[0]["ssim"]) == 0.1 + 0.2
    assert back[1]["ssim"] == ""


def test_csv_numpy_scalars(tmp_path):
    formats.write_csv(tmp_path / "n.csv", [{"a": np.float64(0.5), "b": np.int64(3)}], ["a", "b"])
    assert (tmp_path / "n.csv").read_text() == "a,b\n0.5,3\n"
