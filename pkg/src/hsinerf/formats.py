"""On-disk formats: HSI cubes, pose manifests, checkpoints, configs, masks, CSV.

``.hsic`` cube layout::

    b"HSIC\\0\\0\\0\\1"                  8-byte magic
    uint32 little-endian            header length in bytes
    UTF-8 JSON header               {height, width, channels, wavelengths_um,
                                     layout: "row-major-HWC", dtype: "f32le"}
    float32 little-endian payload   H * W * C values

``.ckpt`` layout::

    b"HSCK\\0\\0\\0\\1"                  8-byte magic
    uint64 little-endian            manifest length
    UTF-8 JSON manifest             includes "tensors": [{name, shape, offset,
                                     nbytes}] and "blob_sha256"
    float32 little-endian blob
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

HSIC_MAGIC = b"HSIC\x00\x00\x00\x01"
CKPT_MAGIC = b"HSCK\x00\x00\x00\x01"


class FormatError(OSError):
    """A file exists but does not parse as the expected format."""


def _write_bytes(path, data):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _read_bytes(path):
    path = Path(path)
    try:
        return path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc


def _dumps(obj):
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_json(path, obj):
    _write_bytes(path, (json.dumps(obj, indent=1) + "\n").encode())


def read_json(path):
    try:
        return json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# cubes


def encode_hsic(cube, wavelengths):
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise ValueError("cube must be H x W x C")
    h, w, c = cube.shape
    wl = [float(v) for v in np.asarray(wavelengths).ravel()]
    if len(wl) != c:
        raise ValueError(f"{len(wl)} wavelengths for {c} channels")
    header = _dumps({"height": h, "width": w, "channels": c, "wavelengths_um": wl,
                     "layout": "row-major-HWC", "dtype": "f32le"}).encode("utf-8")
    payload = np.ascontiguousarray(cube, dtype="<f4").tobytes()
    return HSIC_MAGIC + struct.pack("<I", len(header)) + header + payload


def decode_hsic(data, source="<bytes>"):
    if len(data) < 12 or data[:8] != HSIC_MAGIC:
        raise FormatError(f"{source}: bad magic, not an HSIC cube")
    (n,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + n:
        raise FormatError(f"{source}: truncated header")
    try:
        header = json.loads(data[12:12 + n].decode("utf-8"))
        h, w, c = int(header["height"]), int(header["width"]), int(header["channels"])
        wl = np.asarray(header["wavelengths_um"], dtype=np.float64)
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: malformed header ({exc})") from exc
    if header.get("layout") != "row-major-HWC" or header.get("dtype") != "f32le":
        raise FormatError(f"{source}: unsupported layout/dtype")
    if len(wl) != c:
        raise FormatError(f"{source}: header lists {len(wl)} wavelengths for {c} channels")
    payload = data[12 + n:]
    expected = h * w * c * 4
    if len(payload) != expected:
        raise FormatError(f"{source}: payload has {len(payload)} bytes, expected {expected}")
    cube = np.frombuffer(payload, dtype="<f4").reshape(h, w, c).astype(np.float64)
    return cube, wl


def write_hsic(path, cube, wavelengths):
    _write_bytes(path, encode_hsic(cube, wavelengths))


def read_hsic(path):
    """Return ``(cube float64 (H, W, C), wavelengths_um)``."""
    return decode_hsic(_read_bytes(path), str(path))


# ---------------------------------------------------------------------------
# poses


def write_poses(path, poses, bounding_radius, stack_base):
    frames = []
    for p in poses:
        frames.append({
            "file": p.file,
            "camera_to_world": [float(v) for v in np.asarray(p.c2w).ravel()],
            "focal_px": float(p.focal),
            "width": int(p.width),
            "height": int(p.height),
            "near": float(p.near),
            "far": float(p.far),
            "half": p.half,
        })
    write_json(path, {"bounding_radius": float(bounding_radius),
                      "stack_base": [float(v) for v in stack_base],
                      "frames": frames})


def read_poses(path):
    """Return ``(poses, bounding_radius, stack_base)``."""
    from .scene import CameraPose

    doc = read_json(path)
    try:
        poses = []
        for f in doc["frames"]:
            m = np.asarray(f["camera_to_world"], dtype=np.float64)
            if m.size != 16:
                raise ValueError("camera_to_world needs 16 numbers")
            if f["half"] not in ("top", "bottom"):
                raise ValueError(f"half must be top or bottom, got {f['half']!r}")
            poses.append(CameraPose(m.reshape(4, 4), float(f["focal_px"]), int(f["width"]),
                                    int(f["height"]), float(f["near"]), float(f["far"]),
                                    f["half"], f["file"]))
        radius = float(doc["bounding_radius"])
        base = np.asarray(doc["stack_base"], dtype=np.float64)
        if base.shape != (3,):
            raise ValueError("stack_base needs three numbers")
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed poses file ({exc})") from exc
    return poses, radius, base


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(manifest, tensors):
    """Serialise ``tensors`` (name -> array) after ``manifest`` (a dict)."""
    table = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                      "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = dict(manifest)
    manifest["tensors"] = table
    manifest["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    head = _dumps(manifest).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<Q", len(head)) + head + blob


def decode_checkpoint(data, source="<bytes>"):
    if len(data) < 16 or data[:8] != CKPT_MAGIC:
        raise FormatError(f"{source}: bad magic, not a checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + n:
        raise FormatError(f"{source}: truncated manifest")
    try:
        manifest = json.loads(data[16:16 + n].decode("utf-8"))
        table = manifest["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: malformed manifest ({exc})") from exc
    blob = data[16 + n:]
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise FormatError(f"{source}: blob checksum mismatch (truncated or corrupt)")
    tensors = {}
    for entry in table:
        start, size = entry["offset"], entry["nbytes"]
        if start + size > len(blob):
            raise FormatError(f"{source}: tensor {entry['name']!r} runs past the blob")
        arr = np.frombuffer(blob[start:start + size], dtype="<f4")
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
    return manifest, tensors


def write_checkpoint(path, manifest, tensors):
    _write_bytes(path, encode_checkpoint(manifest, tensors))


def read_checkpoint(path):
    return decode_checkpoint(_read_bytes(path), str(path))


# ---------------------------------------------------------------------------
# config text


class ConfigSyntaxError(ValueError):
    pass


def parse_config_text(text, source="<config>"):
    """Parse flat ``key = value`` lines; ``#`` starts a comment.

    Returns an ordered dict of key -> raw string value.  Duplicate keys and
    lines without ``=`` are errors.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigSyntaxError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigSyntaxError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigSyntaxError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path):
    return parse_config_text(_read_bytes(path).decode("utf-8"), str(path))


def format_config(mapping):
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


# ---------------------------------------------------------------------------
# images and tables


def write_png(path, image):
    from PIL import Image

    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
    _write_bytes(path, buf.getvalue())


def write_mask_png(path, mask):
    write_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask_png(path):
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(io.BytesIO(_read_bytes(path))) as im:
            arr = np.asarray(im.convert("L"))
    except UnidentifiedImageError as exc:
        raise FormatError(f"{path}: not a PNG image") from exc
    return arr > 127


def write_csv(path, rows, columns):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k, "")) for k in columns})
    _write_bytes(path, buf.getvalue().encode())


def _fmt(v):
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float):
        return repr(v)
    return v


def read_csv(path):
    text = _read_bytes(path).decode()
    return list(csv.DictReader(io.StringIO(text)))
