"""On-disk formats: scenes, weak labels, manifests, checkpoints, run configs, PLY and CSV.

Scene file (ASCII)::

    DATSEG v1
    points N feat_dim D classes K
    x y z f1 .. fD class instance      # N lines, reals with 17 significant digits

Weak-label file (ASCII): one ``index class`` pair per line.

Checkpoint (binary, little-endian)::

    magic   8 bytes  b"DATSEGCK"
    version u32      1
    count   u32      number of sections
    per section:
        name_len u32, name (utf-8)
        ndim     u32, dims (u64 each)
        values   f64 * prod(dims), row-major
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .annotation import LabeledScene, WeakLabels
from .backbone import ModelParams, PointCloud

SCENE_MAGIC = "DATSEG v1"
CKPT_MAGIC = b"DATSEGCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


def _fmt(x: float) -> str:
    return "%.17g" % x


# -- scenes ------------------------------------------------------------------

def write_scene(path, scene: LabeledScene) -> None:
    cloud = scene.cloud
    lines = [SCENE_MAGIC, f"points {cloud.n_points} feat_dim {cloud.feat_dim} classes {scene.n_classes}"]
    for c, f, y, inst in zip(cloud.coords, cloud.feats, scene.gt_classes, scene.instance_ids):
        lines.append(" ".join([*map(_fmt, c), *map(_fmt, f), str(int(y)), str(int(inst))]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene_header(path) -> tuple[int, int, int]:
    with open(path) as fh:
        magic = fh.readline().strip()
        header = fh.readline().split()
    if magic != SCENE_MAGIC:
        raise FormatError(f"{path}: expected {SCENE_MAGIC!r}, found {magic!r}")
    if len(header) != 6 or header[0::2] != ["points", "feat_dim", "classes"]:
        raise FormatError(f"{path}: malformed header line")
    return int(header[1]), int(header[3]), int(header[5])


def read_scene(path) -> LabeledScene:
    n, d, k = read_scene_header(path)
    rows = np.loadtxt(path, skiprows=2, ndmin=2)
    if rows.shape != (n, 3 + d + 2):
        raise FormatError(f"{path}: expected {n} rows of {3 + d + 2} columns, got {rows.shape}")
    cloud = PointCloud(rows[:, :3], rows[:, 3:3 + d])
    return LabeledScene(cloud, rows[:, 3 + d].astype(int), rows[:, 4 + d].astype(int), k)


# -- weak labels -------------------------------------------------------------

def write_weak(path, labels: WeakLabels) -> None:
    Path(path).write_text("".join(f"{i} {c}\n" for i, c in zip(labels.indices, labels.classes)))


def read_weak(path) -> WeakLabels:
    pairs = np.loadtxt(path, dtype=np.int64, ndmin=2)
    if pairs.shape[1] != 2:
        raise FormatError(f"{path}: expected 'index class' pairs")
    return WeakLabels(pairs[:, 0], pairs[:, 1])


# -- manifest ----------------------------------------------------------------

MANIFEST = "manifest.json"


def write_manifest(directory, scene_files: Sequence[str], points: Sequence[int], n_classes: int,
                   feat_dim: int, seed: int, **extra) -> Path:
    doc = {
        "format": SCENE_MAGIC,
        "classes": n_classes,
        "feat_dim": feat_dim,
        "seed": seed,
        "total_points": int(sum(points)),
        "scenes": [{"path": f, "points": int(p)} for f, p in zip(scene_files, points)],
        **extra,
    }
    path = Path(directory) / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    return json.loads(path.read_text())


def load_dataset(directory) -> tuple[list[LabeledScene], dict]:
    manifest = read_manifest(directory)
    scenes = [read_scene(Path(directory) / s["path"]) for s in manifest["scenes"]]
    return scenes, manifest


# -- checkpoints -------------------------------------------------------------

def write_checkpoint(path, sections: Mapping[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(sections))]
    for name, arr in sections.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, count = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + name_len].decode()
        pos += name_len
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def save_params(path, params: ModelParams) -> None:
    write_checkpoint(path, dict(params.items()))


def load_params(path) -> ModelParams:
    return ModelParams(read_checkpoint(path))


# -- run config --------------------------------------------------------------

class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def parse_config(text: str, defaults: Mapping[str, object]) -> dict[str, object]:
    """Flat ``key = value`` lines with ``#`` comments, typed after ``defaults``."""
    out = dict(defaults)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r}", lineno)
        try:
            out[key] = coerce(value, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", lineno) from None
    return out


def coerce(text: str, like):
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    if isinstance(like, tuple):
        return tuple(p.strip() for p in text.split(",") if p.strip())
    return text


def dataclass_defaults(*classes) -> dict[str, object]:
    out = {}
    for cls in classes:
        for f in fields(cls):
            if f.name in out:
                continue
            value = getattr(cls(), f.name)
            if isinstance(value, (bool, int, float, str, tuple)):
                out[f.name] = value
    return out


# -- exports -----------------------------------------------------------------

def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, float) else v for v in row])


def region_palette(ids: np.ndarray) -> np.ndarray:
    """Stable pseudo-random colours per integer id."""
    ids = np.asarray(ids, dtype=np.uint64)
    h = (ids * np.uint64(2654435761)) % np.uint64(2 ** 32)
    return np.stack([(h >> np.uint64(s)) & np.uint64(255) for s in (0, 8, 16)], axis=1).astype(np.uint8)


def magnitude_colors(values: np.ndarray) -> np.ndarray:
    """Blue (small) to red (large), scaled to the array's own maximum."""
    values = np.asarray(values, dtype=np.float64)
    top = values.max() if values.size and values.max() > 0 else 1.0
    t = np.clip(values / top, 0.0, 1.0)
    return np.stack([255 * t, np.zeros_like(t), 255 * (1 - t)], axis=1).round().astype(np.uint8)


def write_ply(path, coords: np.ndarray, colors: np.ndarray) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.uint8)
    lines = ["ply", "format ascii 1.0", f"element vertex {coords.shape[0]}",
             "property double x", "property double y", "property double z",
             "property uchar red", "property uchar green", "property uchar blue", "end_header"]
    for p, c in zip(coords, colors):
        lines.append(" ".join([*map(_fmt, p), *map(str, c)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply_vertex_count(path) -> int:
    with open(path) as fh:
        for line in fh:
            if line.startswith("element vertex"):
                return int(line.split()[2])
            if line.strip() == "end_header":
                break
    raise FormatError(f"{path}: no vertex element")
