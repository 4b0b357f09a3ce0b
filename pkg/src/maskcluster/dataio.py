"""Synthetic scenes, mask fragmentation, and on-disk formats.

Dataset directory::

    manifest.json          counts, image size, class names, format "PXC1"
    NNNNN.img              b"PXC1" + u32 H, W, C + H*W*C little-endian f64
    NNNNN.msk              b"PXC1" + u32 N, H, W + N*H*W bytes (0/1)
    NNNNN.lbl              b"PXC1" + u32 H, W + H*W little-endian u16

Checkpoint directory::

    checkpoint.json        step, config, tensor table (name, shape, offset)
    checkpoint.bin         every tensor as little-endian f64, in table order
"""
from __future__ import annotations

import colorsys
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import GeneratorSpec, TrainConfig
from .errors import BadMagic, CorruptManifest, PlacementFailure, ShapeMismatch
from .numerics import STREAM_FRAGMENT, STREAM_SCENE, substream
from .training import TrainState, expected_shapes, state_from_tensors

MAGIC = b"PXC1"
FORMAT = "PXC1"
CHECKPOINT_FORMAT = "PXC1-checkpoint"
UNLABELED = 65535

SHAPES = ("circle", "rectangle", "triangle")
_BASE_COLORS = [
    (0.40, 0.55, 0.40),  # background
    (0.85, 0.25, 0.20),
    (0.20, 0.35, 0.85),
    (0.90, 0.80, 0.20),
]


@dataclass
class ClassStyle:
    name: str
    shape: str  # "background" or one of SHAPES
    color: tuple


@dataclass
class SceneSample:
    image: np.ndarray  # H x W x 3 in [0, 1]
    gt_labels: np.ndarray  # H x W uint16, UNLABELED for unlabeled pixels
    gt_masks: np.ndarray  # G x H x W bool, one per instance, sorted by class
    gt_classes: np.ndarray  # G class indices matching gt_masks
    unlabeled_masks: np.ndarray  # N x H x W bool
    meta: dict = field(default_factory=dict)


def default_palette(num_classes: int) -> list[ClassStyle]:
    palette = [ClassStyle("background", "background", _BASE_COLORS[0])]
    for c in range(1, num_classes):
        shape = SHAPES[(c - 1) % len(SHAPES)]
        if c < len(_BASE_COLORS):
            color = _BASE_COLORS[c]
        else:
            color = colorsys.hsv_to_rgb(((c * 0.618034) % 1.0), 0.75, 0.85)
        name = shape if c <= len(SHAPES) else f"{shape}_{(c - 1) // len(SHAPES) + 1}"
        palette.append(ClassStyle(name, shape, tuple(float(v) for v in color)))
    return palette


def _rasterize(shape: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "rectangle":
        return (np.abs(yy - cy) <= r * 0.8) & (np.abs(xx - cx) <= r)
    if shape == "triangle":
        top, bottom = cy - r, cy + r
        half = (yy - top) / (2.0 * r) * r
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)
    raise ValueError(f"unknown shape {shape!r}")


def _place(shape: str, occupied: np.ndarray, size: int, rng: np.random.Generator,
           tries: int = 30, shrinks: int = 6) -> np.ndarray:
    r = float(rng.integers(size // 8, size // 4 + 1))
    grown = occupied.copy()
    grown[1:] |= occupied[:-1]
    grown[:-1] |= occupied[1:]
    grown[:, 1:] |= occupied[:, :-1]
    grown[:, :-1] |= occupied[:, 1:]
    for _ in range(shrinks):
        for _ in range(tries):
            cy = rng.uniform(r, size - r)
            cx = rng.uniform(r, size - r)
            m = _rasterize(shape, cy, cx, r, size)
            if m.sum() >= 9 and not (m & grown).any():
                return m
        r = max(2.0, r * 0.75)
    raise PlacementFailure(f"could not place a {shape} without overlap")


def generate_scene(spec: GeneratorSpec, rng: np.random.Generator,
                   fragment_rng: np.random.Generator | None = None) -> SceneSample:
    """Non-overlapping coloured shapes of distinct classes on a textured background."""
    spec.validate()
    S = spec.image_size
    palette = default_palette(spec.num_classes)
    labels = np.zeros((S, S), dtype=np.uint16)
    image = np.empty((S, S, 3))
    occupied = np.zeros((S, S), dtype=bool)

    fg = np.arange(1, spec.num_classes)
    lo, hi = spec.shapes_per_image
    n_shapes = min(int(rng.integers(lo, hi + 1)), len(fg))
    chosen = rng.choice(fg, size=n_shapes, replace=False) if n_shapes else np.array([], dtype=int)

    bg = np.array(palette[0].color) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    image[:] = bg
    for c in chosen:
        style = palette[int(c)]
        m = _place(style.shape, occupied, S, rng)
        occupied |= m
        labels[m] = c
        image[m] = np.array(style.color) + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
    image += spec.texture * rng.standard_normal(image.shape)
    np.clip(image, 0.0, 1.0, out=image)

    classes = np.unique(labels)
    gt_masks = np.stack([labels == c for c in classes])
    unlabeled = fragment_masks(gt_masks, fragment_rng if fragment_rng is not None else rng,
                               spec.fragments_per_mask, spec.fragment_mode)
    return SceneSample(image=image, gt_labels=labels, gt_masks=gt_masks,
                       gt_classes=classes.astype(np.int64), unlabeled_masks=unlabeled)


def _cuts(lo: int, hi: int, parts: int, rng: np.random.Generator) -> list[int]:
    """Jittered boundaries splitting ``[lo, hi)`` into up to ``parts`` pieces."""
    span = hi - lo
    inner = []
    if parts > 1 and span > 1:
        step = span / parts
        pos = lo + step * np.arange(1, parts) + rng.uniform(-0.25, 0.25, parts - 1) * step
        inner = sorted(set(int(v) for v in np.clip(np.rint(pos), lo + 1, hi - 1)))
    return [lo, *inner, hi]


def _fragment_grid(mask: np.ndarray, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    ys, xs = np.nonzero(mask)
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    rows = max(1, int(round(np.sqrt(n))))
    per_row = [n // rows + (1 if i < n % rows else 0) for i in range(rows)]
    row_edges = _cuts(y0, y1, rows, rng)
    out = []
    for i, (a, b) in enumerate(zip(row_edges[:-1], row_edges[1:])):
        col_edges = _cuts(x0, x1, per_row[min(i, rows - 1)], rng)
        for c0, c1 in zip(col_edges[:-1], col_edges[1:]):
            cell = np.zeros_like(mask)
            cell[a:b, c0:c1] = mask[a:b, c0:c1]
            if cell.any():
                out.append(cell)
    return out


def _fragment_voronoi(mask: np.ndarray, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    ys, xs = np.nonzero(mask)
    n = min(n, len(ys))
    seeds = rng.choice(len(ys), size=n, replace=False)
    d = (ys[:, None] - ys[seeds][None, :]) ** 2 + (xs[:, None] - xs[seeds][None, :]) ** 2
    owner = np.argmin(d, axis=1)
    out = []
    for j in range(n):
        cell = np.zeros_like(mask)
        sel = owner == j
        cell[ys[sel], xs[sel]] = True
        out.append(cell)
    return out


def fragment_masks(gt_masks, rng: np.random.Generator, fragments_per_mask=(3, 8), mode: str = "voronoi") -> np.ndarray:
    """Partition every mask into random pieces; pieces never cross mask borders."""
    gt_masks = np.asarray(gt_masks, dtype=bool)
    lo, hi = fragments_per_mask
    if lo < 1 or hi < lo:
        raise ValueError(f"fragments_per_mask must satisfy 1 <= min <= max, got {fragments_per_mask}")
    if mode not in ("grid", "voronoi"):
        raise ValueError(f"unknown fragmentation mode {mode!r}")
    out = []
    for mask in gt_masks:
        if not mask.any():
            continue
        n = int(rng.integers(lo, hi + 1))
        if n == 1:
            out.append(mask.copy())
        elif mode == "grid":
            out.extend(_fragment_grid(mask, n, rng))
        else:
            out.extend(_fragment_voronoi(mask, n, rng))
    if not out:
        return np.zeros((0, *gt_masks.shape[1:]), dtype=bool)
    return np.stack(out)


def generate_dataset(spec: GeneratorSpec, num_samples: int | None = None) -> list[SceneSample]:
    """``num_samples`` scenes; sample ``i`` draws from its own scene and fragment sub-streams."""
    n = spec.num_samples if num_samples is None else num_samples
    return [
        generate_scene(spec, substream(spec.seed, STREAM_SCENE, i), substream(spec.seed, STREAM_FRAGMENT, i))
        for i in range(n)
    ]


# -- dataset files ------------------------------------------------------------

def _header(fmt: str, *dims: int) -> bytes:
    return MAGIC + struct.pack(fmt, *dims)


def write_dataset(samples, directory, class_names: list[str]) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if not samples:
        raise ValueError("refusing to write an empty dataset")
    H, W, C = samples[0].image.shape
    entries = []
    for i, s in enumerate(samples):
        if s.image.shape != (H, W, C):
            raise ShapeMismatch(f"sample {i} image {s.image.shape} differs from {(H, W, C)}")
        name = f"{i:05d}"
        img = np.ascontiguousarray(s.image, dtype="<f8")
        (d / f"{name}.img").write_bytes(_header("<III", H, W, C) + img.tobytes())
        msk = np.ascontiguousarray(s.unlabeled_masks, dtype=np.uint8)
        (d / f"{name}.msk").write_bytes(_header("<III", len(msk), H, W) + msk.tobytes())
        lbl = np.ascontiguousarray(s.gt_labels, dtype="<u2")
        (d / f"{name}.lbl").write_bytes(_header("<II", H, W) + lbl.tobytes())
        entries.append({"name": name, "num_masks": int(len(msk))})
    manifest = {
        "format": FORMAT,
        "num_samples": len(samples),
        "height": H,
        "width": W,
        "channels": C,
        "class_names": list(class_names),
        "samples": entries,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise CorruptManifest(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptManifest(f"unreadable manifest: {exc}") from exc
    required = ("format", "num_samples", "height", "width", "channels", "class_names", "samples")
    if not isinstance(manifest, dict) or any(key not in manifest for key in required):
        raise CorruptManifest("manifest is missing required fields")
    if manifest["format"] != FORMAT:
        raise CorruptManifest(f"unsupported dataset format {manifest['format']!r}")
    if manifest["num_samples"] != len(manifest["samples"]) or manifest["num_samples"] < 1:
        raise CorruptManifest("sample count does not match the sample table")
    return manifest


def _expected_sizes(manifest: dict, entry: dict) -> dict[str, int]:
    H, W, C = manifest["height"], manifest["width"], manifest["channels"]
    return {
        ".img": 16 + 8 * H * W * C,
        ".msk": 16 + entry["num_masks"] * H * W,
        ".lbl": 12 + 2 * H * W,
    }


def _read_blob(path: Path, fmt: str, expect: tuple[int, ...]) -> bytes:
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagic(f"{path.name}: bad magic {raw[:4]!r}")
    n = struct.calcsize(fmt)
    if len(raw) < 4 + n:
        raise ShapeMismatch(f"{path.name}: truncated header")
    dims = struct.unpack(fmt, raw[4:4 + n])
    if dims != expect:
        raise ShapeMismatch(f"{path.name}: header dims {dims} != manifest {expect}")
    return raw[4 + n:]


def read_dataset(directory) -> tuple[list[SceneSample], dict]:
    """Load every sample; the manifest and all file sizes are validated first."""
    d = Path(directory)
    manifest = read_manifest(d)
    H, W, C = manifest["height"], manifest["width"], manifest["channels"]
    for entry in manifest["samples"]:
        for ext, size in _expected_sizes(manifest, entry).items():
            path = d / f"{entry['name']}{ext}"
            if not path.is_file():
                raise CorruptManifest(f"missing file {path.name}")
            actual = path.stat().st_size
            if actual != size:
                raise ShapeMismatch(f"{path.name}: {actual} bytes, manifest implies {size}")
    samples = []
    for entry in manifest["samples"]:
        name, N = entry["name"], entry["num_masks"]
        img = np.frombuffer(_read_blob(d / f"{name}.img", "<III", (H, W, C)), dtype="<f8")
        msk = np.frombuffer(_read_blob(d / f"{name}.msk", "<III", (N, H, W)), dtype=np.uint8)
        lbl = np.frombuffer(_read_blob(d / f"{name}.lbl", "<II", (H, W)), dtype="<u2")
        labels = lbl.reshape(H, W).astype(np.uint16)
        classes = np.unique(labels[labels != UNLABELED]).astype(np.int64)
        samples.append(SceneSample(
            image=img.reshape(H, W, C).astype(np.float64),
            gt_labels=labels,
            gt_masks=np.stack([labels == c for c in classes]) if len(classes) else np.zeros((0, H, W), bool),
            gt_classes=classes,
            unlabeled_masks=msk.reshape(N, H, W).astype(bool),
            meta={"name": name},
        ))
    return samples, manifest


# -- checkpoints --------------------------------------------------------------

def write_checkpoint(state: TrainState, path) -> None:
    """Write ``checkpoint.json`` + ``checkpoint.bin`` into directory ``path``.

    Files are written under temporary names and renamed, so an interrupted
    write leaves the previous checkpoint intact.
    """
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    table, chunks, offset = [], [], 0
    for name, arr in state.tensors().items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "step": int(state.step),
        "config": state.config.to_dict(),
        "blob": "checkpoint.bin",
        "blob_bytes": offset,
        "tensors": table,
    }
    tmp_bin, tmp_json = d / "checkpoint.bin.tmp", d / "checkpoint.json.tmp"
    tmp_bin.write_bytes(b"".join(chunks))
    tmp_json.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    os.replace(tmp_bin, d / "checkpoint.bin")
    os.replace(tmp_json, d / "checkpoint.json")


def read_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    """Load a checkpoint; tensor shapes are checked against ``config`` (or the stored one)."""
    d = Path(path)
    mpath = d / "checkpoint.json"
    if not mpath.is_file():
        raise CorruptManifest(f"no checkpoint.json in {path}")
    try:
        manifest = json.loads(mpath.read_text())
        stored = TrainConfig.from_dict(manifest["config"])
        table = manifest["tensors"]
        step = int(manifest["step"])
        blob_bytes = int(manifest["blob_bytes"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CorruptManifest(f"unreadable checkpoint manifest: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CorruptManifest(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg = config or stored
    want = expected_shapes(cfg)
    names = [t["name"] for t in table]
    missing = sorted(set(want) - set(names))
    if missing:
        raise CorruptManifest(f"checkpoint lacks tensor(s) {', '.join(missing)}")
    for t in table:
        if t["name"] in want and tuple(t["shape"]) != want[t["name"]]:
            raise ShapeMismatch(f"tensor {t['name']}: stored shape {tuple(t['shape'])} != expected {want[t['name']]}")
    blob_path = d / manifest.get("blob", "checkpoint.bin")
    if not blob_path.is_file():
        raise CorruptManifest(f"missing blob {blob_path.name}")
    blob = blob_path.read_bytes()
    if len(blob) != blob_bytes:
        raise ShapeMismatch(f"blob has {len(blob)} bytes, manifest says {blob_bytes}")
    tensors = {}
    for t in table:
        count = int(np.prod(t["shape"], dtype=np.int64))
        end = t["offset"] + 8 * count
        if end > len(blob):
            raise ShapeMismatch(f"tensor {t['name']} runs past the end of the blob")
        tensors[t["name"]] = np.frombuffer(blob[t["offset"]:end], dtype="<f8").astype(np.float64).reshape(t["shape"])
    return state_from_tensors(tensors, step, cfg)
