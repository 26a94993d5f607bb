"""Image records, PNG I/O, the procedural corpus, and degraded pair building."""
from __future__ import annotations

import fnmatch
import io
import json
import logging
import os
import zlib
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import png

from . import degradation as deg
from .degradation import DegradationSpec
from .tensor_core import ShapeError, Tensor

log = logging.getLogger(__name__)

MIN_SIZE = 32


@dataclass
class ImageRecord:
    id: str
    pixels: Tensor
    provenance: str

    def __post_init__(self):
        x = self.pixels.data
        if x.ndim != 4 or x.shape[0] != 1 or x.shape[1] != 3:
            raise ShapeError(f"image record {self.id!r} must be (1,3,H,W), got {x.shape}")

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape[2], self.pixels.shape[3]

    @property
    def noise_index(self) -> int:
        """Stable per-image integer used to decorrelate noise across records."""
        return zlib.crc32(self.id.encode())


# --------------------------------------------------------------------------
# PNG


def read_png(path: str) -> np.ndarray:
    """Decode an 8- or 16-bit PNG to a (3, H, W) float32 array in [0, 1]."""
    w, h, rows, info = png.Reader(filename=path).asDirect()
    planes = info["planes"]
    maxval = float(2 ** info["bitdepth"] - 1)
    arr = np.vstack([np.asarray(r, dtype=np.float64) for r in rows]).reshape(h, w, planes)
    if info.get("alpha"):
        arr = arr[..., :-1]
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return (arr.transpose(2, 0, 1) / maxval).astype(np.float32)


def encode_png(image, bitdepth: int = 8) -> bytes:
    """Encode a (3,H,W) / (1,3,H,W) array or tensor in [0,1] as RGB PNG bytes."""
    x = image.data if isinstance(image, Tensor) else np.asarray(image)
    if x.ndim == 4:
        x = x[0]
    if bitdepth not in (8, 16):
        raise ValueError(f"bitdepth must be 8 or 16, got {bitdepth}")
    maxval = 2**bitdepth - 1
    q = np.round(np.clip(x, 0.0, 1.0).astype(np.float64) * maxval).astype(np.uint16 if bitdepth == 16 else np.uint8)
    c, h, w = q.shape
    rows = q.transpose(1, 2, 0).reshape(h, w * c)
    buf = io.BytesIO()
    png.Writer(w, h, greyscale=False, bitdepth=bitdepth).write(buf, rows.tolist())
    return buf.getvalue()


def write_png(path: str, image, bitdepth: int = 8) -> None:
    from .trainer import atomic_write

    atomic_write(path, encode_png(image, bitdepth))


def load_dir(path: str, pattern: str = "*.png", manifest: Optional[dict] = None) -> List[ImageRecord]:
    """Load every matching PNG in ``path`` in lexicographic order.

    Unreadable files are skipped with a warning and listed under
    ``manifest["skipped"]`` when a manifest dict is supplied.
    """
    if not os.path.isdir(path):
        raise FileNotFoundError(f"image directory not found: {path}")
    names = sorted(n for n in os.listdir(path) if fnmatch.fnmatch(n, pattern))
    records = []
    loaded: Dict[str, str] = {}
    skipped: Dict[str, str] = {}
    for name in names:
        full = os.path.join(path, name)
        try:
            arr = read_png(full)
        except Exception as e:  # pypng raises several unrelated types on bad input
            log.warning("skipping %s: %s", full, e)
            skipped[name] = str(e)
            continue
        rid = os.path.splitext(name)[0]
        records.append(ImageRecord(rid, Tensor(arr[None]), full))
        loaded[rid] = full
    if manifest is not None:
        manifest["loaded"] = loaded
        manifest["skipped"] = skipped
    if not records:
        raise ValueError(f"no readable images matching {pattern!r} in {path}")
    return records


def save_records(records: Sequence[ImageRecord], out_dir: str, bitdepth: int = 8) -> Dict[str, str]:
    """Write records as ``<id>.png`` plus ``manifest.json``; returns id -> provenance."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {}
    for r in records:
        write_png(os.path.join(out_dir, f"{r.id}.png"), r.pixels, bitdepth)
        manifest[r.id] = r.provenance
    from .trainer import atomic_write

    atomic_write(os.path.join(out_dir, "manifest.json"),
                 (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


# --------------------------------------------------------------------------
# procedural corpus


def _smooth_noise(rng, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((1, 1, cells, cells))
    up = deg.resample_bicubic(Tensor(coarse), size / cells, antialias=False).data[0, 0]
    return up.astype(np.float64)


def synth_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """One (3, size, size) image mixing sinusoids, blobs and edges."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((3, size, size))
    # band-limited sinusoids, 2..size/8 cycles across the image
    for _ in range(int(rng.integers(2, 5))):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, size / 8.0)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += rng.uniform(0.03, 0.12, size=(3, 1, 1)) * wave
    # smooth random blobs
    for ch in range(3):
        img[ch] += 0.5 * (_smooth_noise(rng, size, int(rng.choice([4, 8]))) - 0.5)
    # oriented edges (slightly soft half-planes)
    for _ in range(int(rng.integers(2, 5))):
        theta = rng.uniform(0, 2 * np.pi)
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        dist = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        step = 1.0 / (1.0 + np.exp(-dist * size * 2.0))
        img += rng.uniform(-0.3, 0.3, size=(3, 1, 1)) * step
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    img = 0.05 + 0.9 * (img - lo) / np.maximum(hi - lo, 1e-12)
    return img.astype(np.float32)


def synth_corpus(n: int, size: int, seed: int, start: int = 0) -> List[ImageRecord]:
    """``n`` procedural RGB images; record ``i`` depends only on (seed, i)."""
    if n < 1:
        raise ValueError(f"corpus size must be at least 1, got {n}")
    if size < 64 or size % 4:
        raise ValueError(f"image size must be >= 64 and divisible by 4, got {size}")
    out = []
    for i in range(start, start + n):
        rng = np.random.default_rng([int(seed), i])
        out.append(ImageRecord(f"synth{seed}_{i:04d}", Tensor(synth_image(size, rng)[None]), f"synthetic:seed={seed},index={i}"))
    return out


def split(records: Sequence[ImageRecord], n_test: int) -> Tuple[List[ImageRecord], List[ImageRecord]]:
    """(train, test) split by index; the last ``n_test`` records are held out."""
    if not 0 < n_test < len(records):
        raise ValueError(f"n_test must be in (0, {len(records)}), got {n_test}")
    return list(records[:-n_test]), list(records[-n_test:])


# --------------------------------------------------------------------------
# pairs


@dataclass
class PairedDataset:
    inputs: List[ImageRecord]
    targets: List[ImageRecord]
    scale: int
    input_domain: str
    target_domain: str = "GT"

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise ValueError("inputs and targets differ in length")
        for a, b in zip(self.inputs, self.targets):
            ha, wa = a.shape
            hb, wb = b.shape
            if (hb, wb) != (ha * self.scale, wa * self.scale):
                raise ShapeError(f"pair {a.id}: target {hb}x{wb} is not input {ha}x{wa} times {self.scale}")

    def __len__(self) -> int:
        return len(self.inputs)

    def __iter__(self):
        return iter(zip(self.inputs, self.targets))

    def array_pairs(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(a.pixels.data[0], b.pixels.data[0]) for a, b in zip(self.inputs, self.targets)]


def degrade_records(records: Sequence[ImageRecord], spec: DegradationSpec) -> List[ImageRecord]:
    return [
        ImageRecord(r.id, deg.apply(spec, r.pixels, index=r.noise_index), f"{r.provenance}|{spec.label}")
        for r in records
    ]


def make_pairs(
    gt: Sequence[ImageRecord],
    spec: DegradationSpec,
    scale: int,
    target_spec: DegradationSpec = DegradationSpec(),
) -> PairedDataset:
    """Inputs ``apply(spec, gt)``; targets ``apply(target_spec, gt)`` (GT by default)."""
    ratio = target_spec.net_scale / spec.net_scale
    if ratio != Fraction(scale):
        raise ValueError(
            f"scale mismatch: spec {spec.label!r} and target {target_spec.label!r} give ratio {ratio}, not {scale}"
        )
    inputs = degrade_records(gt, spec)
    targets = degrade_records(gt, target_spec) if target_spec.steps else list(gt)
    return PairedDataset(inputs, targets, scale, spec.label, target_spec.label if target_spec.steps else "GT")
