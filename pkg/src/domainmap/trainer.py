"""Supervised l1 training: patch sampling, ADAM with step-halving LR, checkpoints.

Checkpoint file layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"DMAPCKPT"
    8       4     format version (uint32, currently 1)
    12      4     header length H (uint32)
    16      H     UTF-8 JSON header, keys sorted:
                    model_config, iteration, rng_state, meta,
                    tensors: [{name, shape, offset, nbytes}, ...]
    16+H    P     tensor payload, float32 little-endian, in header order
    16+H+P  32    SHA-256 of every preceding byte

Tensor names are ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor_core as tc
from .models import Model, ModelConfig
from .tensor_core import Tensor

log = logging.getLogger(__name__)

MAGIC = b"DMAPCKPT"
FORMAT_VERSION = 1
_DIGEST = 32


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message: str, checkpoint: Optional["Checkpoint"] = None):
        super().__init__(message)
        self.checkpoint = checkpoint


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    patch_size: int = 96
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    halve_every: int = 50_000
    total_iters: int = 150_000
    seed: int = 0
    augment_flips: bool = False
    log_every: int = 100

    def __post_init__(self):
        for name in ("batch_size", "patch_size", "halve_every", "log_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.total_iters < 0:
            raise ValueError(f"total_iters must be non-negative, got {self.total_iters}")
        if self.total_iters and self.halve_every > self.total_iters:
            raise ValueError(f"halve_every ({self.halve_every}) exceeds total_iters ({self.total_iters})")
        if self.lr0 <= 0 or self.epsilon <= 0:
            raise ValueError("lr0 and epsilon must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    @classmethod
    def full(cls, seed: int = 0) -> "TrainConfig":
        """Full-size schedule: lr 1e-4 halved every 50k over 150k iterations."""
        return cls(seed=seed)

    @classmethod
    def desk(cls, total_iters: int = 2000, patch_size: int = 16, seed: int = 0, **kw) -> "TrainConfig":
        """Small-scale defaults; same schedule shape (three LR plateaus)."""
        kw.setdefault("lr0", 1e-3)
        kw.setdefault("halve_every", max(1, total_iters // 3))
        return cls(total_iters=total_iters, patch_size=patch_size, seed=seed, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(iteration: int, config: TrainConfig) -> float:
    """Learning rate for a 0-based iteration: lr0 halved every ``halve_every``."""
    return config.lr0 * 0.5 ** (iteration // config.halve_every)


@dataclass
class AdamMoments:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: Dict[str, Tensor]) -> "AdamMoments":
        return cls(
            OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items()),
            OrderedDict((k, np.zeros_like(p.data)) for k, p in params.items()),
        )


def adam_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    moments: AdamMoments,
    step: int,
    config: TrainConfig,
    lr: Optional[float] = None,
) -> None:
    """One bias-corrected ADAM update, in place. ``step`` counts from 1."""
    if step < 1:
        raise ValueError(f"ADAM step counter starts at 1, got {step}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
    lr = lr_at(step - 1, config) if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    for name, p in params.items():
        g = grads[name]
        dt = p.data.dtype
        m = moments.m[name]
        v = moments.v[name]
        m *= dt.type(b1)
        m += dt.type(1 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1 - b2) * (g * g)
        m_hat = m / dt.type(c1)
        v_hat = v / dt.type(c2)
        p.data = p.data - dt.type(lr) * m_hat / (np.sqrt(v_hat) + dt.type(config.epsilon))


def sample_patch_pair(
    input_img: np.ndarray,
    target_img: np.ndarray,
    patch_size: int,
    scale: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray, Tuple[int, int]]:
    """Aligned random crop of an (input, target) pair of (C, H, W) arrays.

    Returns the two crops and the input-grid offset (y, x).
    """
    _, h, w = input_img.shape
    _, th, tw = target_img.shape
    if th != h * scale or tw != w * scale:
        raise tc.ShapeError(f"target {th}x{tw} is not input {h}x{w} times {scale}")
    if h < patch_size or w < patch_size:
        raise tc.ShapeError(f"image {h}x{w} is smaller than patch size {patch_size}")
    y = int(rng.integers(0, h - patch_size + 1))
    x = int(rng.integers(0, w - patch_size + 1))
    p, ps = patch_size, patch_size * scale
    return (
        input_img[:, y:y + p, x:x + p],
        target_img[:, y * scale:y * scale + ps, x * scale:x * scale + ps],
        (y, x),
    )


@dataclass
class Checkpoint:
    model_config: dict
    params: "OrderedDict[str, np.ndarray]"
    adam_m: "OrderedDict[str, np.ndarray]"
    adam_v: "OrderedDict[str, np.ndarray]"
    iteration: int
    rng_state: dict
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def build_model(self) -> Model:
        model = Model(ModelConfig(**self.model_config), seed=int(self.meta.get("model_seed", 0)))
        model.load_state_dict(self.params)
        return model

    def digest(self) -> str:
        """SHA-256 over parameter names, shapes and bytes."""
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(str(v.shape).encode())
            h.update(np.ascontiguousarray(v, dtype="<f4").tobytes())
        return h.hexdigest()


def checkpoint_from(model: Model, moments: Optional[AdamMoments], iteration: int,
                    rng: Optional[np.random.Generator], meta: Optional[dict] = None) -> Checkpoint:
    moments = moments or AdamMoments.zeros_like(model.parameters())
    meta = dict(meta or {})
    meta.setdefault("model_seed", model.seed)
    return Checkpoint(
        model_config=model.config.to_dict(),
        params=model.state_dict(),
        adam_m=OrderedDict((k, a.copy()) for k, a in moments.m.items()),
        adam_v=OrderedDict((k, a.copy()) for k, a in moments.v.items()),
        iteration=iteration,
        rng_state=rng.bit_generator.state if rng is not None else {},
        meta=meta,
    )


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for group, arrays in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            tensors.append({"name": f"{group}/{name}", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "model_config": ckpt.model_config,
        "iteration": ckpt.iteration,
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "tensors": tensors,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", ckpt.version, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise CheckpointFormatError("not a checkpoint file: bad magic bytes")
    version, hlen = struct.unpack("<II", blob[8:16])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    if len(blob) < 16 + hlen:
        raise CheckpointTruncatedError(f"checkpoint truncated inside header ({len(blob)} bytes)")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"checkpoint header is not valid JSON: {e}") from None
    payload = sum(t["nbytes"] for t in header["tensors"])
    expected = 16 + hlen + payload + _DIGEST
    if len(blob) < expected:
        raise CheckpointTruncatedError(f"checkpoint truncated: {len(blob)} bytes, expected {expected}")
    if len(blob) > expected:
        raise CheckpointFormatError(f"checkpoint has {len(blob) - expected} trailing bytes")
    if hashlib.sha256(blob[:-_DIGEST]).digest() != blob[-_DIGEST:]:
        raise CheckpointChecksumError("checkpoint checksum mismatch")
    base = 16 + hlen
    groups: Dict[str, OrderedDict] = {"param": OrderedDict(), "adam_m": OrderedDict(), "adam_v": OrderedDict()}
    for t in header["tensors"]:
        group, name = t["name"].split("/", 1)
        raw = blob[base + t["offset"]: base + t["offset"] + t["nbytes"]]
        groups[group][name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(t["shape"])
    return Checkpoint(
        model_config=header["model_config"],
        params=groups["param"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        iteration=header["iteration"],
        rng_state=header["rng_state"],
        meta=header["meta"],
        version=version,
    )


def atomic_write(path: str, data: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def _flip(inp: np.ndarray, tgt: np.ndarray, rng) -> Tuple[np.ndarray, np.ndarray]:
    if rng.random() < 0.5:
        inp, tgt = inp[:, :, ::-1], tgt[:, :, ::-1]
    if rng.random() < 0.5:
        inp, tgt = inp[:, ::-1, :], tgt[:, ::-1, :]
    return inp, tgt


def sample_batch(pairs: Sequence[Tuple[np.ndarray, np.ndarray]], scale: int, config: TrainConfig,
                 rng: np.random.Generator) -> Tuple[Tensor, Tensor]:
    xs, ys = [], []
    for _ in range(config.batch_size):
        inp, tgt = pairs[int(rng.integers(len(pairs)))]
        a, b, _ = sample_patch_pair(inp, tgt, config.patch_size, scale, rng)
        if config.augment_flips:
            a, b = _flip(a, b, rng)
        xs.append(a)
        ys.append(b)
    return Tensor(np.stack(xs).astype(np.float32)), Tensor(np.stack(ys).astype(np.float32))


def _as_pairs(dataset) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], int]:
    """Accept a PairedDataset or a plain list of (input, target) tensors/arrays."""
    if hasattr(dataset, "array_pairs"):
        return dataset.array_pairs(), dataset.scale
    pairs = []
    for inp, tgt in dataset:
        a = inp.data if isinstance(inp, Tensor) else np.asarray(inp)
        b = tgt.data if isinstance(tgt, Tensor) else np.asarray(tgt)
        pairs.append((a[0] if a.ndim == 4 else a, b[0] if b.ndim == 4 else b))
    scale = pairs[0][1].shape[-1] // pairs[0][0].shape[-1] if pairs else 1
    return pairs, scale


def train(
    model: Model,
    dataset,
    config: TrainConfig,
    resume: Optional[Checkpoint] = None,
    stop_at: Optional[int] = None,
    checkpoint_path: Optional[str] = None,
) -> Tuple[Checkpoint, List[float]]:
    """Train ``model`` in place on ``dataset``.

    Runs iterations ``[start, stop)`` where ``start`` comes from ``resume``
    (0 otherwise) and ``stop`` is ``stop_at`` or ``config.total_iters``.
    Returns the final checkpoint and the per-iteration loss history.
    """
    pairs, scale = _as_pairs(dataset)
    if not pairs:
        raise ValueError("training dataset is empty")
    if scale != model.scale:
        raise tc.ShapeError(f"model scale {model.scale} does not match dataset scale {scale}")

    params = model.parameters()
    if resume is not None:
        model.load_state_dict(resume.params)
        moments = AdamMoments(
            OrderedDict((k, a.copy()) for k, a in resume.adam_m.items()),
            OrderedDict((k, a.copy()) for k, a in resume.adam_v.items()),
        )
        rng = np.random.default_rng()
        rng.bit_generator.state = resume.rng_state
        start = resume.iteration
    else:
        moments = AdamMoments.zeros_like(params)
        rng = np.random.default_rng(config.seed)
        start = 0
    stop = config.total_iters if stop_at is None else min(stop_at, config.total_iters)
    meta = {"model_seed": model.seed, "train_config": config.to_dict()}

    history: List[float] = []
    for it in range(start, stop):
        x, y = sample_batch(pairs, scale, config, rng)
        loss = tc.l1_loss(model.forward(x), y)
        value = float(loss.data)
        if not math.isfinite(value):
            ckpt = checkpoint_from(model, moments, it, rng, meta)
            if checkpoint_path:
                save_checkpoint(ckpt, checkpoint_path)
            raise NumericError(f"non-finite loss at iteration {it}", ckpt)
        tc.backward(loss, wrt=params.values())
        grads = OrderedDict((k, p.grad) for k, p in params.items())
        adam_step(params, grads, moments, it + 1, config, lr=lr_at(it, config))
        for p in params.values():
            p.grad = None
        history.append(value)
        if (it + 1) % config.log_every == 0:
            log.info("iter %d/%d  l1 %.5f  lr %.2e", it + 1, stop, value, lr_at(it, config))

    ckpt = checkpoint_from(model, moments, max(stop, start), rng, meta)
    if checkpoint_path:
        save_checkpoint(ckpt, checkpoint_path)
    return ckpt, history
