"""RCAN and EDSR builders on top of :mod:`domainmap.tensor_core`.

Layers are small Python objects holding named parameter tensors. A
:class:`Model` flattens them into one ordered ``name -> Tensor`` mapping,
which is what the trainer and the checkpoint format work with.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor, no_grad


@dataclass(frozen=True)
class ModelConfig:
    n_groups: int = 2
    n_blocks_per_group: int = 2
    channels: int = 16
    reduction: int = 4
    scale: int = 2
    in_channels: int = 3
    kernel_size: int = 3
    variant: str = "rcan"
    res_scale: float = 1.0

    def __post_init__(self):
        if self.variant not in ("rcan", "edsr"):
            raise ValueError(f"variant must be 'rcan' or 'edsr', got {self.variant!r}")
        if self.scale not in (1, 2, 4):
            raise ValueError(f"scale must be 1, 2 or 4, got {self.scale}")
        for name in ("n_groups", "n_blocks_per_group", "channels", "reduction", "in_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.variant == "rcan" and self.channels % self.reduction:
            raise ValueError(f"channels ({self.channels}) must be divisible by reduction ({self.reduction})")

    def to_dict(self) -> dict:
        return asdict(self)


FULL_RCAN = ModelConfig(n_groups=10, n_blocks_per_group=8, channels=64, reduction=16, scale=4)
FULL_EDSR = ModelConfig(n_groups=1, n_blocks_per_group=8, channels=64, reduction=16, scale=4, variant="edsr")


class Layer:
    """Base: subclasses set tensors/sublayers as attributes and define __call__."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                yield prefix + key, val
            elif isinstance(val, Layer):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Layer):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")


class Conv(Layer):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator):
        # Kaiming-uniform over fan-in with leaky slope sqrt(5): bound 1/sqrt(fan_in)
        bound = 1.0 / math.sqrt(cin * k * k)
        self.weight = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros((1, cout, 1, 1), np.float32), requires_grad=True)
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv2d(x, self.weight, self.bias, padding=self.padding)


class ChannelAttention(Layer):
    """Squeeze (global pool), bottleneck, sigmoid gate, channel-wise rescale."""

    def __init__(self, channels: int, reduction: int, rng):
        self.down = Conv(channels, channels // reduction, 1, rng)
        self.up = Conv(channels // reduction, channels, 1, rng)
        self.force_gate: Optional[float] = None

    def gate(self, x: Tensor) -> Tensor:
        return tc.sigmoid(self.up(tc.relu(self.down(tc.global_avg_pool(x)))))

    def __call__(self, x: Tensor) -> Tensor:
        if self.force_gate is not None:
            return tc.scale(x, self.force_gate)
        return tc.mul(x, self.gate(x))


class RCAB(Layer):
    def __init__(self, channels: int, k: int, reduction: int, res_scale: float, rng):
        self.conv1 = Conv(channels, channels, k, rng)
        self.conv2 = Conv(channels, channels, k, rng)
        self.attention = ChannelAttention(channels, reduction, rng)
        self.res_scale = res_scale

    def __call__(self, x: Tensor) -> Tensor:
        r = self.attention(self.conv2(tc.relu(self.conv1(x))))
        if self.res_scale != 1:
            r = tc.scale(r, self.res_scale)
        return tc.add(x, r)


class ResBlock(Layer):
    """EDSR block: conv, relu, conv, skip."""

    def __init__(self, channels: int, k: int, res_scale: float, rng):
        self.conv1 = Conv(channels, channels, k, rng)
        self.conv2 = Conv(channels, channels, k, rng)
        self.res_scale = res_scale

    def __call__(self, x: Tensor) -> Tensor:
        r = self.conv2(tc.relu(self.conv1(x)))
        if self.res_scale != 1:
            r = tc.scale(r, self.res_scale)
        return tc.add(x, r)


class ResidualGroup(Layer):
    def __init__(self, cfg: ModelConfig, rng):
        self.blocks = [RCAB(cfg.channels, cfg.kernel_size, cfg.reduction, cfg.res_scale, rng)
                       for _ in range(cfg.n_blocks_per_group)]
        self.conv = Conv(cfg.channels, cfg.channels, cfg.kernel_size, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = x
        for b in self.blocks:
            h = b(h)
        return tc.add(x, self.conv(h))


class Upsampler(Layer):
    """One conv + pixel-shuffle(2) stage per factor of two."""

    def __init__(self, scale: int, channels: int, k: int, rng):
        n = {1: 0, 2: 1, 4: 2}[scale]
        self.stages = [Conv(channels, 4 * channels, k, rng) for _ in range(n)]

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.stages:
            x = tc.pixel_shuffle(conv(x), 2)
        return x


class Model(Layer):
    """Head conv, residual body with long skip, upsampler, tail conv."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        cfg = config
        rng = np.random.default_rng(seed)
        self.config = cfg
        self.seed = seed
        self.head = Conv(cfg.in_channels, cfg.channels, cfg.kernel_size, rng)
        if cfg.variant == "rcan":
            self.body = [ResidualGroup(cfg, rng) for _ in range(cfg.n_groups)]
        else:
            self.body = [ResBlock(cfg.channels, cfg.kernel_size, cfg.res_scale, rng)
                         for _ in range(cfg.n_blocks_per_group)]
        self.trunk = Conv(cfg.channels, cfg.channels, cfg.kernel_size, rng)
        self.upsample = Upsampler(cfg.scale, cfg.channels, cfg.kernel_size, rng)
        self.tail = Conv(cfg.channels, cfg.in_channels, cfg.kernel_size, rng)
        self._params = OrderedDict(self.named_parameters())

    @property
    def scale(self) -> int:
        return self.config.scale

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def bind_parameters(self, tensors: Dict[str, Tensor]) -> None:
        """Swap parameter objects in place (the gradient check feeds its own leaves)."""
        for name, t in tensors.items():
            if name not in self._params:
                raise KeyError(f"unknown parameter {name!r}")
            if t.shape != self._params[name].shape:
                raise tc.ShapeError(f"parameter {name}: expected shape {self._params[name].shape}, got {t.shape}")
            owner: object = self
            *path, leaf = name.split(".")
            for part in path:
                owner = owner[int(part)] if isinstance(owner, list) else getattr(owner, part)
            setattr(owner, leaf, t)
            self._params[name] = t

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise tc.ShapeError(f"model expects (N,{self.config.in_channels},H,W) input, got {x.shape}")
        head = self.head(x)
        h = head
        for stage in self.body:
            h = stage(h)
        h = tc.add(head, self.trunk(h))
        return self.tail(self.upsample(h))

    __call__ = forward

    def predict(self, x) -> Tensor:
        """Inference: no graph, output clipped to [0, 1]."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        with no_grad():
            out = self.forward(x)
        return Tensor(np.clip(out.data, 0.0, 1.0))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self._params.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self._params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise tc.ShapeError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype) -> "Model":
        """Deep copy with every parameter cast (float64 for gradient checks)."""
        m = Model(self.config, self.seed)
        for k, p in m._params.items():
            p.data = self._params[k].data.astype(dtype)
        return m

    def copy(self) -> "Model":
        return self.astype(np.float32)

    def gates(self) -> List[ChannelAttention]:
        out = []
        if self.config.variant == "rcan":
            for g in self.body:
                out.extend(b.attention for b in g.blocks)
        return out


def build_rcan(config: ModelConfig, seed: int = 0) -> Model:
    if config.variant != "rcan":
        raise ValueError(f"build_rcan needs variant 'rcan', got {config.variant!r}")
    return Model(config, seed)


def build_edsr(config: ModelConfig, seed: int = 0) -> Model:
    if config.variant != "edsr":
        raise ValueError(f"build_edsr needs variant 'edsr', got {config.variant!r}")
    return Model(config, seed)


def build(config: ModelConfig, seed: int = 0) -> Model:
    return Model(config, seed)


def forward(model: Model, input: Tensor, training: bool = True) -> Tensor:
    return model.forward(input) if training else model.predict(input)
