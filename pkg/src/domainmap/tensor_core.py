"""Minimal reverse-mode differentiation over dense NCHW arrays.

Every operation returns a new :class:`Tensor`. When any input is traced
(``requires_grad`` set, or itself produced by a traced operation) the output
remembers its parents and a backward rule. :func:`backward` linearizes the
graph into a :class:`Tape` and walks it in reverse.

Arrays are float32 by default; passing float64 arrays keeps every operation
in float64, which is what :func:`grad_check` relies on.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "no_grad",
    "conv2d",
    "pixel_shuffle",
    "pixel_unshuffle",
    "global_avg_pool",
    "elementwise",
    "relu",
    "sigmoid",
    "add",
    "mul",
    "scale",
    "total",
    "l1_loss",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


_ids = itertools.count(1)
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Rank-4 (or scalar) array that can take part in differentiation.

    Leaves are created by the user; ``requires_grad`` marks those whose
    gradient :func:`backward` should populate.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim not in (0, 4):
            raise ShapeError(f"tensor must be rank 4 (N,C,H,W) or a scalar, got shape {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node = next(_ids)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def traced(self) -> bool:
        return self.requires_grad or self._backward is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{flag})"

    # operator sugar, handy in tests and model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], rule, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _grad_enabled() and any(p.traced for p in parents):
        out._parents = tuple(parents)
        out._backward = rule
    return out


# --------------------------------------------------------------------------
# operations


def conv2d(
    input: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` is (Cout, Cin, kh, kw) with odd kernel extents. Output spatial
    size is ``(H + 2*padding - kh) // stride + 1``.
    """
    x, w = input.data, weight.data
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"conv2d weight must be rank 4 (Cout,Cin,kh,kw), got {w.shape}")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if c != cin:
        raise ShapeError(f"conv2d channel mismatch: input C={c} but weight Cin={cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got kh={kh}, kw={kw}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be positive, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d padding must be non-negative, got {padding}")
    if bias is not None and bias.shape != (cout,):
        # bias travels as a rank-4 (1,Cout,1,1) tensor; accept both
        if bias.shape != (1, cout, 1, 1):
            raise ShapeError(f"conv2d bias must have Cout={cout} entries, got shape {bias.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {h}x{wd} too small for kernel {kh}x{kw} with padding {padding}")

    # The batch is laid out channels-last and flattened into one long run of
    # padded pixels. The tap at kernel offset (i, j) is then a contiguous row
    # slice starting at i*Wp + j, so the stride-1 correlation is kh*kw plain
    # matmuls. Rows that wrap across a border or into the next image are
    # computed and discarded. Taps are summed in kernel-row-major order.
    hp, wp = h + 2 * padding, wd + 2 * padding
    h1, w1 = hp - kh + 1, wp - kw + 1  # stride-1 output extent
    xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    if padding:
        xh = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    xflat = xh.reshape(n * hp * wp, c)
    rows = (n - 1) * hp * wp + (h1 - 1) * wp + w1
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]
    wtaps = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(kh * kw, c, cout)
    acc = np.zeros((n * hp * wp, cout), dtype=x.dtype)
    for t, off in enumerate(offsets):
        acc[:rows] += xflat[off:off + rows] @ wtaps[t]
    full = acc.reshape(n, hp, wp, cout)[:, :h1, :w1]
    out = full[:, ::stride, ::stride] if stride > 1 else full
    if bias is not None:
        out = out + bias.data.reshape(1, 1, 1, cout)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def rule(g: np.ndarray):
        gacc = np.zeros((n, hp, wp, cout), dtype=x.dtype)
        gacc[:, 0:stride * (ho - 1) + 1:stride, 0:stride * (wo - 1) + 1:stride] = g.transpose(0, 2, 3, 1)
        gflat = gacc.reshape(n * hp * wp, cout)[:rows]
        gw = None
        if weight.traced:
            gt = np.empty((kh * kw, c, cout), dtype=x.dtype)
            for t, off in enumerate(offsets):
                gt[t] = xflat[off:off + rows].T @ gflat
            gw = np.ascontiguousarray(gt.reshape(kh, kw, c, cout).transpose(3, 2, 0, 1))
        gb = None
        if bias is not None and bias.traced:
            gb = g.sum(axis=(0, 2, 3)).reshape(bias.shape)
        gx = None
        if input.traced:
            gxflat = np.zeros((n * hp * wp, c), dtype=x.dtype)
            for t, off in enumerate(offsets):
                gxflat[off:off + rows] += gflat @ wtaps[t].T
            gxh = gxflat.reshape(n, hp, wp, c)[:, padding:padding + h, padding:padding + wd]
            gx = np.ascontiguousarray(gxh.transpose(0, 3, 1, 2))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (input, weight, bias) if bias is not None else (input, weight)
    return _make(out, parents, rule, "conv2d")


def _shuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    oc = c // (r * r)
    return x.reshape(n, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, oc, h * r, w * r)


def _unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def pixel_shuffle(input: Tensor, r: int) -> Tensor:
    """Move r*r channel groups into an r-times larger spatial grid."""
    if r < 1:
        raise ShapeError(f"pixel_shuffle factor must be positive, got {r}")
    c = input.shape[1]
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle needs C divisible by r^2={r * r}, got C={c}")
    out = np.ascontiguousarray(_shuffle(input.data, r))
    return _make(out, (input,), lambda g: (np.ascontiguousarray(_unshuffle(g, r)),), "pixel_shuffle")


def pixel_unshuffle(input: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if r < 1:
        raise ShapeError(f"pixel_unshuffle factor must be positive, got {r}")
    _, _, h, w = input.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle needs H and W divisible by {r}, got {h}x{w}")
    out = np.ascontiguousarray(_unshuffle(input.data, r))
    return _make(out, (input,), lambda g: (np.ascontiguousarray(_shuffle(g, r)),), "pixel_unshuffle")


def global_avg_pool(input: Tensor) -> Tensor:
    x = input.data
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError(f"global_avg_pool needs (N,C,H,W) with H,W >= 1, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.mean(axis=(2, 3), keepdims=True)
    return _make(out, (input,), lambda g: (np.broadcast_to(g / hw, x.shape).copy(),), "global_avg_pool")


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> bool:
    """True when b is a per-channel gate to be broadcast over H, W."""
    if a.shape == b.shape:
        return False
    if a.data.ndim == 4 and b.shape == (a.shape[0], a.shape[1], 1, 1):
        return True
    raise ShapeError(f"{name}: shape {b.shape} is neither {a.shape} nor {(a.shape[0], a.shape[1], 1, 1)}")


def relu(input: Tensor) -> Tensor:
    x = input.data
    mask = x > 0
    return _make(np.where(mask, x, 0).astype(x.dtype), (input,), lambda g: (g * mask,), "relu")


def sigmoid(input: Tensor) -> Tensor:
    x = input.data
    out = (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype)
    return _make(out, (input,), lambda g: (g * out * (1 - out),), "sigmoid")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bc = _check_broadcast(a, b, "add")

    def rule(g):
        gb = g.sum(axis=(2, 3), keepdims=True) if bc else g
        return g, gb

    return _make(a.data + b.data, (a, b), rule, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    bc = _check_broadcast(a, b, "mul")
    x, y = a.data, b.data

    def rule(g):
        gb = g * x
        if bc:
            gb = gb.sum(axis=(2, 3), keepdims=True)
        return g * y, gb

    return _make(x * y, (a, b), rule, "mul")


def scale(input: Tensor, s: float) -> Tensor:
    x = input.data
    s = x.dtype.type(s)
    return _make(x * s, (input,), lambda g: (g * s,), "scale")


def elementwise(input: Tensor, kind: str, other: Union[Tensor, float, None] = None) -> Tensor:
    """Dispatch by name: ``relu``, ``sigmoid``, ``add``, ``mul`` or ``scale``."""
    if kind == "relu":
        return relu(input)
    if kind == "sigmoid":
        return sigmoid(input)
    if kind == "add":
        return add(input, other)
    if kind == "mul":
        return mul(input, other)
    if kind == "scale":
        return scale(input, float(other))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def total(input: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = input.data
    return _make(np.asarray(x.sum(), dtype=x.dtype), (input,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "total")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"l1_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    size = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=diff.dtype)

    def rule(g):
        gp = np.sign(diff) * (g / size)
        return gp.astype(diff.dtype), -gp.astype(diff.dtype)

    return _make(out, (pred, target), rule, "l1_loss")


# --------------------------------------------------------------------------
# tape and backward


@dataclass
class TapeRecord:
    output: int
    inputs: tuple
    op: str
    rule: Callable


class Tape:
    """Topologically ordered record of the operations behind one output."""

    def __init__(self, records: List[TapeRecord], tensors: Dict[int, Tensor]):
        self.records = records
        self.tensors = tensors

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if t.node in seen:
                continue
            seen.add(t.node)
            stack.append((t, True))
            for p in reversed(t._parents):
                if p.node not in seen:
                    stack.append((p, False))
        tensors = {t.node: t for t in order}
        records = [
            TapeRecord(t.node, tuple(p.node for p in t._parents), t.op, t._backward)
            for t in order
            if t._backward is not None
        ]
        return cls(records, tensors)

    def leaves(self) -> List[Tensor]:
        return [t for t in self.tensors.values() if t._backward is None and t.requires_grad]

    def __len__(self) -> int:
        return len(self.records)


def backward(loss: Tensor, wrt: Optional[Iterable[Tensor]] = None) -> Tape:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``.

    Leaves listed in ``wrt`` but not reachable get a zero gradient. The
    graph behind ``loss`` is released afterwards.
    """
    if not isinstance(loss, Tensor) or not loss.traced:
        raise ValueError("backward called on a value that is not part of a traced computation")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.trace(loss)
    grads: Dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        for nid, gi in zip(rec.inputs, rec.rule(g)):
            if gi is None or not tape.tensors[nid].traced:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    for leaf in tape.leaves():
        g = grads.get(leaf.node)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
    if wrt is not None:
        for t in wrt:
            if t.node not in tape.tensors:
                t.grad = np.zeros_like(t.data)
    for t in tape.tensors.values():
        if t._backward is not None:
            t._parents = ()
            t._backward = None
    return tape


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Union[Tensor, Sequence[Tensor]],
    eps: float = 1e-4,
    max_per_input: Optional[int] = None,
    seed: int = 0,
    dtype=np.float64,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps the given tensors to a scalar. The check runs on ``dtype``
    copies (float64 by default; ``np.longdouble`` pushes the difference
    quotient's rounding floor lower for deep graphs with tiny gradients);
    the originals are not modified. ``max_per_input`` caps how many
    entries of each input are probed (chosen at random with ``seed``).
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    shadows = [Tensor(t.data.astype(dtype), requires_grad=True, dtype=dtype) for t in inputs]
    out = fn(*shadows)
    backward(out, wrt=shadows)
    analytic = [s.grad.copy() for s in shadows]
    rng = np.random.default_rng(seed)

    worst = 0.0
    with no_grad():
        for s, ga in zip(shadows, analytic):
            flat = s.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_per_input is not None and flat.size > max_per_input:
                idx = np.sort(rng.choice(flat.size, size=max_per_input, replace=False))
            gflat = ga.reshape(-1)
            for k in idx:
                orig = flat[k]
                flat[k] = orig + eps
                fp = float(fn(*shadows).data)
                flat[k] = orig - eps
                fm = float(fn(*shadows).data)
                flat[k] = orig
                cd = (fp - fm) / (2 * eps)
                a = float(gflat[k])
                err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
                worst = max(worst, err)
    return worst
