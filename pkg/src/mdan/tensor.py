"""Minimal float64 tensor with reverse-mode automatic differentiation.

Only the operations the network needs are provided.  Every operation is an
:class:`Op` subclass with a ``forward`` on NumPy arrays and a ``backward``
that maps the output gradient to one gradient per input.  Calling an op on
tensors that require gradients records an :class:`OpRecord` on the output;
:func:`backward` walks those records in reverse topological order.

Graphs are attached to tensors, not to a global tape, so independent forward
passes on different threads never share state.  :func:`no_grad` disables
recording for the current thread only.
"""

from __future__ import annotations

import contextlib
import functools
import io
import struct
import threading
from typing import BinaryIO, Callable, Iterable, Sequence

import numpy as np

from .exceptions import ContractError, ShapeError

__all__ = [
    "Tensor",
    "OpRecord",
    "Op",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "conv2d",
    "upsample_bilinear_2x",
    "upsample_matrix",
    "softmax_lastdim",
    "global_avg_pool",
    "add",
    "mul",
    "relu",
    "scale",
    "ewise",
    "reshape",
    "permute",
    "transpose2d",
    "concat_lastdim",
    "tensor_sum",
    "cross_entropy",
    "masked_channel_mean",
    "masked_channel_max",
    "minmax_normalize",
    "backward",
    "grad_check",
    "grad_check_params",
    "sgd_step",
    "SGD",
    "glorot_uniform",
    "tensor_to_bytes",
    "tensor_from_bytes",
    "write_tensor",
    "read_tensor",
]

CE_EPS = 1e-12

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """Dense row-major float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_record", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: OpRecord | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class OpRecord:
    """Graph node: which op produced a tensor, from what, and saved state."""

    __slots__ = ("op", "inputs", "saved", "kwargs")

    def __init__(self, op: type["Op"], inputs: tuple[Tensor, ...], kwargs: dict):
        self.op = op
        self.inputs = inputs
        self.kwargs = kwargs
        self.saved: dict = {}


class Op:
    """Base class for differentiable operations."""

    name = "op"

    @staticmethod
    def forward(rec: OpRecord, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(rec: OpRecord, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        rec = OpRecord(cls, inputs, kwargs)
        out = Tensor(cls.forward(rec, *(t.data for t in inputs)))
        if is_grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._record = rec
        return out


# --------------------------------------------------------------------------
# linear algebra and convolution


class MatMul(Op):
    name = "matmul"

    @staticmethod
    def forward(rec, a, b):
        if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        rec.saved["a"], rec.saved["b"] = a, b
        return a @ b

    @staticmethod
    def backward(rec, grad):
        a, b = rec.saved["a"], rec.saved["b"]
        return grad @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ grad


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match."""
    return MatMul.apply(_as_tensor(a), _as_tensor(b))


class Conv2d(Op):
    name = "conv2d"

    @staticmethod
    def forward(rec, x, w):
        stride, pad = rec.kwargs["stride"], rec.kwargs["pad"]
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d: expected C×H×W or N×C×H×W input and 4-d kernel, got {x.shape} and {w.shape}")
        n, c, h, wd = x.shape
        co, ci, k, k2 = w.shape
        if k != k2 or k not in (1, 3):
            raise ShapeError(f"conv2d: kernel must be 1×1 or 3×3, got {k}×{k2}")
        if ci != c:
            raise ShapeError(f"conv2d: input has {c} channels but kernel {w.shape} expects {ci}")
        if stride < 1 or pad < 0:
            raise ShapeError(f"conv2d: bad stride {stride} / pad {pad}")
        if h + 2 * pad < k or wd + 2 * pad < k:
            raise ShapeError(f"conv2d: empty output for input {h}×{wd}, kernel {k}, stride {stride}, pad {pad}")
        ho = (h + 2 * pad - k) // stride + 1
        wo = (wd + 2 * pad - k) // stride + 1
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        cols = np.empty((n, c, k, k, ho, wo))
        for di in range(k):
            for dj in range(k):
                cols[:, :, di, dj] = xp[:, :, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride]
        out = np.tensordot(w, cols, axes=([1, 2, 3], [1, 2, 3])).transpose(1, 0, 2, 3)
        rec.saved.update(cols=cols, w=w, xshape=x.shape, squeeze=squeeze)
        return np.ascontiguousarray(out[0] if squeeze else out)

    @staticmethod
    def backward(rec, grad):
        stride, pad = rec.kwargs["stride"], rec.kwargs["pad"]
        cols, w, (n, c, h, wd) = rec.saved["cols"], rec.saved["w"], rec.saved["xshape"]
        if rec.saved["squeeze"]:
            grad = grad[None]
        k = w.shape[2]
        ho, wo = grad.shape[2:]
        dw = np.tensordot(grad, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(w, grad, axes=([0], [1]))  # C, k, k, N, Ho, Wo
        dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di : di + stride * (ho - 1) + 1 : stride, dj : dj + stride * (wo - 1) + 1 : stride] += (
                    dcols[:, di, dj].transpose(1, 0, 2, 3)
                )
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        if rec.saved["squeeze"]:
            dx = dx[0]
        return dx, dw


def conv2d(x, w, stride: int = 1, pad: int = 0) -> Tensor:
    """Bias-free cross-correlation of a C×H×W (or batched) map with a C_out×C_in×k×k kernel.

    Output extent is ``(H + 2·pad − k) // stride + 1`` (floor), so a 3×3
    stride-2 pad-1 kernel halves an even side.
    """
    return Conv2d.apply(_as_tensor(x), _as_tensor(w), stride=int(stride), pad=int(pad))


@functools.lru_cache(maxsize=64)
def upsample_matrix(n: int) -> np.ndarray:
    """Interpolation matrix (2n × n) for half-pixel bilinear 2× upsampling."""
    if n < 1:
        raise ShapeError(f"upsample: extent must be ≥ 1, got {n}")
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        u = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(u))
        i1 = min(i0 + 1, n - 1)
        t = u - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    m.flags.writeable = False
    return m


class Upsample2x(Op):
    name = "upsample_bilinear_2x"

    @staticmethod
    def forward(rec, x):
        if x.ndim < 2:
            raise ShapeError(f"upsample: need at least H×W, got {x.shape}")
        uh, uw = upsample_matrix(x.shape[-2]), upsample_matrix(x.shape[-1])
        rec.saved["uh"], rec.saved["uw"] = uh, uw
        return uh @ x @ uw.T

    @staticmethod
    def backward(rec, grad):
        return (rec.saved["uh"].T @ grad @ rec.saved["uw"],)


def upsample_bilinear_2x(x) -> Tensor:
    """Bilinear 2× upsampling of the last two axes with half-pixel centres and clamped borders."""
    return Upsample2x.apply(_as_tensor(x))


# --------------------------------------------------------------------------
# reductions and activations


class Softmax(Op):
    name = "softmax_lastdim"

    @staticmethod
    def forward(rec, x):
        if x.ndim == 0 or x.shape[-1] < 1:
            raise ShapeError(f"softmax: last extent must be ≥ 1, got {x.shape}")
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        y = e / e.sum(axis=-1, keepdims=True)
        rec.saved["y"] = y
        return y

    @staticmethod
    def backward(rec, grad):
        y = rec.saved["y"]
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


def softmax_lastdim(x) -> Tensor:
    return Softmax.apply(_as_tensor(x))


class GlobalAvgPool(Op):
    name = "global_avg_pool"

    @staticmethod
    def forward(rec, x):
        if x.ndim < 3:
            raise ShapeError(f"global_avg_pool: need C×H×W, got {x.shape}")
        rec.saved["hw"] = x.shape[-2:]
        return x.mean(axis=(-2, -1))

    @staticmethod
    def backward(rec, grad):
        h, w = rec.saved["hw"]
        return (np.broadcast_to(grad[..., None, None] / (h * w), grad.shape + (h, w)).copy(),)


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean: C×H×W → C (batched N×C×H×W → N×C)."""
    return GlobalAvgPool.apply(_as_tensor(x))


def _broadcast_shape(sa, sb):
    # Only the channel axis of a C×H×W map may be broadcast from extent 1.
    if sa == sb:
        return sa
    if len(sa) == len(sb) >= 3:
        ax = len(sa) - 3
        if all(x == y for i, (x, y) in enumerate(zip(sa, sb)) if i != ax) and 1 in (sa[ax], sb[ax]):
            return tuple(max(x, y) for x, y in zip(sa, sb))
    raise ShapeError(f"elementwise op: shapes {sa} and {sb} are not compatible")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    return grad.sum(axis=len(shape) - 3, keepdims=True)


class Add(Op):
    name = "add"

    @staticmethod
    def forward(rec, a, b):
        _broadcast_shape(a.shape, b.shape)
        rec.saved["shapes"] = a.shape, b.shape
        return a + b

    @staticmethod
    def backward(rec, grad):
        sa, sb = rec.saved["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Mul(Op):
    name = "mul"

    @staticmethod
    def forward(rec, a, b):
        _broadcast_shape(a.shape, b.shape)
        rec.saved["a"], rec.saved["b"] = a, b
        return a * b

    @staticmethod
    def backward(rec, grad):
        a, b = rec.saved["a"], rec.saved["b"]
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Shift(Op):
    name = "shift"

    @staticmethod
    def forward(rec, a):
        return a + rec.kwargs["c"]

    @staticmethod
    def backward(rec, grad):
        return (grad,)


class Scale(Op):
    name = "scale"

    @staticmethod
    def forward(rec, a):
        return a * rec.kwargs["c"]

    @staticmethod
    def backward(rec, grad):
        return (grad * rec.kwargs["c"],)


class Relu(Op):
    name = "relu"

    @staticmethod
    def forward(rec, x):
        rec.saved["mask"] = x > 0
        return np.maximum(x, 0.0)  # keeps NaN visible to the loss check

    @staticmethod
    def backward(rec, grad):
        return (grad * rec.saved["mask"],)


def add(a, b) -> Tensor:
    """``a + b``; ``b`` may be a Python scalar or a 1×H×W map broadcast over channels."""
    if np.isscalar(b):
        return Shift.apply(_as_tensor(a), c=float(b))
    if np.isscalar(a):
        return Shift.apply(_as_tensor(b), c=float(a))
    return Add.apply(_as_tensor(a), _as_tensor(b))


def mul(a, b) -> Tensor:
    """Hadamard product with the same broadcast rule as :func:`add`."""
    if np.isscalar(b):
        return Scale.apply(_as_tensor(a), c=float(b))
    if np.isscalar(a):
        return Scale.apply(_as_tensor(b), c=float(a))
    return Mul.apply(_as_tensor(a), _as_tensor(b))


def scale(a, c: float) -> Tensor:
    return Scale.apply(_as_tensor(a), c=float(c))


def relu(x) -> Tensor:
    """Rectifier; the subgradient at exactly 0 is taken as 0."""
    return Relu.apply(_as_tensor(x))


def ewise(kind: str, a, b=None) -> Tensor:
    """Dispatch helper over the elementwise kinds ``add``, ``mul``, ``relu``, ``scale``."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "scale":
        return scale(a, b)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# data movement


class Reshape(Op):
    name = "reshape"

    @staticmethod
    def forward(rec, x):
        shape = tuple(rec.kwargs["shape"])
        try:
            out = x.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
        rec.saved["shape"] = x.shape
        return out

    @staticmethod
    def backward(rec, grad):
        return (grad.reshape(rec.saved["shape"]),)


class Permute(Op):
    name = "permute"

    @staticmethod
    def forward(rec, x):
        axes = tuple(rec.kwargs["axes"])
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
        return np.ascontiguousarray(x.transpose(axes))

    @staticmethod
    def backward(rec, grad):
        return (grad.transpose(np.argsort(rec.kwargs["axes"])),)


class Concat(Op):
    name = "concat_lastdim"

    @staticmethod
    def forward(rec, *xs):
        lead = xs[0].shape[:-1]
        if any(x.shape[:-1] != lead for x in xs):
            raise ShapeError(f"concat: leading extents differ: {[x.shape for x in xs]}")
        rec.saved["splits"] = np.cumsum([x.shape[-1] for x in xs])[:-1]
        return np.concatenate(xs, axis=-1)

    @staticmethod
    def backward(rec, grad):
        return tuple(np.split(grad, rec.saved["splits"], axis=-1))


class Sum(Op):
    name = "sum"

    @staticmethod
    def forward(rec, x):
        rec.saved["shape"] = x.shape
        return np.asarray(x.sum())

    @staticmethod
    def backward(rec, grad):
        return (np.full(rec.saved["shape"], float(grad)),)


def reshape(x, shape) -> Tensor:
    return Reshape.apply(_as_tensor(x), shape=tuple(int(s) for s in shape))


def permute(x, axes) -> Tensor:
    return Permute.apply(_as_tensor(x), axes=tuple(int(a) for a in axes))


def transpose2d(x) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat_lastdim(xs: Sequence) -> Tensor:
    return Concat.apply(*(_as_tensor(x) for x in xs))


def tensor_sum(x) -> Tensor:
    return Sum.apply(_as_tensor(x))


# --------------------------------------------------------------------------
# loss


class CrossEntropy(Op):
    name = "cross_entropy"

    @staticmethod
    def forward(rec, p):
        y = rec.kwargs["y"]
        if p.ndim != 2 or y.shape != (p.shape[0],):
            raise ShapeError(f"cross_entropy: need N×C probabilities and N labels, got {p.shape} and {y.shape}")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
            raise ContractError("cross_entropy: rows of p must sum to 1")
        if np.any(y < 0) or np.any(y >= p.shape[1]):
            raise IndexError(f"cross_entropy: label out of range for {p.shape[1]} classes")
        picked = p[np.arange(len(y)), y]
        rec.saved["picked"] = picked
        return np.asarray(-np.mean(np.log(np.maximum(picked, CE_EPS))))

    @staticmethod
    def backward(rec, grad):
        y, picked = rec.kwargs["y"], rec.saved["picked"]
        n = len(y)
        gp = np.zeros((n, rec.kwargs["n_classes"]))
        live = picked > CE_EPS
        gp[np.arange(n)[live], y[live]] = -float(grad) / (n * picked[live])
        return (gp,)


def cross_entropy(p, y) -> Tensor:
    """Mean negative log-likelihood of class indices ``y`` under rows of ``p``."""
    p = _as_tensor(p)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    return CrossEntropy.apply(p, y=y, n_classes=p.shape[-1] if p.ndim == 2 else 0)


# --------------------------------------------------------------------------
# masked channel pooling and map normalisation


def _check_mask(x, mask):
    if x.ndim != 4 or mask.shape != x.shape[:2]:
        raise ShapeError(f"masked pooling: need N×K×H×W maps and an N×K mask, got {x.shape} and {mask.shape}")
    if not np.all(mask.any(axis=1)):
        raise ContractError("masked pooling: every sample needs at least one selected channel")


class MaskedChannelMean(Op):
    name = "masked_channel_mean"

    @staticmethod
    def forward(rec, x):
        mask = rec.kwargs["mask"]
        _check_mask(x, mask)
        wts = mask / mask.sum(axis=1, keepdims=True)
        rec.saved["w"] = wts
        return np.einsum("nk,nkhw->nhw", wts, x)[:, None]

    @staticmethod
    def backward(rec, grad):
        return (rec.saved["w"][:, :, None, None] * grad,)


class MaskedChannelMax(Op):
    name = "masked_channel_max"

    @staticmethod
    def forward(rec, x):
        mask = rec.kwargs["mask"]
        _check_mask(x, mask)
        masked = np.where(mask[:, :, None, None], x, -np.inf)
        idx = masked.argmax(axis=1)[:, None]
        rec.saved["idx"], rec.saved["shape"] = idx, x.shape
        return np.take_along_axis(x, idx, axis=1)

    @staticmethod
    def backward(rec, grad):
        gx = np.zeros(rec.saved["shape"])
        np.put_along_axis(gx, rec.saved["idx"], grad, axis=1)
        return (gx,)


class MinMaxNormalize(Op):
    name = "minmax_normalize"

    @staticmethod
    def forward(rec, x):
        if x.ndim < 2:
            raise ShapeError(f"minmax_normalize: need H×W maps, got {x.shape}")
        flat = x.reshape(x.shape[:-2] + (-1,))
        lo_i, hi_i = flat.argmin(axis=-1), flat.argmax(axis=-1)
        lo = np.take_along_axis(flat, lo_i[..., None], axis=-1)
        hi = np.take_along_axis(flat, hi_i[..., None], axis=-1)
        rng = hi - lo
        const = rng <= 0
        safe = np.where(const, 1.0, rng)
        y = np.where(const, 0.0, (flat - lo) / safe)
        rec.saved.update(y=y, lo_i=lo_i, hi_i=hi_i, rng=safe, const=const, shape=x.shape)
        return y.reshape(x.shape)

    @staticmethod
    def backward(rec, grad):
        s = rec.saved
        g = grad.reshape(s["y"].shape)
        y, r = s["y"], s["rng"]
        gx = g / r
        d_lo = (g * (y - 1.0)).sum(axis=-1, keepdims=True) / r
        d_hi = -(g * y).sum(axis=-1, keepdims=True) / r
        np.put_along_axis(gx, s["lo_i"][..., None], np.take_along_axis(gx, s["lo_i"][..., None], axis=-1) + d_lo, axis=-1)
        np.put_along_axis(gx, s["hi_i"][..., None], np.take_along_axis(gx, s["hi_i"][..., None], axis=-1) + d_hi, axis=-1)
        gx = np.where(s["const"], 0.0, gx)
        return (gx.reshape(s["shape"]),)


def masked_channel_mean(x, mask) -> Tensor:
    """Per-pixel mean over the channels selected by a boolean N×K mask → N×1×H×W."""
    return MaskedChannelMean.apply(_as_tensor(x), mask=np.asarray(mask, dtype=bool))


def masked_channel_max(x, mask) -> Tensor:
    """Per-pixel max over the channels selected by a boolean N×K mask → N×1×H×W."""
    return MaskedChannelMax.apply(_as_tensor(x), mask=np.asarray(mask, dtype=bool))


def minmax_normalize(x) -> Tensor:
    """Rescale each H×W map to [0, 1]; constant maps become 0."""
    return MinMaxNormalize.apply(_as_tensor(x))


# --------------------------------------------------------------------------
# reverse pass


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._record is not None:
            for parent in node._record.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ∂loss/∂t into ``t.grad`` for every tensor ``t`` that requires it."""
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ContractError(f"backward needs a scalar tensor, got {shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        rec = node._record
        if rec is None:
            continue
        for parent, pg in zip(rec.inputs, rec.op.backward(rec, g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# --------------------------------------------------------------------------
# finite-difference oracle


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def _check_coords(loss_fn, x: Tensor, analytic, h, coords):
    flat = x.data.reshape(-1)
    worst = 0.0
    for i in coords:
        orig = flat[i]
        with no_grad():
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
        flat[i] = orig
        worst = max(worst, _rel_err(analytic[i], (fp - fm) / (2.0 * h)))
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-6, coords: Iterable[int] | None = None) -> float:
    """Max relative error between the analytic gradient of ``f`` at ``x`` and central differences.

    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = (x.grad if x.grad is not None else np.zeros_like(x.data)).reshape(-1).copy()
    x.grad = None
    idx = range(x.size) if coords is None else coords
    return _check_coords(lambda: f(x), x, analytic, h, idx)


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter max relative error for a closure over ``params``.

    With ``max_coords`` set, at most that many coordinates per tensor are
    checked, drawn without replacement from a seeded generator.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    rng = np.random.default_rng(seed)
    out = {}
    for name, p in params.items():
        analytic = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1).copy()
        if max_coords is None or p.size <= max_coords:
            coords = range(p.size)
        else:
            coords = np.sort(rng.choice(p.size, size=max_coords, replace=False))
        out[name] = _check_coords(loss_fn, p, analytic, h, coords)
    for p in params.values():
        p.grad = None
    return out


# --------------------------------------------------------------------------
# optimisation and initialisation


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0,
             velocity: dict | None = None) -> None:
    """One SGD update: ``v ← μv + g + λp``; ``p ← p − lr·v``; gradients are then cleared.

    ``velocity`` maps ``id(param)`` to its momentum buffer and persists
    across calls when the caller keeps it.
    """
    velocity = {} if velocity is None else velocity
    for p in params:
        if p.grad is None:
            raise ContractError(f"sgd_step: parameter {p!r} has no gradient")
        v = momentum * velocity.get(id(p), 0.0) + p.grad + weight_decay * p.data
        velocity[id(p)] = v
        p.data -= lr * v
        p.grad = None


class SGD:
    """SGD with momentum and weight decay over parameter groups with their own learning rates."""

    def __init__(self, groups, momentum: float = 0.0, weight_decay: float = 0.0):
        if isinstance(groups, dict) or (groups and isinstance(next(iter(groups)), Tensor)):
            raise ContractError("SGD expects a list of {'params': [...], 'lr': float} groups")
        self.groups = [{"params": list(g["params"]), "lr": float(g["lr"])} for g in groups]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[int, np.ndarray] = {}

    def step(self, lr_scale: float = 1.0) -> None:
        for g in self.groups:
            for p in g["params"]:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            sgd_step(g["params"], g["lr"] * lr_scale, self.momentum, self.weight_decay, self.velocity)

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None


def glorot_uniform(shape, rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


# --------------------------------------------------------------------------
# TNSR1 serialisation

TENSOR_MAGIC = b"TNSR1"


def tensor_to_bytes(t) -> bytes:
    """``TNSR1`` | u32 rank | u64 extents | little-endian float64 payload (row-major)."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    head = TENSOR_MAGIC + struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}Q", *data.shape)
    return head + np.ascontiguousarray(data, dtype="<f8").tobytes()


def read_tensor(fp: BinaryIO) -> Tensor:
    magic = fp.read(len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise ValueError(f"not a TNSR1 tensor (magic {magic!r})")
    raw = fp.read(4)
    if len(raw) != 4:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack("<I", raw)
    raw = fp.read(8 * rank)
    if len(raw) != 8 * rank:
        raise ValueError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape, dtype=np.int64))
    payload = fp.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError(f"truncated tensor payload: expected {8 * count} bytes, got {len(payload)}")
    return Tensor(np.frombuffer(payload, dtype="<f8").reshape(shape))


def write_tensor(fp: BinaryIO, t) -> None:
    fp.write(tensor_to_bytes(t))


def tensor_from_bytes(buf: bytes) -> Tensor:
    fp = io.BytesIO(buf)
    t = read_tensor(fp)
    if fp.read(1):
        raise ValueError("trailing bytes after tensor payload")
    return t
