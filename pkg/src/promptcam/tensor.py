"""Dense f64 tensors with a reverse-mode gradient tape.

Storage convention: token sequences are stored row-major as ``(batch, tokens, dim)``,
i.e. the transpose of the column-stacked ``D x T`` matrices used in the usual ViT
notation. A column ``e^j`` of ``E`` is row ``E[:, j, :]`` here.

Usage::

    with GradTape() as tape:
        loss = cross_entropy(x @ w, labels)
    grads = reverse_mode_gradient(tape, loss)

Operations only record when a tape is active and at least one input requires a
gradient, so inference outside a tape pays no bookkeeping cost.
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "GradientError",
    "tensor",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "take",
    "tsum",
    "softmax",
    "layer_norm",
    "gelu",
    "cross_entropy",
    "reverse_mode_gradient",
    "finite_difference_gradient",
    "max_relative_error",
]

GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class GradientError(RuntimeError):
    """Raised when a backward pass is requested on an invalid graph."""


class Tensor:
    """An f64 array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only division by a scalar is supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: int
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


@dataclass
class GradTape:
    """Ordered record of primitive applications.

    Node ids are assigned in creation order, so every input id precedes the id of
    the output it feeds. Leaves are tensors with ``requires_grad`` that entered the
    tape as operands; only those receive gradients.
    """

    entries: list[TapeEntry] = field(default_factory=list)
    _ids: dict[int, int] = field(default_factory=dict)
    _nodes: list[Tensor] = field(default_factory=list)
    _leaves: set[int] = field(default_factory=set)
    _token: contextvars.Token | None = None

    def __enter__(self) -> "GradTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def node_id(self, t: Tensor) -> int | None:
        return self._ids.get(id(t))

    def _register(self, t: Tensor, leaf: bool) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self._nodes)
            self._ids[id(t)] = nid
            self._nodes.append(t)
            if leaf:
                self._leaves.add(nid)
        return nid

    def leaves(self) -> list[Tensor]:
        return [self._nodes[i] for i in sorted(self._leaves)]

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward) -> None:
        ids = []
        for t in inputs:
            if t.requires_grad or id(t) in self._ids:
                ids.append(self._register(t, leaf=id(t) not in self._ids))
            else:
                ids.append(-1)
        oid = self._register(out, leaf=False)
        self.entries.append(TapeEntry(op, tuple(ids), oid, backward))


_ACTIVE_TAPE: contextvars.ContextVar[GradTape | None] = contextvars.ContextVar(
    "promptcam_active_tape", default=None
)


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    tracked = tape is not None and any(
        t.requires_grad or tape.node_id(t) is not None for t in inputs
    )
    out = Tensor(data, requires_grad=tracked)
    if tracked:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result("mul", ad * bd, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    return _result("scale", a.data * s, (a,), lambda g: (g * s,))


# --- linear algebra and layout ----------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(
        "transpose",
        np.ascontiguousarray(np.transpose(a.data, axes)),
        (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _result("reshape", data, (a,), lambda g: (g.reshape(src),))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    ref = parts[0].shape
    ax = axis % len(ref)
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            p.shape[i] != ref[i] for i in range(len(ref)) if i != ax
        ):
            raise ShapeError(f"concat along {axis}: incompatible shapes {[q.shape for q in parts]}")
    bounds = np.cumsum([p.shape[ax] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result("concat", np.concatenate([p.data for p in parts], axis=ax), parts, backward)


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""
    if not isinstance(index, tuple):
        index = (index,)
    for ix in index:
        if not isinstance(ix, (slice, int, type(Ellipsis))):
            raise TypeError("take supports slices and integers only")
    src = a.shape
    data = a.data[index]

    def backward(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _result("take", np.array(data, copy=True), (a,), backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


# --- nonlinear primitives ---------------------------------------------------


def _softmax_array(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax. Entries equal to -inf get exactly zero weight."""
    p = _softmax_array(x.data, axis)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _result("softmax", p, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, then apply ``gamma * xhat + beta``."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    xshape = x.shape

    def backward(g):
        g_gamma = _unbroadcast(g * xhat, (d,))
        g_beta = _unbroadcast(g, (d,))
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx.reshape(xshape), g_gamma, g_beta

    return _result("layer_norm", xhat * gd + beta.data, (x, gamma, beta), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation (used identically in forward and backward)."""
    xd = x.data
    u = GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _result("gelu", out, (x,), backward)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is ``(batch, classes)``; the gradient per row is
    ``(softmax - onehot) / batch``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for {n} rows of logits")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z[rows, labels]))
    p = _softmax_array(z, 1)

    def backward(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (d * (g.reshape(()) / n),)

    return _result("cross_entropy", np.array([loss]), (logits,), backward)


# --- gradients --------------------------------------------------------------


def reverse_mode_gradient(tape: GradTape, loss: Tensor, accumulate: bool = True) -> dict[int, np.ndarray]:
    """Back-propagate from a scalar ``loss`` over ``tape``.

    Returns a mapping ``id(leaf) -> gradient`` for every leaf that requires a
    gradient; also stores the gradient on ``leaf.grad`` (summed into any existing
    buffer when ``accumulate`` is true).
    """
    if loss.data.size != 1:
        raise GradientError(f"loss must be scalar, got shape {loss.shape}")
    root = tape.node_id(loss)
    if root is None:
        raise GradientError("loss was not produced on this tape (no input requires grad?)")
    grads: dict[int, np.ndarray] = {root: np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output, None)
        if g is None:
            continue
        for nid, gi in zip(entry.inputs, entry.backward(g)):
            if nid < 0 or gi is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + gi
            else:
                grads[nid] = gi
    out: dict[int, np.ndarray] = {}
    for nid in sorted(tape._leaves):
        t = tape._nodes[nid]
        if not t.requires_grad:
            continue
        g = grads.get(nid)
        if g is None:
            g = np.zeros_like(t.data)
        g = g.reshape(t.shape)
        if accumulate and t.grad is not None:
            t.grad = t.grad + g
        else:
            t.grad = g.copy()
        out[id(t)] = t.grad
    return out


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-4) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    if h <= 0:
        raise ValueError("step h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, copy=True)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(base))
        flat[i] = orig - h
        fm = float(f(base))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a, b, floor: float = 1e-6) -> float:
    """``max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)``.

    ``floor`` keeps coordinates whose true gradient is ~0 from dividing by noise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {b.shape}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
