"""Minimal deterministic reverse-mode autodiff over numpy arrays.

Only the primitives the transformer blocks need are implemented: same-shape
(and suffix-broadcast) elementwise arithmetic, 2-D and batched matmul, axis
plumbing (reshape / swap / concat / narrow), row softmax, layer norm, GELU
(exact Gaussian CDF form), log / exp, and two fused loss kernels.  Data is
float64 throughout.

A tensor produced by an op remembers its parents and a backward closure;
``backward`` on a scalar root walks the graph once in reverse topological
order.  Tensors with ``requires_grad=False`` act as constants: no closure is
built through them, so frozen subnetworks cost nothing at backward time and
never receive gradients.

Thread model: a graph is single-threaded, but distinct graphs may be used
from different threads; the grad-enabled flag and MAC counters are
thread-local.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ShapeError",
    "NumericError",
    "ContractError",
    "no_grad",
    "MacCounter",
    "backward",
    "topo_order",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "bmm",
    "linear",
    "reshape",
    "swap_axes",
    "concat",
    "narrow",
    "sum_all",
    "mean_all",
    "softmax_rows",
    "masked_softmax_rows",
    "log_softmax_rows",
    "layer_norm",
    "gelu",
    "log",
    "exp",
    "cross_entropy_logits",
    "SGD",
    "trunc_normal",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(ValueError):
    """Non-finite values where finite ones are required."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suppresses graph construction."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class MacCounter:
    """Counts multiply-accumulates of matmul-family ops run inside it.

    Only forward-pass linear algebra is counted (matmul, bmm, linear);
    elementwise ops, norms and softmax are excluded by design.
    """

    def __init__(self):
        self.macs = 0

    def __enter__(self):
        stack = getattr(_state, "mac_counters", None)
        if stack is None:
            stack = []
            _state.mac_counters = stack
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.mac_counters.pop()
        return False


def _count_macs(n: int) -> None:
    for counter in getattr(_state, "mac_counters", ()):
        counter.macs += n


class Tensor:
    """An n-d float64 array with optional gradient tracking.

    ``grad`` is populated by ``backward`` and always matches ``data``'s
    shape.  Leaf tensors with ``requires_grad=False`` are constants.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op,
                      parents=tuple(parents), backward=backward_fn)
    return Tensor(data, op=op)


def _sum_to_shape(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- graph traversal ------------------------------------------------------

def topo_order(root: Tensor) -> list[Tensor]:
    """Operation records of the graph below ``root``, in topological order.

    Each node is visited exactly once; only grad-requiring nodes are kept
    (constants terminate the walk).
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every grad-requiring tensor below a scalar root."""
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = topo_order(root)
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# -- elementwise arithmetic ------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def bwd(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _make(out, (a, b), "add", bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None

    def bwd(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(-g, b.shape)

    return _make(out, (a, b), "sub", bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def bwd(g):
        return (_sum_to_shape(g * b.data, a.shape),
                _sum_to_shape(g * a.data, b.shape))

    return _make(out, (a, b), "mul", bwd)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), "neg", lambda g: (-g,))


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product with the usual transpose gradient rules."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    _count_macs(a.shape[0] * a.shape[1] * b.shape[1])
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), "matmul", bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over a shared leading axis: (B,m,k) @ (B,k,n)."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError(f"bmm expects 3-D operands, got {a.shape} @ {b.shape}")
    if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError(f"bmm: shapes disagree for {a.shape} @ {b.shape}")
    _count_macs(a.shape[0] * a.shape[1] * a.shape[2] * b.shape[2])
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g

    return _make(out, (a, b), "bmm", bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + b for 2-D x (rows are samples/tokens)."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"linear expects 2-D operands, got {x.shape} @ {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: inner dimensions disagree for {x.shape} @ {w.shape}")
    _count_macs(x.shape[0] * x.shape[1] * w.shape[1])
    out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bwd(g):
        gx = g @ w.data.T
        gw = x.data.T @ g
        gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, "linear", bwd)


# -- shape plumbing ---------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    src = a.shape

    def bwd(g):
        return (g.reshape(src),)

    return _make(out, (a,), "reshape", bwd)


def swap_axes(a: Tensor, ax0: int, ax1: int) -> Tensor:
    out = np.swapaxes(a.data, ax0, ax1)

    def bwd(g):
        return (np.swapaxes(g, ax0, ax1),)

    return _make(out, (a,), "swap_axes", bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of zero tensors")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, "concat", bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient zero-pads back."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}:{start + length}] out of bounds for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(out, (a,), "narrow", bwd)


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum())

    def bwd(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), "sum", bwd)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.mean())

    def bwd(g):
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(out, (a,), "mean", bwd)


# -- nonlinear kernels -------------------------------------------------------

def softmax_rows(x: Tensor, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of x/scale over the last axis.

    The row maximum is subtracted before exponentiation so large logits
    stay finite.  Rows of the output sum to 1.
    """
    if scale <= 0:
        raise ContractError(f"softmax_rows: scale must be positive, got {scale}")
    if not np.isfinite(x.data).all():
        raise NumericError("softmax_rows: non-finite input")
    z = x.data / scale
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - inner)) / scale,)

    return _make(y, (x,), "softmax_rows", bwd)


def masked_softmax_rows(x: Tensor, mask: np.ndarray, scale: float = 1.0) -> Tensor:
    """Softmax over the last axis restricted to ``mask``-enabled entries.

    Disabled entries get exactly zero weight.  Every row must keep at
    least one enabled entry.
    """
    if scale <= 0:
        raise ContractError(f"masked_softmax_rows: scale must be positive, got {scale}")
    if not np.isfinite(x.data).all():
        raise NumericError("masked_softmax_rows: non-finite input")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_softmax_rows: mask {mask.shape} vs input {x.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax_rows: a row has no enabled entries")
    z = x.data / scale
    z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return ((y * (g - inner)) / scale,)

    return _make(y, (x,), "masked_softmax_rows", bwd)


def log_softmax_rows(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def bwd(g):
        soft = np.exp(out)
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), "log_softmax_rows", bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis vector to zero mean / unit population variance,
    then apply the learned affine map."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), "layer_norm", bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact-CDF GELU: x * Phi(x) with Phi the standard normal CDF.

    The erf-based form is used (not the tanh approximation) so reference
    oracles are unambiguous.
    """
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), "gelu", bwd)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def bwd(g):
        return (g / x.data,)

    return _make(out, (x,), "log", bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        return (g * out,)

    return _make(out, (x,), "exp", bwd)


def cross_entropy_logits(logits: Tensor, label: int) -> Tensor:
    """Cross entropy of a single 1-D logit vector against an integer label."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy_logits expects 1-D logits, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ContractError(f"label {label} outside logit range {n}")
    m = logits.data.max()
    shifted = logits.data - m
    lse = m + np.log(np.exp(shifted).sum())
    out = np.asarray(lse - logits.data[label])

    def bwd(g):
        soft = np.exp(shifted)
        soft = soft / soft.sum()
        soft[label] -= 1.0
        return (g * soft,)

    return _make(out, (logits,), "cross_entropy", bwd)


# -- training utilities ------------------------------------------------------

class SGD:
    """Plain SGD with optional momentum and L2 weight decay.

    Refuses frozen tensors at construction: freezing is enforced by never
    registering a parameter here, not by skipping at step time.
    """

    def __init__(self, params: Iterable[Tensor], lr: float,
                 weight_decay: float = 0.0, momentum: float = 0.0):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ContractError("SGD given a frozen tensor")
        self.lr = lr
        self.weight_decay = weight_decay
        self.momentum = momentum
        self._velocity = [np.zeros_like(p.data) for p in self.params] if momentum else None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self._velocity is not None:
                v = self._velocity[i]
                v *= self.momentum
                v += g
                g = v
            p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def trunc_normal(rng: np.random.Generator, shape: Sequence[int],
                 std: float = 0.02) -> np.ndarray:
    """Seeded normal draw truncated to two standard deviations."""
    out = rng.normal(0.0, std, size=tuple(shape))
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def fan_in_normal(rng: np.random.Generator, shape: Sequence[int],
                  fan_in: int | None = None) -> np.ndarray:
    """Truncated normal scaled to the matrix fan-in (std = 1/sqrt(fan_in)).

    At desk-scale widths a fixed tiny std leaves gradients too small to
    train in reasonable time; scaling by fan-in keeps activations O(1).
    """
    shape = tuple(shape)
    if fan_in is None:
        fan_in = shape[-2] if len(shape) >= 2 else shape[-1]
    return trunc_normal(rng, shape, std=1.0 / math.sqrt(fan_in))
