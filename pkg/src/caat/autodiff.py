"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations on :class:`Tensor` objects are recorded on the innermost active
:class:`Tape` whenever at least one input requires a gradient.  Outside of a
tape, operations run forward only and their outputs never require gradients.

    >>> with Tape() as tape:
    ...     x = Tensor([1.0, -2.0], requires_grad=True)
    ...     loss = (x * x).sum()
    ...     tape.backward(loss)
    >>> x.grad
    array([ 2., -4.])

Gradient accumulation is never implicit: ``backward`` overwrites ``grad`` on
every leaf it reaches and a tape can only be replayed once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, LabelError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "broadcast_to",
    "tensor_sum",
    "tensor_mean",
    "gelu",
    "softmax",
    "layer_norm",
    "softmax_cross_entropy",
    "maximum",
    "pick",
    "patchify",
    "gradcheck",
]

_TAPES: list["Tape"] = []


def _active_tape():
    return _TAPES[-1] if _TAPES else None


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    ``data`` is treated as immutable once the tensor has been used in a
    forward computation; operations always allocate fresh outputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis, keepdims)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


@dataclass
class _Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable = field(repr=False)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so inputs always precede their
    consumers and a reverse sweep is a valid topological traversal.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, Tensor] = {}
        self.consumed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, backward_fn):
        for t in inputs:
            if t.requires_grad and t._node is None and id(t) not in self._leaves:
                self._leaves[id(t)] = t
        output._tape = self
        output._node = len(self.nodes)
        self.nodes.append(_Node(op, inputs, output, backward_fn))

    @property
    def leaves(self):
        return list(self._leaves.values())

    def backward(self, loss: Tensor):
        """Populate ``grad`` on every leaf recorded on this tape."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self.consumed:
            raise ContractError("tape already replayed; run a fresh forward pass before backward")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._node + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in self._leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
        self.consumed = True
        self.nodes = []


def backward(loss: Tensor):
    """Replay the tape that produced ``loss``."""
    if loss._tape is None:
        raise ContractError("loss has no recorded graph; compute it inside an active Tape")
    loss._tape.backward(loss)


def _emit(op, inputs, out_data, backward_fn):
    out = Tensor(out_data)
    if any(t.requires_grad for t in inputs):
        tape = _active_tape()
        if tape is not None:
            out.requires_grad = True
            tape.record(op, inputs, out, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), ad * bd, bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("div", (a, b), out, bw)


def neg(a):
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def maximum(a, floor: float):
    """Elementwise ``max(a, floor)``; ties route the gradient to ``a``."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _emit("maximum", (a,), np.where(keep, a.data, floor), lambda g: (g * keep,))


# -- linear algebra and shape manipulation ---------------------------------

def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(np.matmul(g, _swap_last(bd)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(_swap_last(ad), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), out, bw)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(src),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes),
                 lambda g: (np.transpose(g, inverse),))


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit("getitem", (a,), np.array(out, dtype=np.float64), bw)


def concat(tensors: Sequence, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise DimensionError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def broadcast_to(a, shape):
    a = as_tensor(a)
    src = a.shape
    try:
        out = np.array(np.broadcast_to(a.data, shape))
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot broadcast {src} to {tuple(shape)}") from None
    return _emit("broadcast_to", (a,), out, lambda g: (_unbroadcast(g, src),))


def patchify(images, patch: int):
    """Split ``[b, c, h, w]`` images into ``[b, (h/p)*(w/p), c*p*p]`` patch rows."""
    images = as_tensor(images)
    if images.ndim != 4:
        raise DimensionError(f"patchify expects [b, c, h, w], got {images.shape}")
    b, c, h, w = images.shape
    if h % patch or w % patch:
        raise DimensionError(f"patchify: image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    x = reshape(images, (b, c, gh, patch, gw, patch))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (b, gh * gw, c * patch * patch))


# -- reductions --------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tensor_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    src = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), bw)


def tensor_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    return tensor_sum(a, axis, keepdims) * (1.0 / count)


# -- nonlinearities -----------------------------------------------------------

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact GELU, ``x * Phi(x)``."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def bw(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return _emit("gelu", (a,), x * cdf, bw)


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (a,), y, bw)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last dim {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gd
            gx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                         - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).sum(axis=lead)
        if beta.requires_grad:
            gbeta = g.sum(axis=lead)
        return gx, ggamma, gbeta

    return _emit("layer_norm", (x, gamma, beta), xhat * gd + beta.data, bw)


def _check_labels(labels, k, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    labels = labels.astype(np.int64)
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        raise LabelError(f"label {int(labels[bad[0]])} at index {int(bad[0])} outside [0, {k})")
    return labels


def softmax_cross_entropy(logits, labels):
    """Batch-mean cross-entropy of ``[b, k]`` logits against integer labels."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [b, k] logits, got {logits.shape}")
    b, k = logits.shape
    labels = _check_labels(labels, k, b)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    rows = np.arange(b)
    loss = float(np.mean(np.log(s[:, 0]) - z[rows, labels]))

    def bw(g):
        p = e / s
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss), bw)


def pick(a, columns):
    """Gather ``a[i, columns[i]]`` from a 2-D tensor."""
    a = as_tensor(a)
    columns = np.asarray(columns, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def bw(g):
        full = np.zeros_like(a.data)
        full[rows, columns] = g
        return (full,)

    return _emit("pick", (a,), a.data[rows, columns], bw)


# -- verification helpers ------------------------------------------------------

def relative_error(analytic, numeric, floor=1e-6):
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_gradient(fn, arrays, index, step=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    out = np.zeros_like(target)
    flat = target.reshape(-1)
    grad_flat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(*base))
        flat[i] = orig - step
        lo = float(fn(*base))
        flat[i] = orig
        grad_flat[i] = (hi - lo) / (2.0 * step)
    return out


def gradcheck(fn, arrays, step=1e-5, floor=1e-6):
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` maps tensors to a scalar tensor.  Returns the worst relative error
    over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with Tape() as tape:
        leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        loss = fn(*leaves)
        tape.backward(loss)
    analytic = [leaf.grad for leaf in leaves]

    def scalar(*vals):
        return fn(*[Tensor(v) for v in vals]).item()

    worst = 0.0
    for i in range(len(arrays)):
        numeric = numeric_gradient(scalar, arrays, i, step)
        worst = max(worst, relative_error(analytic[i], numeric, floor))
    return worst
