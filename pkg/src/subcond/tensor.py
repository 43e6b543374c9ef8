"""Dense float64 tensors with reverse-mode automatic differentiation.

Each differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output adjoint to parent adjoints.
``Tensor.backward`` walks that graph once in reverse topological order and
then tears it down, so a graph can only be differentiated once.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import DimensionError, InputError, NonFiniteError, UsageError

ACTIVATIONS = ("identity", "relu", "elu", "gelu")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

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
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self):
        return tsum(self)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(value, what):
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise DimensionError(f"{what} must be an int or a pair, got {value!r}")
        out = (int(value[0]), int(value[1]))
    else:
        out = (int(value), int(value))
    return out


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a, c):
    """Multiply by a Python/NumPy scalar constant."""
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bw)


def tsum(a):
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a, axis=None):
    if axis is None:
        n = a.size
        return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    n = int(np.prod([a.shape[ax] for ax in axes]))

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape) / n,)

    return _make(a.data.mean(axis=axes), (a,), bw)


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a):
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T, (a,), lambda g: (g.T,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product of a ``p x q`` and a ``q x r`` tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def take_rows(a, index):
    """Gather rows ``a[index]``; the adjoint scatters back with accumulation."""
    index = np.asarray(index, dtype=np.intp)

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.data[index], (a,), bw)


def scatter_rows(parts, indices, n_rows, tail_shape):
    """Place ``parts[i]`` at rows ``indices[i]`` of a zero tensor with ``n_rows`` rows.

    Rows not covered by any index stay zero. The index sets must be disjoint.
    """
    out = np.zeros((n_rows,) + tuple(tail_shape))
    idx = [np.asarray(ix, dtype=np.intp) for ix in indices]
    for part, ix in zip(parts, idx):
        out[ix] = part.data

    def bw(g):
        return tuple(g[ix] for ix in idx)

    return _make(out, tuple(parts), bw)


# ---------------------------------------------------------------- convolution


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, k, stride=1, padding=0):
    """2-D cross-correlation with zero padding and dilation 1.

    ``x`` is ``N x C_in x H x W``, ``k`` is ``C_out x C_in x kh x kw``.
    ``stride`` and ``padding`` are ints or ``(height, width)`` pairs.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
    n, c_in, h, w = x.shape
    c_out, kc, kh, kw = k.shape
    if kc != c_in:
        raise DimensionError(f"kernel expects {kc} input channels, input has {c_in}")
    sh, sw = _pair(stride, "stride")
    ph, pw = _pair(padding, "padding")
    if sh < 1 or sw < 1:
        raise DimensionError(f"stride must be positive, got {(sh, sw)}")
    if ph < 0 or pw < 0:
        raise DimensionError(f"padding must be non-negative, got {(ph, pw)}")
    if kh > h + 2 * ph or kw > w + 2 * pw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}"
        )
    oh = conv_output_size(h, kh, sh, ph)
    ow = conv_output_size(w, kw, sw, pw)
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # (N, C, H', W', kh, kw) strided view, no copy
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :oh, :ow]
    out = np.einsum("nchwij,ocij->nohw", cols, k.data, optimize=True)

    def bw(g):
        dk = np.einsum("nchwij,nohw->ocij", cols, g, optimize=True)
        dcols = np.einsum("nohw,ocij->nchwij", g, k.data, optimize=True)
        dxp = np.zeros(xp.shape)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dcols[..., i, j]
        dx = dxp[:, :, ph : ph + h, pw : pw + w]
        return dx, dk

    return _make(out, (x, k), bw)


# ---------------------------------------------------------------- nonlinearities


def activation(x, kind):
    """Elementwise ``identity``, ``relu``, ``elu`` (alpha 1) or exact ``gelu``."""
    if kind == "identity":
        return x
    d = x.data
    if kind == "relu":
        mask = d > 0
        return _make(d * mask, (x,), lambda g: (g * mask,))
    if kind == "elu":
        neg_part = np.expm1(np.minimum(d, 0.0))
        out = np.where(d > 0, d, neg_part)
        slope = np.where(d > 0, 1.0, neg_part + 1.0)
        return _make(out, (x,), lambda g: (g * slope,))
    if kind == "gelu":
        cdf = 0.5 * (1.0 + erf(d / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * d * d) / np.sqrt(2.0 * np.pi)
        return _make(d * cdf, (x,), lambda g: (g * (cdf + d * pdf),))
    raise InputError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``."""
    if logits.ndim != 2:
        raise DimensionError(f"logits must be N x K, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if n < 1:
        raise InputError("cross-entropy needs at least one row")
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} logit rows")
    if labels.min() < 0 or labels.max() >= k:
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise InputError(f"label {bad} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(n)
    loss = -log_p[rows, labels].mean()
    if not np.isfinite(loss):
        raise NonFiniteError("cross-entropy loss is not finite")

    def bw(g):
        p = np.exp(log_p)
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return _make(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------- backward pass


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1 or loss.ndim > 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("backward already ran on this graph")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    order = _topological(loss)
    adj = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = adj.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {node.name or 'tensor'}")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            adj[key] = pg if key not in adj else adj[key] + pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node.requires_grad = False
    loss._consumed = True
