"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure computing the vector-Jacobian product.  Calling
:func:`backward` on a scalar loss walks the recorded graph in exact reverse
topological order and accumulates ``grad`` on every tensor that requires it.

Parameters default to float32.  Loss heads cast to float64 (see
:meth:`Tensor.astype`) so reductions over a batch accumulate in double
precision.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import BackwardStateError, ContractError, NumericDomainError

PROB_EPS = 1e-12

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference only)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(data, dtype) -> np.ndarray:
    if isinstance(data, np.generic):  # numpy scalars keep their precision
        data = np.asarray(data)
    if isinstance(data, np.ndarray):
        return data.astype(dtype, copy=False) if dtype is not None else data
    arr = np.asarray(data, dtype=dtype if dtype is not None else np.float32)
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the computation graph.

    ``data`` is a numpy array; ``grad`` is ``None`` until a backward pass
    reaches this tensor.
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: Sequence["Tensor"] = (), _op: str = ""):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = tuple(_parents)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op!r})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def astype(self, dtype):
        return astype(self, dtype)


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float32))


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# Graph traversal
# ---------------------------------------------------------------------------

class Graph:
    """Topologically ordered view of the operations that produced ``root``."""

    def __init__(self, root: Tensor):
        self.root = root
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order
        self.index = {id(n): i for i, n in enumerate(order)}

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Populate ``grad`` on every tensor requiring it that ``loss`` depends on.

    The graph is consumed: its closures are released and a second call on
    the same loss raises :class:`BackwardStateError`.
    """
    if loss._consumed:
        raise BackwardStateError("backward already ran on this graph; run a new forward pass")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    if not np.isfinite(loss.data).all():
        raise NumericDomainError(f"non-finite loss {loss.data!r}")
    graph = graph if graph is not None else Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NumericDomainError(f"non-finite gradient reached {node!r}")
        if node._backward is None:
            node._accum(g)
            continue
        node.grad = g
        node._grads_sink = grads
        node._backward(g)
        del node._grads_sink
    for node in graph.nodes:
        node._backward = None
        node._consumed = True
        if node._parents:
            node._parents = ()
    loss._consumed = True


def _send(parent: Tensor, child: Tensor, g: np.ndarray) -> None:
    """Route gradient ``g`` from ``child`` into ``parent``."""
    if not parent.requires_grad:
        return
    sink = child._grads_sink
    key = id(parent)
    if key in sink:
        sink[key] = sink[key] + g
    else:
        sink[key] = g


# ---------------------------------------------------------------------------
# Elementwise and reduction primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b, a.dtype if isinstance(a, Tensor) else None)
    out_data = a.data + b.data

    def bw(g):
        _send(a, out, _unbroadcast(g, a.shape))
        _send(b, out, _unbroadcast(g, b.shape))

    out = _make(out_data, (a, b), "add", bw)
    return out


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _send(a, out, -g)

    out = _make(-a.data, (a,), "neg", bw)
    return out


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a.dtype)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _send(a, out, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _send(b, out, _unbroadcast(g * a.data, b.shape))

    out = _make(out_data, (a, b), "mul", bw)
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    out_data = a.data ** exponent

    def bw(g):
        _send(a, out, g * exponent * a.data ** (exponent - 1))

    out = _make(out_data, (a,), "pow", bw)
    return out


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bw(g):
        _send(a, out, g * out_data)

    out = _make(out_data, (a,), "exp", bw)
    return out


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NumericDomainError("log of a non-positive value; clamp first")
    out_data = np.log(a.data)

    def bw(g):
        _send(a, out, g / a.data)

    out = _make(out_data, (a,), "log", bw)
    return out


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo
    out_data = np.where(mask, a.data, np.asarray(lo, dtype=a.dtype))

    def bw(g):
        _send(a, out, g * mask)

    out = _make(out_data, (a,), "clamp_min", bw)
    return out


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out_data = a.data * mask

    def bw(g):
        _send(a, out, g * mask)

    out = _make(out_data, (a,), "relu", bw)
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _send(a, out, np.broadcast_to(g, a.shape).astype(a.dtype))

    out = _make(np.asarray(out_data), (a,), "sum", bw)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), np.asarray(1.0 / n, dtype=a.dtype))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    out_data = a.data.reshape(shape)

    def bw(g):
        _send(a, out, g.reshape(a.shape))

    out = _make(out_data, (a,), "reshape", bw)
    return out


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def astype(a: Tensor, dtype) -> Tensor:
    src = a.dtype
    out_data = a.data.astype(dtype)

    def bw(g):
        _send(a, out, g.astype(src))

    out = _make(out_data, (a,), "astype", bw)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            _send(a, out, g @ b.data.T)
        if b.requires_grad:
            _send(b, out, a.data.T @ g)

    out = _make(out_data, (a, b), "matmul", bw)
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractError(f"linear: input {x.shape} vs weight {weight.shape}")
    out_data = x.data @ weight.data.T
    if bias is not None:
        out_data = out_data + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        if x.requires_grad:
            _send(x, out, g @ weight.data)
        if weight.requires_grad:
            _send(weight, out, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            _send(bias, out, g.sum(axis=0))

    out = _make(out_data, parents, "linear", bw)
    return out


# ---------------------------------------------------------------------------
# Probability heads
# ---------------------------------------------------------------------------

def _check_logits(z: Tensor) -> None:
    if z.ndim != 2 or z.shape[1] < 2:
        raise ContractError(f"expected logits of shape [B, K>=2], got {z.shape}")
    if not np.isfinite(z.data).all():
        raise NumericDomainError("non-finite logits")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(z: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction."""
    _check_logits(z)
    p = _softmax_np(z.data)

    def bw(g):
        _send(z, out, p * (g - (g * p).sum(axis=1, keepdims=True)))

    out = _make(p, (z,), "softmax", bw)
    return out


def log_softmax(z: Tensor) -> Tensor:
    _check_logits(z)
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - lse
    p = np.exp(out_data)

    def bw(g):
        _send(z, out, g - p * g.sum(axis=1, keepdims=True))

    out = _make(out_data, (z,), "log_softmax", bw)
    return out


def cross_entropy(p: Tensor, q, eps: float = PROB_EPS) -> Tensor:
    """Mean over rows of ``-sum_k q_k log max(p_k, eps)``.

    ``p`` are predicted probabilities, ``q`` the target distribution.  The
    result is a non-negative scalar.
    """
    q = _wrap(q, p.dtype)
    if p.shape != q.shape or p.ndim != 2:
        raise ContractError(f"cross_entropy shape mismatch {p.shape} vs {q.shape}")
    logp = log(clamp_min(p, eps))
    per_row = neg(tsum(mul(q, logp), axis=1))
    return mean(per_row)


def cross_entropy_logits(logits: Tensor, q) -> Tensor:
    """Same quantity as :func:`cross_entropy` of ``softmax(logits)``, in log space."""
    q = _wrap(q, logits.dtype)
    if logits.shape != q.shape:
        raise ContractError(f"cross_entropy shape mismatch {logits.shape} vs {q.shape}")
    return mean(neg(tsum(mul(q, log_softmax(logits)), axis=1)))


def one_hot(labels: Iterable[int], num_classes: int, dtype=np.float64) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# Convolution and pooling
# ---------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_nhwc_forward(xd, wd, stride, pad):
    B, H, W, C = xd.shape
    F, _, k, _ = wd.shape
    Ho, Wo = conv_output_size(H, k, stride, pad), conv_output_size(W, k, stride, pad)
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else np.ascontiguousarray(xd)
    # Within one kernel row the k*C values of a window are contiguous in NHWC.
    # Strides come from the shape: numpy may report arbitrary strides for
    # length-1 axes even on contiguous arrays.
    Hp, Wp = xp.shape[1], xp.shape[2]
    sC = xp.itemsize
    sW, sH, sB = C * sC, Wp * C * sC, Hp * Wp * C * sC
    win = as_strided(xp, (B, Ho, Wo, k, k * C), (sB, sH * stride, sW * stride, sH, sC),
                     writeable=False)
    cols = win.reshape(B * Ho * Wo, k * k * C)
    wmat = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(F, k * k * C)
    return xp.shape, cols, wmat, Ho, Wo


def conv2d_nhwc(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of a channels-last (B, H, W, C) batch with an (F, C, k, k) kernel.

    This is the layout the networks use internally; :func:`conv2d` wraps it
    for channels-first callers.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects 4-d input and kernel, got {x.shape}, {weight.shape}")
    B, H, W, C = x.shape
    F, Cw, kh, kw = weight.shape
    if C != Cw or kh != kw:
        raise ContractError(f"conv2d channel/kernel mismatch: input C={C}, kernel {weight.shape}")
    k = kh
    if stride < 1 or pad < 0 or k > H + 2 * pad or k > W + 2 * pad:
        raise ContractError(f"conv2d kernel {k} does not fit input {H}x{W} with pad {pad}")
    xp_shape, cols, wmat, Ho, Wo = _conv_nhwc_forward(x.data, weight.data, stride, pad)
    out2d = cols @ wmat.T
    if bias is not None:
        out2d += bias.data
    out_data = out2d.reshape(B, Ho, Wo, F)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2d = g.reshape(B * Ho * Wo, F)
        if weight.requires_grad:
            dw = (g2d.T @ cols).reshape(F, k, k, C).transpose(0, 3, 1, 2)
            _send(weight, out, np.ascontiguousarray(dw))
        if bias is not None and bias.requires_grad:
            _send(bias, out, g2d.sum(axis=0))
        if x.requires_grad and stride == 1 and pad <= k - 1:
            # Input gradient of a stride-1 correlation is a full correlation
            # of the upstream gradient with the flipped, transposed kernel.
            wflip = np.ascontiguousarray(weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            _, gcols, gmat, _, _ = _conv_nhwc_forward(g, wflip, 1, k - 1 - pad)
            _send(x, out, (gcols @ gmat.T).reshape(B, H, W, C))
        elif x.requires_grad:
            dcols = (g2d @ wmat).reshape(B, Ho, Wo, k, k, C)
            dxp = np.zeros(xp_shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride, :] += dcols[:, :, :, i, j, :]
            _send(x, out, dxp[:, pad:pad + H, pad:pad + W, :] if pad else dxp)

    out = _make(out_data, parents, "conv2d", bw)
    return out


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    out_data = np.ascontiguousarray(a.data.transpose(axes))

    def bw(g):
        _send(a, out, np.ascontiguousarray(g.transpose(inv)))

    out = _make(out_data, (a,), "transpose", bw)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with an (F, C, k, k) kernel."""
    if x.ndim != 4:
        raise ContractError(f"conv2d expects NCHW input, got {x.shape}")
    y = conv2d_nhwc(transpose(x, (0, 2, 3, 1)), weight, bias, stride, pad)
    return transpose(y, (0, 3, 1, 2))


def maxpool2d_nhwc(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k×k max pooling on a channels-last batch.

    Trailing rows/columns that do not fill a window are dropped.  Ties send
    the gradient to the first maximal element in row-major window order.
    """
    if x.ndim != 4:
        raise ContractError(f"maxpool2d expects a 4-d batch, got {x.shape}")
    B, H, W, C = x.shape
    if k < 1 or k > H or k > W:
        raise ContractError(f"pool window {k} does not fit input {H}x{W}")
    Ho, Wo = H // k, W // k
    views = [x.data[:, i:Ho * k:k, j:Wo * k:k, :] for i in range(k) for j in range(k)]
    out_data = views[0].copy()
    for v in views[1:]:
        np.maximum(out_data, v, out=out_data)

    def bw(g):
        dx = np.zeros(x.shape, dtype=x.dtype)
        taken = np.zeros(out_data.shape, dtype=bool)
        for n, v in enumerate(views):
            hit = (v == out_data) & ~taken
            taken |= hit
            i, j = divmod(n, k)
            dx[:, i:Ho * k:k, j:Wo * k:k, :] = g * hit
        _send(x, out, dx)

    out = _make(out_data, (x,), "maxpool2d", bw)
    return out


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pooling on an NCHW batch."""
    if x.ndim != 4:
        raise ContractError(f"maxpool2d expects NCHW input, got {x.shape}")
    y = maxpool2d_nhwc(transpose(x, (0, 2, 3, 1)), k)
    return transpose(y, (0, 3, 1, 2))
