"""Minimal deterministic reverse-mode differentiation over numpy arrays.

Every primitive computes in float64 internally and casts the result back to the
operand dtype (float32 by default), so reductions accumulate in 64 bits while
stored activations and parameters stay 32-bit.  Tensors built from float64 data
stay float64 end to end, which is what the finite-difference checks rely on.

Operations are recorded on the innermost active :class:`Tape` of the calling
thread.  ``backward`` replays that record in exact reverse order.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, InternalError, NumericError, ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_local = threading.local()


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value in {what}")


class Tensor:
    """A float array with an optional gradient slot and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "tag")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.tag = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))


def _as_tensor(x, dtype):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable
    index: int
    tape: "Tape"


@dataclass(eq=False)
class Tape:
    """Ordered record of executed primitives.

    Use as a context manager to scope recording; outside any ``with Tape()``
    block a per-thread default tape is used.
    """

    nodes: list = field(default_factory=list)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise InternalError("tape stack corrupted")
        stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, inputs, output, backward_fn):
        for inp in inputs:
            node = inp._node
            if node is not None and (node.tape is not self or node.index >= len(self.nodes)):
                raise InternalError(f"{kind}: operand recorded on a different tape")
        node = Node(kind, tuple(inputs), output, backward_fn, len(self.nodes), self)
        self.nodes.append(node)
        output._node = node
        output.requires_grad = True
        return output


def _tape_stack():
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [Tape()]
    return stack


def current_tape() -> Tape:
    return _tape_stack()[-1]


def reset_default_tape():
    """Drop the per-thread default tape (frees recorded graph memory)."""
    stack = _tape_stack()
    stack[0] = Tape()


def grad_enabled():
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording (forward-only evaluation)."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class MacCounter:
    """Instrumented multiply-accumulate tally for matmul and conv2d."""

    def __init__(self):
        self.total = 0


@contextmanager
def count_macs_executed():
    counter = MacCounter()
    counters = getattr(_local, "mac_counters", None)
    if counters is None:
        counters = _local.mac_counters = []
    counters.append(counter)
    try:
        yield counter
    finally:
        counters.remove(counter)


def _tally(n):
    for c in getattr(_local, "mac_counters", ()):
        c.total += int(n)


def _emit(kind, inputs, out_data, backward_fn):
    out_dtype = np.result_type(*[t.dtype for t in inputs]) if inputs else out_data.dtype
    out = Tensor(np.asarray(out_data, dtype=out_dtype))
    if grad_enabled() and any(t.requires_grad for t in inputs):
        current_tape().record(kind, inputs, out, backward_fn)
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _f64(t):
    return t.data.astype(np.float64, copy=False)


# -- primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("a", ("m", "k"), a.shape)
    if b.data.ndim != 2 or b.shape[0] != a.shape[1]:
        raise ShapeError("b", (a.shape[1], "n"), b.shape)
    A, B = _f64(a), _f64(b)
    _tally(A.shape[0] * A.shape[1] * B.shape[1])

    def backward(g):
        return g @ B.T, A.T @ g

    return _emit("matmul", (a, b), A @ B, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("b", a.shape, b.shape) from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), np.broadcast_to(_f64(a) + _f64(b), out_shape), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError("b", a.shape, b.shape) from None
    A, B = _f64(a), _f64(b)

    def backward(g):
        return _unbroadcast(g * B, a.shape), _unbroadcast(g * A, b.shape)

    return _emit("mul", (a, b), A * B, backward)


def relu(x: Tensor) -> Tensor:
    X = _f64(x)
    mask = X > 0

    def backward(g):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, X, 0.0), backward)


def hard_swish(x: Tensor) -> Tensor:
    """x * relu6(x + 3) / 6."""
    X = _f64(x)
    out = X * np.clip(X + 3.0, 0.0, 6.0) / 6.0

    def backward(g):
        d = np.where(X <= -3.0, 0.0, np.where(X >= 3.0, 1.0, (2.0 * X + 3.0) / 6.0))
        return (g * d,)

    return _emit("hard_swish", (x,), out, backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("x", shape, x.shape) from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _emit("reshape", (x,), out, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("x", ("B", "C", "H", "W"), x.shape)
    _, _, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape),)

    return _emit("global_avg_pool", (x,), _f64(x).mean(axis=(2, 3)), backward)


def slice_(x: Tensor, index) -> Tensor:
    """Basic-slicing view; the gradient is scattered back into a zero array."""
    index = tuple(index)

    def backward(g):
        full = np.zeros(x.shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return _emit("slice", (x,), x.data[index], backward)


def sum_(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", (x,), np.asarray(_f64(x).sum()), backward)


def conv_output_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def im2col(X, k, stride, padding):
    """[B,C,H,W] -> ([B*OH*OW, C*K*K] patch matrix, OH, OW)."""
    b, c, _, _ = X.shape
    if k == 1 and padding == 0:
        Xs = X[:, :, ::stride, ::stride]
        oh, ow = Xs.shape[2], Xs.shape[3]
        return Xs.transpose(0, 2, 3, 1).reshape(b * oh * ow, c), oh, ow
    Xp = np.pad(X, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(Xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * k * k)
    return cols, oh, ow


def col2im(cols, x_shape, k, stride, padding, oh, ow):
    b, c, h, w = x_shape
    if k == 1 and padding == 0 and stride == 1:
        return cols.reshape(b, oh, ow, c).transpose(0, 3, 1, 2)
    patches = np.ascontiguousarray(cols.reshape(b, oh, ow, c, k, k).transpose(4, 5, 0, 3, 1, 2))
    dxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += patches[i, j]
    return dxp[:, :, padding:padding + h, padding:padding + w]


def conv2d(x: Tensor, w: Tensor, stride=1, padding=0) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError("input", ("B", "Cin", "H", "W"), x.shape)
    if w.data.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("kernel", ("Cout", x.shape[1], "K", "K"), w.shape)
    if stride < 1 or padding < 0:
        raise ContractError(f"conv2d: stride {stride} must be >= 1 and padding {padding} >= 0")
    b, cin, h, wd = x.shape
    cout, k = w.shape[0], w.shape[2]
    if h + 2 * padding < k or wd + 2 * padding < k:
        raise ShapeError("input", (b, cin, f">={k - 2 * padding}", f">={k - 2 * padding}"), x.shape)
    cols, oh, ow = im2col(_f64(x), k, stride, padding)
    Wm = _f64(w).reshape(cout, -1)
    _tally(cols.shape[0] * cols.shape[1] * cout)
    out = (cols @ Wm.T).reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(w.shape)
        gx = col2im(gm @ Wm, x.shape, k, stride, padding, oh, ow)
        return gx, gw

    return _emit("conv2d", (x, w), out, backward)


class BatchStats:
    """Per-batch statistics captured by a batchnorm call (for calibration)."""

    __slots__ = ("mean", "var_unbiased")

    def __init__(self, mean, var_unbiased):
        self.mean = mean
        self.var_unbiased = var_unbiased


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean=None, running_var=None,
              training=True, momentum=BN_MOMENTUM, eps=BN_EPS, update_stats=True, capture=None):
    """Per-channel batch normalization over an NCHW tensor.

    In training mode the batch statistics normalize the input and, when
    ``update_stats`` is set, are folded into ``running_mean``/``running_var``
    in place.  ``capture`` (a list) receives a :class:`BatchStats` per call.
    In eval mode the running statistics are used.
    """
    if x.data.ndim != 4:
        raise ShapeError("input", ("B", "C", "H", "W"), x.shape)
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if t.shape != (c,):
            raise ShapeError(name, (c,), t.shape)
    X = _f64(x)
    G = _f64(gamma)[None, :, None, None]
    Bt = _f64(beta)[None, :, None, None]
    if training:
        n = x.shape[0] * x.shape[2] * x.shape[3]
        if n < 2:
            raise ContractError("batchnorm in training mode needs more than one value per channel")
        mean = X.mean(axis=(0, 2, 3))
        var = X.var(axis=(0, 2, 3))
        unbiased = var * n / (n - 1)
        if capture is not None:
            capture.append(BatchStats(mean, unbiased))
        if update_stats and running_mean is not None:
            running_mean[...] = (1 - momentum) * running_mean + momentum * mean
            running_var[...] = (1 - momentum) * running_var + momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
    else:
        if running_mean is None or running_var is None:
            raise ContractError("batchnorm in eval mode needs running statistics")
        for name, t in (("running_mean", running_mean), ("running_var", running_var)):
            if np.shape(t) != (c,):
                raise ShapeError(name, (c,), np.shape(t))
        mean = np.asarray(running_mean, dtype=np.float64)
        inv = 1.0 / np.sqrt(np.asarray(running_var, dtype=np.float64) + eps)
    xhat = (X - mean[None, :, None, None]) * inv[None, :, None, None]
    out = G * xhat + Bt

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        scale = G * inv[None, :, None, None]
        if training:
            n = x.shape[0] * x.shape[2] * x.shape[3]
            dx = scale / n * (n * g - dbeta[None, :, None, None]
                              - xhat * dgamma[None, :, None, None])
        else:
            dx = g * scale
        return dx, dgamma, dbeta

    return _emit("batchnorm", (x, gamma, beta), out, backward)


# -- losses -------------------------------------------------------------------


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_ce_smoothed(logits: Tensor, labels, smoothing=0.0) -> Tensor:
    """Mean cross-entropy against (1-s) on the true class and s/(C-1) elsewhere."""
    if logits.data.ndim != 2:
        raise ShapeError("logits", ("B", "C"), logits.shape)
    bsz, c = logits.shape
    if c < 2:
        raise ContractError(f"cross-entropy needs at least 2 classes, got {c}")
    if not 0.0 <= smoothing < 1.0:
        raise ContractError(f"smoothing must lie in [0, 1), got {smoothing}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (bsz,):
        raise ShapeError("labels", (bsz,), labels.shape)
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"labels must lie in [0, {c})")
    target = np.full((bsz, c), smoothing / (c - 1))
    target[np.arange(bsz), labels] = 1.0 - smoothing
    logp = _log_softmax(_f64(logits))
    loss = -(target * logp).sum() / bsz

    def backward(g):
        return (g * (np.exp(logp) - target) / bsz,)

    return _emit("loss_ce_smoothed", (logits,), np.asarray(loss), backward)


def loss_kd_soft(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Mean cross-entropy of softmax(student) against softmax(teacher) targets."""
    if teacher_logits._node is not None or teacher_logits.requires_grad:
        raise ContractError("teacher logits must be detached from the tape")
    if student_logits.shape != teacher_logits.shape:
        raise ShapeError("teacher_logits", student_logits.shape, teacher_logits.shape)
    if student_logits.data.ndim != 2:
        raise ShapeError("student_logits", ("B", "C"), student_logits.shape)
    bsz = student_logits.shape[0]
    target = np.exp(_log_softmax(_f64(teacher_logits)))
    logp = _log_softmax(_f64(student_logits))
    loss = -(target * logp).sum() / bsz

    def backward(g):
        return (g * (np.exp(logp) - target) / bsz,)

    return _emit("loss_kd_soft", (student_logits,), np.asarray(loss), backward)


# -- dispatch and backward ----------------------------------------------------

PRIMITIVES = {
    "matmul": matmul,
    "conv2d": conv2d,
    "add": add,
    "mul": mul,
    "relu": relu,
    "hard_swish": hard_swish,
    "batchnorm": batchnorm,
    "global_avg_pool": global_avg_pool,
    "reshape": reshape,
    "slice": slice_,
    "sum": sum_,
}


def forward_primitive(kind: str, operands: Sequence[Tensor], **attrs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    return fn(*operands, **attrs)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None:
        raise ContractError("loss was not produced through a tape")
    nodes = node.tape.nodes
    if node.index >= len(nodes) or nodes[node.index] is not node:
        raise InternalError("loss node not found on its tape")
    pending = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for i in range(node.index, -1, -1):
        cur = nodes[i]
        g = pending.pop(id(cur.output), None)
        if g is None:
            continue
        for inp, ig in zip(cur.inputs, cur.backward_fn(g)):
            if ig is None or not inp.requires_grad:
                continue
            if inp._node is None:
                ig = np.asarray(ig, dtype=inp.dtype).reshape(inp.shape)
                inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                _check_finite(inp.grad, "gradient")
                continue
            if inp._node.index >= i:
                raise InternalError(f"cycle: node {i} depends on node {inp._node.index}")
            key = id(inp)
            pending[key] = ig if key not in pending else pending[key] + ig
    if pending:
        raise InternalError("gradient left unpropagated; tape is not topologically ordered")
