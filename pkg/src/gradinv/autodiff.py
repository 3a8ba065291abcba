"""Reverse-mode automatic differentiation over dense float64 tensors.

The engine supports differentiating through gradient computations: every
primitive's backward rule is itself expressed in primitives, so a gradient
obtained with ``create_graph=True`` is a differentiable function of the
original inputs. This is what lets an attacker take gradients of a loss
that is built from gradients of a training loss.

Everything is float64 and CPU-only; graphs are rebuilt on every forward
pass and kept alive only by tensor references, so dropping the outputs of
a pass releases it.
"""

from __future__ import annotations

import itertools
import threading
import warnings
from contextlib import contextmanager, nullcontext

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "no_grad",
    "grad",
    "finite_diff_gradient",
    "forward_primitive",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "powc",
    "exp",
    "log",
    "matmul",
    "transpose",
    "reshape",
    "broadcast_to",
    "sum_axes",
    "sum_all",
    "take_rows",
    "relu",
    "mean",
    "conv2d",
    "batch_norm_train",
    "softmax_cross_entropy",
    "sum_of_squares",
]

_ORDER = itertools.count()


class _ThreadState(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.tape = None


_state = _ThreadState()


class ShapeError(ValueError):
    """Raised when primitive inputs have incompatible shapes."""


class TapeNode:
    """One primitive-operation record.

    ``inputs`` holds only the gradient-requiring inputs; ``backward`` maps
    the output gradient to one gradient per entry of ``inputs``.
    """

    __slots__ = ("op", "inputs", "backward", "order")

    def __init__(self, op, inputs, backward):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.order = next(_ORDER)


class Tape:
    """Optional recording scope for one forward(+backward) pass.

    Nodes attach to tensors regardless of any active tape; a tape merely
    collects the records created while it is current, for inspection. Node
    creation order is a topological order of the data flow.
    """

    __slots__ = ("nodes", "grad_depth", "_prev")

    def __init__(self):
        self.nodes = []
        self.grad_depth = 0

    def __enter__(self):
        self._prev = _state.tape
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False


class Tensor:
    """Dense float64 array with an optional handle into the current graph."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return self.data.item()

    def detach(self):
        return _plain(self.data)

    def copy(self):
        t = _plain(self.data.copy())
        t.requires_grad = self.requires_grad
        return t

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _plain(data):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = False
    t.node = None
    return t


def _record(op, data, inputs, backward):
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = True
    node = TapeNode(op, inputs, backward)
    t.node = node
    tape = _state.tape
    if tape is not None:
        tape.nodes.append(node)
    return t


def as_tensor(x):
    return x if isinstance(x, Tensor) else _plain(np.asarray(x, dtype=np.float64))


def constant(x):
    """A tensor that never participates in differentiation."""
    return _plain(np.asarray(x, dtype=np.float64))


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape``, inverting numpy broadcasting."""
    if g.data.shape == shape:
        return g
    lead = g.data.ndim - len(shape)
    if lead > 0:
        g = sum_axes(g, tuple(range(lead)), keepdims=False)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.data.shape[i] != 1)
    if axes:
        g = sum_axes(g, axes, keepdims=True)
    if g.data.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    data = a.data + b.data
    if not _state.grad_enabled or not (a.requires_grad or b.requires_grad):
        return _plain(data)
    ash, bsh = a.data.shape, b.data.shape
    if a.requires_grad and b.requires_grad:
        return _record("add", data, (a, b),
                       lambda g: (_unbroadcast(g, ash), _unbroadcast(g, bsh)))
    if a.requires_grad:
        return _record("add", data, (a,), lambda g: (_unbroadcast(g, ash),))
    return _record("add", data, (b,), lambda g: (_unbroadcast(g, bsh),))


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    data = a.data - b.data
    if not _state.grad_enabled or not (a.requires_grad or b.requires_grad):
        return _plain(data)
    ash, bsh = a.data.shape, b.data.shape
    if a.requires_grad and b.requires_grad:
        return _record("sub", data, (a, b),
                       lambda g: (_unbroadcast(g, ash), _unbroadcast(neg(g), bsh)))
    if a.requires_grad:
        return _record("sub", data, (a,), lambda g: (_unbroadcast(g, ash),))
    return _record("sub", data, (b,), lambda g: (_unbroadcast(neg(g), bsh),))


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    data = a.data * b.data
    if not _state.grad_enabled or not (a.requires_grad or b.requires_grad):
        return _plain(data)
    ash, bsh = a.data.shape, b.data.shape
    if a.requires_grad and b.requires_grad:
        return _record("mul", data, (a, b),
                       lambda g: (_unbroadcast(mul(g, b), ash),
                                  _unbroadcast(mul(g, a), bsh)))
    if a.requires_grad:
        return _record("mul", data, (a,), lambda g: (_unbroadcast(mul(g, b), ash),))
    return _record("mul", data, (b,), lambda g: (_unbroadcast(mul(g, a), bsh),))


def neg(a):
    a = as_tensor(a)
    data = -a.data
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    return _record("neg", data, (a,), lambda g: (neg(g),))


def scale(a, c):
    """Multiply by a python float constant."""
    a = as_tensor(a)
    c = float(c)
    data = a.data * c
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    return _record("scale", data, (a,), lambda g: (scale(g, c),))


def powc(a, p):
    """Elementwise a**p for a constant exponent (a > 0 for fractional p)."""
    a = as_tensor(a)
    p = float(p)
    data = a.data ** p
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    return _record("powc", data, (a,),
                   lambda g: (scale(mul(g, powc(a, p - 1.0)), p),))


def exp(a):
    a = as_tensor(a)
    data = np.exp(a.data)
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    out_holder = []
    t = _record("exp", data, (a,), lambda g: (mul(g, out_holder[0]),))
    out_holder.append(t)
    return t


def log(a):
    a = as_tensor(a)
    data = np.log(a.data)
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    return _record("log", data, (a,), lambda g: (mul(g, powc(a, -1.0)),))


def matmul(a, b):
    a = as_tensor(a)
    b = as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data
    if not _state.grad_enabled or not (a.requires_grad or b.requires_grad):
        return _plain(data)
    if a.requires_grad and b.requires_grad:
        return _record("matmul", data, (a, b),
                       lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))
    if a.requires_grad:
        return _record("matmul", data, (a,), lambda g: (matmul(g, transpose(b)),))
    return _record("matmul", data, (b,), lambda g: (matmul(transpose(a), g),))


def transpose(a, axes=None):
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _record("transpose", data, (a,), lambda g: (transpose(g, inv),))


def reshape(a, shape):
    a = as_tensor(a)
    data = a.data.reshape(shape)
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    orig = a.data.shape
    return _record("reshape", data, (a,), lambda g: (reshape(g, orig),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    data = np.broadcast_to(a.data, shape).copy()
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    orig = a.data.shape
    return _record("broadcast_to", data, (a,), lambda g: (_unbroadcast(g, orig),))


def sum_axes(a, axes, keepdims=False):
    a = as_tensor(a)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    orig = a.data.shape

    def bwd(g):
        gg = g
        if not keepdims:
            kshape = list(orig)
            for ax in (axes if isinstance(axes, tuple) else (axes,)):
                kshape[ax] = 1
            gg = reshape(gg, tuple(kshape))
        return (broadcast_to(gg, orig),)

    return _record("sum_axes", data, (a,), bwd)


def sum_all(a):
    a = as_tensor(a)
    data = np.asarray(a.data.sum())
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    orig = a.data.shape
    return _record("sum_all", data, (a,), lambda g: (broadcast_to(g, orig),))


def take_rows(a, lo, hi):
    """Contiguous slice along axis 0."""
    a = as_tensor(a)
    data = a.data[lo:hi]
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    n = a.data.shape[0]
    return _record("take_rows", data, (a,), lambda g: (_pad_rows(g, lo, n),))


def _pad_rows(a, lo, n):
    """Embed a row-block back at offset ``lo`` of an n-row zero tensor."""
    a = as_tensor(a)
    out = np.zeros((n,) + a.data.shape[1:], dtype=np.float64)
    out[lo:lo + a.data.shape[0]] = a.data
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(out)
    hi = lo + a.data.shape[0]
    return _record("pad_rows", out, (a,), lambda g: (take_rows(g, lo, hi),))


class GatherPlan:
    """Precomputed constant index plan shared by a gather and its adjoint.

    ``idx`` indexes the flattened source; positions where ``mask`` is zero
    read as zero (used to fold zero-padding into the gather).
    """

    __slots__ = ("idx", "mask", "out_shape", "src_shape", "src_size")

    def __init__(self, idx, out_shape, src_shape, mask=None):
        self.idx = idx
        self.mask = mask
        self.out_shape = out_shape
        self.src_shape = src_shape
        self.src_size = int(np.prod(src_shape))


def gather(a, plan):
    a = as_tensor(a)
    data = a.data.reshape(-1)[plan.idx]
    if plan.mask is not None:
        data = data * plan.mask
    data = data.reshape(plan.out_shape)
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    return _record("gather", data, (a,), lambda g: (scatter(g, plan),))


def scatter(a, plan):
    """Adjoint of :func:`gather`: accumulate into the plan's source shape."""
    a = as_tensor(a)
    w = a.data.reshape(-1)
    if plan.mask is not None:
        w = w * plan.mask.reshape(-1)
    data = np.bincount(plan.idx.reshape(-1), weights=w,
                       minlength=plan.src_size).reshape(plan.src_shape)
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    return _record("scatter", data, (a,), lambda g: (gather(g, plan),))


def relu(a):
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    if not _state.grad_enabled or not a.requires_grad:
        return _plain(data)
    # subgradient 0 at exactly 0
    mask = _plain((a.data > 0.0).astype(np.float64))
    return _record("relu", data, (a,), lambda g: (mul(g, mask),))


# ---------------------------------------------------------------------------
# composites


def mean(a):
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


def mean_axes(a, axes, keepdims=False):
    a = as_tensor(a)
    n = int(np.prod([a.data.shape[ax] for ax in axes]))
    return scale(sum_axes(a, axes, keepdims=keepdims), 1.0 / n)


def sum_of_squares(a):
    a = as_tensor(a)
    return sum_all(mul(a, a))


_conv_plans: dict[tuple, tuple[GatherPlan, int, int]] = {}


def _conv_plan(x_shape, kh, kw, stride, padding):
    key = (x_shape, kh, kw, stride, padding)
    cached = _conv_plans.get(key)
    if cached is not None:
        return cached
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    # index of every (ci, ki, kj, ni, oi, oj) patch element in the *unpadded*
    # flat input; out-of-range positions are masked to zero
    ci, ki, kj = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw),
                             indexing="ij")
    ci, ki, kj = ci.reshape(-1), ki.reshape(-1), kj.reshape(-1)  # (c*kh*kw,)
    oi, oj = np.meshgrid(np.arange(oh), np.arange(ow), indexing="ij")
    oi, oj = oi.reshape(-1), oj.reshape(-1)  # (oh*ow,)
    rows = oi[None, :] * stride + ki[:, None] - padding  # (ckk, ohow)
    cols = oj[None, :] * stride + kj[:, None] - padding
    valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    rows_c = np.clip(rows, 0, h - 1)
    cols_c = np.clip(cols, 0, w - 1)
    base = (ci[:, None] * h + rows_c) * w + cols_c  # (ckk, ohow)
    ckk = c * kh * kw
    offs = (np.arange(n) * (c * h * w))[None, :, None]
    idx = base[:, None, :] + offs  # (ckk, n, ohow)
    idx = idx.reshape(ckk, n * oh * ow)
    mask = np.broadcast_to(valid[:, None, :], (ckk, n, oh * ow)).reshape(
        ckk, n * oh * ow).astype(np.float64)
    if valid.all():
        mask = None
    plan = GatherPlan(idx, (ckk, n * oh * ow), x_shape, mask)
    _conv_plans[key] = (plan, oh, ow)
    return plan, oh, ow


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-d cross-correlation over NCHW input with an FCHW kernel."""
    x = as_tensor(x)
    w = as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d: incompatible shapes input {x.data.shape}, "
            f"kernel {w.data.shape}")
    n, c, h, wid = x.data.shape
    f, _, kh, kw = w.data.shape
    if h + 2 * padding < kh or wid + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{wid + 2 * padding}")
    plan, oh, ow = _conv_plan(x.data.shape, kh, kw, stride, padding)
    cols = gather(x, plan)                      # (c*kh*kw, n*oh*ow)
    w2 = reshape(w, (f, c * kh * kw))
    out = matmul(w2, cols)                      # (f, n*oh*ow)
    out = reshape(out, (f, n, oh, ow))
    out = transpose(out, (1, 0, 2, 3))          # (n, f, oh, ow)
    if b is not None:
        b = as_tensor(b)
        out = add(out, reshape(b, (1, f, 1, 1)))
    return out


BN_EPS = 1e-5


def batch_norm_train(x, gamma, beta, eps=BN_EPS):
    """Batch normalization with current-batch statistics (training mode).

    Normalizes over all axes except the channel axis (axis 1); keeps no
    running statistics. Requires at least 2 samples in the batch.
    """
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if x.data.ndim < 2:
        raise ShapeError(f"batch_norm_train: need batched input, got {x.data.shape}")
    stat_count = x.data.size // x.data.shape[1]
    if stat_count < 2:
        raise ShapeError(
            "batch_norm_train: need >= 2 values per channel for batch "
            f"statistics, got {stat_count} (input {x.data.shape})")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batch_norm_train: scale/shift must have shape ({c},), got "
            f"{gamma.data.shape} and {beta.data.shape}")
    axes = (0,) + tuple(range(2, x.data.ndim))
    pshape = (1, c) + (1,) * (x.data.ndim - 2)
    mu = mean_axes(x, axes, keepdims=True)
    xc = sub(x, mu)
    var = mean_axes(mul(xc, xc), axes, keepdims=True)
    inv = powc(add(var, constant(np.full(var.data.shape, eps))), -0.5)
    return add(mul(mul(xc, inv), reshape(gamma, pshape)), reshape(beta, pshape))


def softmax_cross_entropy(logits, labels, n_classes=None):
    """Mean cross-entropy of softmax(logits) against labels.

    ``labels`` is either an integer class vector or a tensor of per-sample
    distributions (soft labels); both logits and soft labels receive
    gradients.
    """
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(
            f"softmax_cross_entropy: logits must be 2-d, got {logits.data.shape}")
    m, k = logits.data.shape
    if isinstance(labels, Tensor) or (
            isinstance(labels, np.ndarray) and labels.ndim == 2):
        y = as_tensor(labels)
        if y.data.shape != (m, k):
            raise ShapeError(
                f"softmax_cross_entropy: label distribution shape {y.data.shape} "
                f"!= logits shape {logits.data.shape}")
    else:
        idx = np.asarray(labels)
        if idx.shape != (m,):
            raise ShapeError(
                f"softmax_cross_entropy: want {m} labels, got shape {idx.shape}")
        if idx.min() < 0 or idx.max() >= k:
            raise ValueError(
                f"softmax_cross_entropy: label out of range [0, {k})")
        onehot = np.zeros((m, k))
        onehot[np.arange(m), idx.astype(int)] = 1.0
        y = _plain(onehot)
    # detached per-row max keeps exp in range without touching gradients
    mx = _plain(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, mx)
    lse = add(log(sum_axes(exp(z), (1,), keepdims=True)), mx)
    logp = sub(logits, lse)
    return scale(sum_all(mul(y, logp)), -1.0 / m)


def log_softmax(logits):
    logits = as_tensor(logits)
    mx = _plain(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, mx)
    lse = add(log(sum_axes(exp(z), (1,), keepdims=True)), mx)
    return sub(logits, lse)


def softmax(logits):
    return exp(log_softmax(logits))


_PRIMITIVES = {
    "matmul": lambda inputs: matmul(*inputs),
    "conv2d": lambda inputs: conv2d(*inputs),
    "add": lambda inputs: add(*inputs),
    "sub": lambda inputs: sub(*inputs),
    "scale": lambda inputs: scale(*inputs),
    "relu": lambda inputs: relu(*inputs),
    "mean": lambda inputs: mean(*inputs),
    "reshape": lambda inputs: reshape(*inputs),
    "batch_norm_train": lambda inputs: batch_norm_train(*inputs),
    "softmax_cross_entropy": lambda inputs: softmax_cross_entropy(*inputs),
    "sum_of_squares": lambda inputs: sum_of_squares(*inputs),
}


def forward_primitive(kind, *inputs):
    """Dispatch a named primitive; rejects unknown kinds."""
    fn = _PRIMITIVES.get(kind)
    if fn is None:
        raise ValueError(f"unknown primitive kind {kind!r}")
    return fn(inputs)


# ---------------------------------------------------------------------------
# differentiation


def grad(output, wrt, create_graph=False):
    """Gradients of a scalar ``output`` w.r.t. each tensor in ``wrt``.

    With ``create_graph=True`` the returned gradients are recorded on the
    graph and can be differentiated again. Unreachable ``wrt`` tensors get
    zeros plus a warning.
    """
    if not isinstance(output, Tensor):
        raise TypeError("grad: output must be a Tensor")
    if output.data.size != 1:
        raise ValueError(
            f"grad: output must be scalar, got shape {output.data.shape}")
    wrt = list(wrt)
    for t in wrt:
        if not t.requires_grad:
            raise ValueError("grad: every wrt tensor must require grad")

    topo = []
    seen = set()
    stack = [output]
    while stack:
        t = stack.pop()
        i = id(t)
        if i in seen:
            continue
        seen.add(i)
        node = t.node
        if node is not None:
            topo.append(t)
            stack.extend(node.inputs)
    topo.sort(key=lambda t: t.node.order)

    tape = _state.tape
    if tape is not None and create_graph:
        tape.grad_depth += 1

    grads = {id(output): _plain(np.ones_like(output.data))}
    ctx = nullcontext() if create_graph else no_grad()
    with ctx:
        for t in reversed(topo):
            g = grads.get(id(t))
            if g is None:
                continue
            node = t.node
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                j = id(inp)
                prev = grads.get(j)
                grads[j] = gi if prev is None else add(prev, gi)

    out = []
    for t in wrt:
        g = grads.get(id(t))
        if g is None:
            warnings.warn("grad: wrt tensor unreachable from output; "
                          "returning zeros", stacklevel=2)
            g = _plain(np.zeros_like(t.data))
        elif g.data.shape != t.data.shape:
            g = reshape(g, t.data.shape)
        out.append(g)
    return out


def finite_diff_gradient(f, x, step=1e-5):
    """Central-difference gradient of a scalar-valued ``f`` at ``x``.

    Independent of the reverse-mode path; used as the test oracle.
    """
    if step <= 0:
        raise ValueError("finite_diff_gradient: step must be positive")
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    out = np.zeros_like(base).reshape(-1)
    flat = base.reshape(-1)

    def _eval(arr):
        v = f(_plain(arr.reshape(base.shape)))
        return v.data.item() if isinstance(v, Tensor) else float(v)

    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        out[i] = (_eval(xp) - _eval(xm)) / (2.0 * step)
    return _plain(out.reshape(base.shape))
