"""Minimal reverse-mode tensor engine on top of numpy.

Everything downstream (scan kernels, encoder, LM, training) runs on this
layer: float64 arrays, a tape of op records, and hand-written backward
rules per op. Ops record onto the innermost active :class:`Graph`; with no
active graph they are plain numpy forward passes.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "ShapeError",
    "UnsupportedOpError",
    "ContractError",
    "NumericError",
    "forward_suite",
    "backward",
    "grad_check",
    "grad_check_wrt",
    "matmul", "add", "sub", "mul", "conv2d", "depthwise_conv1d", "silu",
    "softmax", "softplus", "rms_norm", "embedding_lookup", "reshape",
    "transpose", "mean", "tsum", "exp", "log", "tslice", "concat", "neg",
]

_EXP_CLAMP = 700.0   # exp overflow guard for float64
_LOG_FLOOR = 1e-300  # log(0) guard


class ShapeError(ValueError):
    """Input shapes do not conform to the op's rules."""


class UnsupportedOpError(ValueError):
    """forward_suite received an unknown op kind."""


class ContractError(ValueError):
    """An operation precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """A numerically invalid configuration (e.g. singular matrix)."""


class Tensor:
    """n-d float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_traced")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        # set when this tensor was produced by a recorded op
        self._traced = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ContractError("item() on non-scalar tensor of shape %r" % (self.shape,))
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return "Tensor(shape=%r, requires_grad=%r)" % (self.shape, self.requires_grad)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_GRAPH_STACK: list["Graph"] = []


class Graph:
    """Tape of op records in forward (topological) order.

    Use as a context manager around a forward pass, then call
    :func:`backward` (or ``graph.backward``) with the scalar loss.
    Single-threaded per instance.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def backward(self, loss: Tensor):
        backward(self, loss)


def _active_graph():
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._traced


def _record(op, inputs, out_data, backward_fn):
    """Wrap out_data into a Tensor, recording a node if gradients must flow."""
    out = Tensor(out_data)
    g = _active_graph()
    if g is not None and any(_needs_grad(t) for t in inputs):
        out._traced = True
        g.nodes.append(_Node(op, tuple(inputs), out, backward_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeError("matmul: scalar operand, shapes %r @ %r" % (a.shape, b.shape))
    if a.data.shape[-1] != b.data.shape[0 if b.data.ndim == 1 else -2]:
        raise ShapeError("matmul: inner dims mismatch %r @ %r" % (a.shape, b.shape))
    out_data = a.data @ b.data

    def bwd(grad):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return grad * bd, ad * grad
        if ad.ndim == 1:
            ga = grad @ bd.T
            gb = np.outer(ad, grad)
        elif bd.ndim == 1:
            ga = np.outer(grad, bd)
            gb = ad.T @ grad
        else:
            ga = grad @ np.swapaxes(bd, -1, -2)
            gb = np.swapaxes(ad, -1, -2) @ grad
            ga = _unbroadcast(ga, ad.shape)
            gb = _unbroadcast(gb, bd.shape)
        return ga, gb

    return _record("matmul", (a, b), out_data, bwd)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError("add: shapes %r + %r" % (a.shape, b.shape))

    def bwd(grad):
        return _unbroadcast(grad, a.data.shape), _unbroadcast(grad, b.data.shape)

    return _record("add", (a, b), out_data, bwd)


def sub(a, b):
    return add(a, neg(b))


def neg(a):
    a = _as_tensor(a)
    return _record("neg", (a,), -a.data, lambda grad: (-grad,))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise ShapeError("mul: shapes %r * %r" % (a.shape, b.shape))

    def bwd(grad):
        return (_unbroadcast(grad * b.data, a.data.shape),
                _unbroadcast(grad * a.data, b.data.shape))

    return _record("mul", (a, b), out_data, bwd)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(np.clip(a.data, -_EXP_CLAMP, _EXP_CLAMP))
    return _record("exp", (a,), out_data, lambda grad: (grad * out_data,))


def log(a):
    a = _as_tensor(a)
    safe = np.maximum(a.data, _LOG_FLOOR)
    out_data = np.log(safe)
    return _record("log", (a,), out_data, lambda grad: (grad / safe,))


def silu(a):
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(np.clip(-a.data, -_EXP_CLAMP, _EXP_CLAMP)))
    out_data = a.data * sig

    def bwd(grad):
        return (grad * (sig + a.data * sig * (1.0 - sig)),)

    return _record("silu", (a,), out_data, bwd)


def softplus(a):
    a = _as_tensor(a)
    out_data = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(np.clip(-a.data, -_EXP_CLAMP, _EXP_CLAMP)))
    return _record("softplus", (a,), out_data, lambda grad: (grad * sig,))


def softmax(a, axis=-1):
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(grad):
        dot = (grad * out_data).sum(axis=axis, keepdims=True)
        return (out_data * (grad - dot),)

    return _record("softmax", (a,), out_data, bwd)


def rms_norm(a, scale, eps=1e-5):
    """Normalize last axis to unit RMS, then multiply by a learned scale."""
    a, scale = _as_tensor(a), _as_tensor(scale)
    if scale.data.shape != a.data.shape[-1:]:
        raise ShapeError("rms_norm: scale shape %r vs input %r" % (scale.shape, a.shape))
    ms = (a.data * a.data).mean(axis=-1, keepdims=True) + eps
    inv = ms ** -0.5
    normed = a.data * inv
    out_data = normed * scale.data

    def bwd(grad):
        n = a.data.shape[-1]
        gscaled = grad * scale.data
        dot = (gscaled * a.data).sum(axis=-1, keepdims=True)
        ga = inv * gscaled - (inv ** 3 / n) * a.data * dot
        gs = (grad * normed).reshape(-1, n).sum(axis=0)
        return ga, gs

    return _record("rms_norm", (a, scale), out_data, bwd)


def embedding_lookup(table, ids):
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("embedding_lookup: table must be 2-d, got %r" % (table.shape,))
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError("embedding_lookup: id out of range for table %r" % (table.shape,))
    out_data = table.data[ids]

    def bwd(grad):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, grad)
        return (gt,)

    return _record("embedding_lookup", (table,), out_data, bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape: %r -> %r" % (a.shape, shape))
    return _record("reshape", (a,), out_data,
                   lambda grad: (grad.reshape(a.data.shape),))


def transpose(a, axes=None):
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _record("transpose", (a,), out_data,
                   lambda grad: (np.transpose(grad, inv),))


def mean(a, axis=None):
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(grad):
        if axis is None:
            return (np.full_like(a.data, grad / count),)
        g = np.expand_dims(grad, axis)
        return (np.broadcast_to(g, a.data.shape) / count,)

    return _record("mean", (a,), out_data, bwd)


def tsum(a, axis=None):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis)

    def bwd(grad):
        if axis is None:
            return (np.full_like(a.data, grad),)
        g = np.expand_dims(grad, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return _record("sum", (a,), out_data, bwd)


def tslice(a, index):
    """Basic slicing/indexing; `index` is anything numpy basic indexing takes."""
    a = _as_tensor(a)
    out_data = a.data[index]

    def bwd(grad):
        ga = np.zeros_like(a.data)
        ga[index] = grad
        return (ga,)

    return _record("slice", (a,), out_data, bwd)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat: shapes %r along axis %d"
                         % ([t.shape for t in tensors], axis))
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(grad):
        return tuple(np.split(grad, splits, axis=axis))

    return _record("concat", tuple(tensors), out_data, bwd)


def conv2d(x, w, bias=None, stride=1, pad=0):
    """2-d convolution, channels-last: x (H,W,Cin), w (kh,kw,Cin,Cout)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError("conv2d: x %r, w %r" % (x.shape, w.shape))
    kh, kw, cin, cout = w.data.shape
    if x.data.shape[2] != cin:
        raise ShapeError("conv2d: channel mismatch x %r vs w %r" % (x.shape, w.shape))
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0)))
    hp, wp = xp.shape[0], xp.shape[1]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: kernel %dx%d too large for padded input %dx%d"
                         % (kh, kw, hp, wp))
    # im2col: (ho, wo, kh*kw*cin) @ (kh*kw*cin, cout)
    cols = np.empty((ho, wo, kh * kw * cin))
    for i in range(kh):
        for j in range(kw):
            patch = xp[i:i + ho * stride:stride, j:j + wo * stride:stride, :]
            cols[:, :, (i * kw + j) * cin:(i * kw + j + 1) * cin] = patch
    wmat = w.data.reshape(kh * kw * cin, cout)
    out_data = cols @ wmat
    inputs = [x, w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (cout,):
            raise ShapeError("conv2d: bias shape %r, expected (%d,)" % (bias.shape, cout))
        out_data = out_data + bias.data
        inputs.append(bias)

    def bwd(grad):
        gw = cols.reshape(-1, kh * kw * cin).T @ grad.reshape(-1, cout)
        gcols = grad @ wmat.T
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[i:i + ho * stride:stride, j:j + wo * stride:stride, :] += \
                    gcols[:, :, (i * kw + j) * cin:(i * kw + j + 1) * cin]
        gx = gxp[pad:hp - pad or None, pad:wp - pad or None, :]
        grads = [gx, gw.reshape(w.data.shape)]
        if bias is not None:
            grads.append(grad.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return _record("conv2d", tuple(inputs), out_data, bwd)


def depthwise_conv1d(x, w, bias=None):
    """Causal depthwise conv over time: x (L,C), w (width,C), left-pad width-1."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError("depthwise_conv1d: x %r, w %r" % (x.shape, w.shape))
    width = w.data.shape[0]
    L = x.data.shape[0]
    xp = np.pad(x.data, ((width - 1, 0), (0, 0)))
    out_data = np.zeros_like(x.data)
    for k in range(width):
        out_data += w.data[k] * xp[k:k + L, :]
    inputs = [x, w]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.data.shape != (x.data.shape[1],):
            raise ShapeError("depthwise_conv1d: bias shape %r" % (bias.shape,))
        out_data = out_data + bias.data
        inputs.append(bias)

    def bwd(grad):
        gw = np.zeros_like(w.data)
        gxp = np.zeros_like(xp)
        for k in range(width):
            gw[k] = (grad * xp[k:k + L, :]).sum(axis=0)
            gxp[k:k + L, :] += w.data[k] * grad
        gx = gxp[width - 1:, :]
        grads = [gx, gw]
        if bias is not None:
            grads.append(grad.sum(axis=0))
        return tuple(grads)

    return _record("depthwise_conv1d", tuple(inputs), out_data, bwd)


_OPS = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "conv2d": lambda inputs, attrs: conv2d(*inputs, stride=attrs.get("stride", 1),
                                           pad=attrs.get("pad", 0)),
    "depthwise_conv1d": lambda inputs, attrs: depthwise_conv1d(*inputs),
    "silu": lambda inputs, attrs: silu(*inputs),
    "softmax": lambda inputs, attrs: softmax(inputs[0], axis=attrs.get("axis", -1)),
    "rms_norm": lambda inputs, attrs: rms_norm(*inputs, eps=attrs.get("eps", 1e-5)),
    "embedding_lookup": lambda inputs, attrs: embedding_lookup(inputs[0], attrs["ids"]),
    "reshape": lambda inputs, attrs: reshape(inputs[0], attrs["shape"]),
    "transpose": lambda inputs, attrs: transpose(inputs[0], attrs.get("axes")),
    "mean": lambda inputs, attrs: mean(inputs[0], axis=attrs.get("axis")),
    "sum": lambda inputs, attrs: tsum(inputs[0], axis=attrs.get("axis")),
    "exp": lambda inputs, attrs: exp(*inputs),
    "log": lambda inputs, attrs: log(*inputs),
    "slice": lambda inputs, attrs: tslice(inputs[0], attrs["index"]),
    "concat": lambda inputs, attrs: concat(list(inputs), axis=attrs.get("axis", 0)),
}


def forward_suite(op: str, inputs, attrs=None) -> Tensor:
    """Dispatch a forward op by name. Shape errors name the op."""
    if op not in _OPS:
        raise UnsupportedOpError("unknown op kind %r" % op)
    return _OPS[op](list(inputs), attrs or {})


def backward(graph: Graph, loss: Tensor):
    """Reverse-traverse the tape, adding dLoss/dLeaf into each leaf's .grad."""
    if loss.data.size != 1:
        raise ContractError("backward: loss must be scalar, got shape %r" % (loss.shape,))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        gout = grads.pop(id(node.output), None)
        if gout is None:
            continue
        gins = node.backward_fn(gout)
        for t, g in zip(node.inputs, gins):
            if g is None or not _needs_grad(t):
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
    # fold accumulated grads into requires_grad leaves (additively, across calls)
    for node in graph.nodes:
        for t in node.inputs:
            if t.requires_grad:
                g = grads.pop(id(t), None)
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                if g is not None:
                    t.grad = t.grad + g
    if loss.requires_grad and not loss._traced:
        loss.grad = (np.ones_like(loss.data) if loss.grad is None
                     else loss.grad + np.ones_like(loss.data))


def grad_check(f, point: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic gradient of f and central differences.

    f maps a Tensor to a scalar Tensor. Relative error uses denominator
    max(|analytic|, |numeric|, 1e-8) elementwise.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractError("grad_check: eps %g outside [1e-6, 1e-3]" % eps)
    p = Tensor(point.data.copy(), requires_grad=True)
    with Graph() as g:
        out = f(p)
        if out.data.size != 1:
            raise ContractError("grad_check: f must return a scalar")
        g.backward(out)
    analytic = p.grad if p.grad is not None else np.zeros_like(p.data)

    numeric = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(p.data)).item()
        flat[i] = orig - eps
        lo = f(Tensor(p.data)).item()
        flat[i] = orig
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_wrt(forward, param: Tensor, eps: float = 1e-5) -> float:
    """grad_check against an existing parameter tensor.

    `forward` takes no arguments and returns a scalar Tensor computed from
    `param` (and anything else); the analytic gradient is read from
    param.grad, the numeric one from central differences on param.data.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ContractError("grad_check_wrt: eps %g outside [1e-6, 1e-3]" % eps)
    saved_grad, saved_req = param.grad, param.requires_grad
    param.requires_grad = True
    param.grad = None
    try:
        with Graph() as g:
            out = forward()
            if out.data.size != 1:
                raise ContractError("grad_check_wrt: forward must return a scalar")
            g.backward(out)
        analytic = param.grad if param.grad is not None else np.zeros_like(param.data)

        numeric = np.zeros_like(param.data)
        flat = param.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = forward().item()
            flat[i] = orig - eps
            lo = forward().item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * eps)
    finally:
        param.grad, param.requires_grad = saved_grad, saved_req

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
