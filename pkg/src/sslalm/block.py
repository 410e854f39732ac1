"""Selective state-space block: the unit shared by the audio encoder groups
and the language model.

Pre-norm residual form: rms-norm, input projection into a content half and
a gate half, short causal depthwise conv, selective scan over the content
path, silu-gated merge, output projection. `block_forward` runs a whole
sequence on the tape; `block_step` is the stateful single-token inference
path and must match it column for column.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .ssm import SelectiveParams, selective_scan
from .tensor import Tensor

__all__ = ["BlockWeights", "BlockState", "block_forward", "block_step"]


@dataclass
class BlockWeights:
    in_proj: Tensor      # (D, 2E): content half then gate half
    conv_w: Tensor       # (width, E) depthwise
    conv_b: Tensor       # (E,)
    x_proj: Tensor       # (E, d_rank + 2N): delta input, B, C
    delta_proj: Tensor   # (d_rank, E)
    delta_bias: Tensor   # (E,)
    A_log: Tensor        # (E, N); A = -exp(A_log)
    skip: Tensor         # (E,)
    out_proj: Tensor     # (E, D)
    norm: Tensor         # (D,) rms-norm scale

    @property
    def d_model(self) -> int:
        return self.in_proj.data.shape[0]

    @property
    def d_inner(self) -> int:
        return self.out_proj.data.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.data.shape[1]

    @property
    def d_rank(self) -> int:
        return self.delta_proj.data.shape[0]

    @property
    def conv_width(self) -> int:
        return self.conv_w.data.shape[0]

    @staticmethod
    def init(d_model: int, expand: int = 2, d_state: int = 16,
             d_rank: int | None = None, conv_width: int = 4,
             rng: np.random.Generator | None = None) -> "BlockWeights":
        rng = rng or np.random.default_rng(0)
        E = expand * d_model
        if d_rank is None:
            d_rank = max(1, math.ceil(d_model / 16))

        def w(*shape, scale=0.02):
            return Tensor(rng.normal(0.0, scale, shape), requires_grad=True)

        # S4D-real style A init: state n decays at rate n+1
        a_init = np.log(np.broadcast_to(np.arange(1, d_state + 1, dtype=np.float64),
                                        (E, d_state)).copy())
        # delta bias so softplus lands in [1e-3, 1e-1]
        dt = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), E))
        dt_bias = dt + np.log(-np.expm1(-dt))
        return BlockWeights(
            in_proj=w(d_model, 2 * E),
            conv_w=w(conv_width, E, scale=0.1),
            conv_b=Tensor(np.zeros(E), requires_grad=True),
            x_proj=w(E, d_rank + 2 * d_state),
            delta_proj=w(d_rank, E, scale=1.0 / math.sqrt(d_rank)),
            delta_bias=Tensor(dt_bias, requires_grad=True),
            A_log=Tensor(a_init, requires_grad=True),
            skip=Tensor(np.ones(E), requires_grad=True),
            out_proj=w(E, d_model),
            norm=Tensor(np.ones(d_model), requires_grad=True),
        )

    def params(self) -> dict[str, Tensor]:
        return {
            "in_proj": self.in_proj, "conv_w": self.conv_w, "conv_b": self.conv_b,
            "x_proj": self.x_proj, "delta_proj": self.delta_proj,
            "delta_bias": self.delta_bias, "A_log": self.A_log, "skip": self.skip,
            "out_proj": self.out_proj, "norm": self.norm,
        }


@dataclass
class BlockState:
    """Carried inference state: conv input window (width, E) and scan state (E, N)."""

    window: np.ndarray
    h: np.ndarray

    @staticmethod
    def zeros(w: BlockWeights) -> "BlockState":
        return BlockState(window=np.zeros((w.conv_width, w.d_inner)),
                          h=np.zeros((w.d_inner, w.d_state)))


def _scan_params(w: BlockWeights, u: Tensor):
    """Per-timestep (delta, B, C) from the content path, plus shared A."""
    E, N, R = w.d_inner, w.d_state, w.d_rank
    xp = T.matmul(u, w.x_proj)                                   # (L, R + 2N)
    d_in = T.tslice(xp, (slice(None), slice(0, R)))
    B = T.tslice(xp, (slice(None), slice(R, R + N)))
    C = T.tslice(xp, (slice(None), slice(R + N, R + 2 * N)))
    delta = T.softplus(T.add(T.matmul(d_in, w.delta_proj), w.delta_bias))  # (L, E)
    A = T.neg(T.exp(w.A_log))                                    # (E, N)
    return delta, B, C, A


def block_forward(w: BlockWeights, x: Tensor, adapter=None) -> Tensor:
    """Full-sequence forward over x (L, D); causal by construction.

    `adapter` is an optional LoRA adapter applied to in_proj.
    """
    if x.data.ndim != 2 or x.data.shape[1] != w.d_model:
        raise T.ShapeError("block_forward: x %r for d_model=%d" % (x.shape, w.d_model))
    E = w.d_inner
    xn = T.rms_norm(x, w.norm)
    proj = T.matmul(xn, w.in_proj)                               # (L, 2E)
    if adapter is not None:
        proj = adapter.apply(proj, xn)
    content = T.tslice(proj, (slice(None), slice(0, E)))
    gate = T.tslice(proj, (slice(None), slice(E, 2 * E)))
    u = T.silu(T.depthwise_conv1d(content, w.conv_w, w.conv_b))  # (L, E)
    delta, B, C, A = _scan_params(w, u)
    y = selective_scan(SelectiveParams(delta=delta, B=B, C=C, A=A, skip=w.skip), u)
    merged = T.mul(y, T.silu(gate))
    return T.add(x, T.matmul(merged, w.out_proj))


def block_step(w: BlockWeights, x_t: np.ndarray, state: BlockState,
               adapter=None) -> tuple[np.ndarray, BlockState]:
    """One token of streaming inference (plain numpy, no tape).

    Equals column t of block_forward given the same prefix and zero-
    initialized state.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    E, N, R = w.d_inner, w.d_state, w.d_rank
    ms = (x_t * x_t).mean() + 1e-5
    xn = x_t * ms ** -0.5 * w.norm.data
    proj = xn @ w.in_proj.data
    if adapter is not None:
        proj = proj + adapter.delta_out(xn)
    content, gate = proj[:E], proj[E:]

    window = np.vstack([state.window[1:], content[None, :]])
    conv = (w.conv_w.data * window).sum(axis=0) + w.conv_b.data
    u = conv / (1.0 + np.exp(-conv))

    xp = u @ w.x_proj.data
    d_in, Bv, Cv = xp[:R], xp[R:R + N], xp[R + N:R + 2 * N]
    delta = np.logaddexp(0.0, d_in @ w.delta_proj.data + w.delta_bias.data)
    A = -np.exp(w.A_log.data)
    h = np.exp(delta[:, None] * A) * state.h + (delta * u)[:, None] * Bv[None, :]
    y = h @ Cv + w.skip.data * u

    merged = y * (gate / (1.0 + np.exp(-gate)))
    out = x_t + merged @ w.out_proj.data
    return out, BlockState(window=window, h=h)
