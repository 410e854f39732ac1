"""Low-rank adapters: attach plans, forward/merge semantics, and exact
parameter accounting for the state-space and hybrid LM configurations."""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

__all__ = [
    "LoraAdapter", "lora_forward", "merge", "attach_plan", "count_lora_params",
    "sslm_2_8b_layer_shapes", "llama_7b_layer_shapes",
]


@dataclass
class LoraAdapter:
    """W x + (alpha/r) B (A x) on top of a frozen base projection.

    B starts at zero so a fresh adapter is an exact no-op.
    """

    A: Tensor            # (r, d_in)
    B: Tensor            # (d_out, r)
    rank: int
    alpha: float
    target: str = ""

    @staticmethod
    def init(d_in: int, d_out: int, rank: int = 8, alpha: float = 16.0,
             target: str = "", rng: np.random.Generator | None = None) -> "LoraAdapter":
        rng = rng or np.random.default_rng(0)
        return LoraAdapter(
            A=Tensor(rng.normal(0.0, 0.02, (rank, d_in)), requires_grad=True),
            B=Tensor(np.zeros((d_out, rank)), requires_grad=True),
            rank=rank, alpha=alpha, target=target,
        )

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def apply(self, base_out: Tensor, x: Tensor) -> Tensor:
        """base_out + scale * (x A^T) B^T for row-vector inputs x (.., d_in)."""
        low = T.matmul(x, T.transpose(self.A))          # (.., r)
        up = T.matmul(low, T.transpose(self.B))         # (.., d_out)
        return T.add(base_out, T.mul(up, Tensor(self.scale)))

    def delta_out(self, x: np.ndarray) -> np.ndarray:
        """Inference-path increment for a single vector x (plain numpy)."""
        return self.scale * (self.B.data @ (self.A.data @ x))

    def params(self) -> dict[str, Tensor]:
        return {"%s.lora_A" % self.target: self.A, "%s.lora_B" % self.target: self.B}


def lora_forward(base_out, adapter: LoraAdapter, x):
    """Adapter-route forward: W x + (alpha/r) B (A x). Accepts arrays or Tensors."""
    if isinstance(base_out, Tensor) or isinstance(x, Tensor):
        xt = x if isinstance(x, Tensor) else Tensor(x)
        bo = base_out if isinstance(base_out, Tensor) else Tensor(base_out)
        return adapter.apply(bo, xt)
    return np.asarray(base_out) + adapter.delta_out(np.asarray(x))


def merge(base_w: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    """Dense-route weight: W' = W + (alpha/r) (B A)^T.

    base_w is stored (d_in, d_out) for the row-vector convention x @ W, so
    the low-rank update lands transposed.
    """
    base_w = np.asarray(base_w, dtype=np.float64)
    return base_w + adapter.scale * (adapter.B.data @ adapter.A.data).T


def attach_plan(layer_shapes: dict[str, tuple], pattern: str) -> list[tuple]:
    """Deterministic ordered list of (target, d_in, d_out) for matching layers.

    `layer_shapes` maps layer name -> (d_in, d_out); `pattern` is a regex
    searched against each name.
    """
    rx = re.compile(pattern)
    plan = [(name, din, dout) for name, (din, dout) in sorted(layer_shapes.items())
            if rx.search(name)]
    if not plan:
        raise ConfigError("attach_plan: pattern %r matches no layer" % pattern)
    return plan


def count_lora_params(plan: list[tuple], r: int = 8) -> int:
    """Total learnable adapter parameters: sum of r * (d_in + d_out)."""
    if r < 1:
        raise ConfigError("count_lora_params: rank must be >= 1")
    return sum(r * (din + dout) for _, din, dout in plan)


def sslm_2_8b_layer_shapes(n_layers: int = 64, d_model: int = 2560,
                           expand: int = 2) -> dict[str, tuple]:
    """Layer map for the 2.8B state-space LM: in_proj d -> 2*expand*d per block."""
    return {"layers.%02d.in_proj" % i: (d_model, 2 * expand * d_model)
            for i in range(n_layers)}


def llama_7b_layer_shapes(n_layers: int = 32, d_model: int = 4096) -> dict[str, tuple]:
    """Layer map for the 7B transformer LM's attention projections."""
    shapes = {}
    for i in range(n_layers):
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            shapes["layers.%02d.%s" % (i, proj)] = (d_model, d_model)
    return shapes
