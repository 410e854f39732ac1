"""Small state-space language model with an optional soft audio-token prefix.

Token embedding, a stack of selective state-space blocks (LoRA-attachable
at each in_proj), final rms-norm, and an LM head tied to the embedding.
Causality comes from the scan itself, so there is no mask anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .block import BlockState, BlockWeights, block_forward, block_step
from .errors import ConfigError
from .lora import LoraAdapter
from .tensor import ContractError, Tensor

__all__ = ["LmConfig", "TokenSequence", "LmWeights", "lm_forward",
           "lm_step", "init_lm_states", "next_token_loss"]


@dataclass
class LmConfig:
    vocab_size: int = 259
    d_model: int = 48
    n_layers: int = 2
    max_seq: int = 512
    audio_prefix: bool = True
    d_state: int = 8
    expand: int = 2


@dataclass
class TokenSequence:
    """Token ids with a loss mask and the audio-prefix length marker.

    loss_mask[t] is True exactly where the training loss applies (answer
    span); it must be False over the audio prefix and question span.
    """

    ids: list
    loss_mask: list
    audio_prefix_len: int = 0

    def __post_init__(self):
        if len(self.ids) != len(self.loss_mask):
            raise ContractError("TokenSequence: ids/mask length mismatch")


@dataclass
class LmWeights:
    embed: Tensor                 # (V, D); also the tied LM head
    blocks: list                  # n_layers BlockWeights
    final_norm: Tensor            # (D,)
    adapters: list = field(default_factory=list)   # per-layer LoraAdapter or None
    config: LmConfig = None

    @staticmethod
    def init(cfg: LmConfig, rng: np.random.Generator | None = None) -> "LmWeights":
        rng = rng or np.random.default_rng(0)
        return LmWeights(
            embed=Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, cfg.d_model)),
                         requires_grad=True),
            blocks=[BlockWeights.init(cfg.d_model, expand=cfg.expand,
                                      d_state=cfg.d_state, rng=rng)
                    for _ in range(cfg.n_layers)],
            final_norm=Tensor(np.ones(cfg.d_model), requires_grad=True),
            adapters=[None] * cfg.n_layers,
            config=cfg,
        )

    def attach_lora(self, rank: int = 8, alpha: float = 16.0,
                    rng: np.random.Generator | None = None):
        """Attach a fresh (no-op) adapter to every block's in_proj."""
        rng = rng or np.random.default_rng(0)
        cfg = self.config
        self.adapters = [
            LoraAdapter.init(cfg.d_model, 2 * cfg.expand * cfg.d_model,
                             rank=rank, alpha=alpha,
                             target="lm.layers.%02d.in_proj" % i, rng=rng)
            for i in range(cfg.n_layers)
        ]

    def params(self) -> dict[str, Tensor]:
        out = {"lm.embed": self.embed, "lm.final_norm": self.final_norm}
        for i, blk in enumerate(self.blocks):
            for name, t in blk.params().items():
                out["lm.layers.%02d.%s" % (i, name)] = t
        for ad in self.adapters:
            if ad is not None:
                out.update(ad.params())
        return out


def lm_forward(weights: LmWeights, audio_tokens, text_ids) -> Tensor:
    """Forward over [audio prefix ; embedded text]; logits for every position.

    audio_tokens is a (K, d_model) Tensor (or None/empty for plain LM use).
    """
    cfg = weights.config
    text_ids = list(text_ids)
    k = 0
    parts = []
    if audio_tokens is not None and getattr(audio_tokens, "size", 0):
        if not cfg.audio_prefix:
            raise ConfigError("lm_forward: audio prefix disabled in config")
        if audio_tokens.data.shape[1] != cfg.d_model:
            raise ConfigError("lm_forward: audio token dim %d != d_model %d"
                              % (audio_tokens.data.shape[1], cfg.d_model))
        k = audio_tokens.data.shape[0]
        parts.append(audio_tokens)
    if text_ids:
        parts.append(T.embedding_lookup(weights.embed, text_ids))
    if not parts:
        raise ContractError("lm_forward: empty input")
    if k + len(text_ids) > cfg.max_seq:
        raise ContractError("lm_forward: sequence length %d exceeds max_seq %d"
                            % (k + len(text_ids), cfg.max_seq))
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    for blk, ad in zip(weights.blocks, weights.adapters):
        x = block_forward(blk, x, adapter=ad)
    x = T.rms_norm(x, weights.final_norm)
    return T.matmul(x, T.transpose(weights.embed))


def init_lm_states(weights: LmWeights) -> list[BlockState]:
    return [BlockState.zeros(blk) for blk in weights.blocks]


def lm_step(weights: LmWeights, x_t: np.ndarray, states: list) -> tuple[np.ndarray, list]:
    """One streaming step from an embedding vector; returns (logits, states')."""
    x = np.asarray(x_t, dtype=np.float64)
    new_states = []
    for blk, ad, st in zip(weights.blocks, weights.adapters, states):
        x, st2 = block_step(blk, x, st, adapter=ad)
        new_states.append(st2)
    ms = (x * x).mean() + 1e-5
    x = x * ms ** -0.5 * weights.final_norm.data
    return x @ weights.embed.data.T, new_states


def next_token_loss(logits: Tensor, seq: TokenSequence) -> Tensor:
    """Mean cross-entropy over masked-in positions.

    logits cover the K+T joint sequence; the logit row at position
    K + t - 1 predicts ids[t].
    """
    k = seq.audio_prefix_len
    targets, rows = [], []
    for t, (tok, m) in enumerate(zip(seq.ids, seq.loss_mask)):
        if not m:
            continue
        if t == 0 and k == 0:
            raise ContractError("next_token_loss: position 0 has no predictor")
        rows.append(k + t - 1)
        targets.append(tok)
    if not rows:
        raise ContractError("next_token_loss: loss mask selects no position")
    picked = T.tslice(logits, (np.asarray(rows), slice(None)))
    probs = T.softmax(picked, axis=-1)
    chosen = T.tslice(probs, (np.arange(len(rows)), np.asarray(targets)))
    return T.neg(T.mean(T.log(chosen)))
