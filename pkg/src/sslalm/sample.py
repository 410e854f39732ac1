"""Constrained decoding: repetition penalty, temperature, top-k, nucleus
(top-p) filtering, and streaming generation through the recurrent view.

Pipeline order is fixed for reproducibility: penalty -> temperature ->
top-k -> top-p -> renormalize -> sample. The pre-mask argmax always
survives the nucleus mask, so the support is never empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EOS, detokenize
from .errors import ConfigError
from .lm import LmWeights, init_lm_states, lm_step
from .tensor import ContractError

__all__ = ["SamplerConfig", "sample_next", "masked_distribution", "generate"]


@dataclass
class SamplerConfig:
    temperature: float = 0.1
    top_k: int = 500
    top_p: float = 0.95
    repetition_penalty: float = 1.1
    max_new_tokens: int = 64
    seed: int = 0
    penalize_prompt: bool = False

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("SamplerConfig: temperature must be >= 0")
        if not (0 < self.top_p <= 1):
            raise ConfigError("SamplerConfig: top_p must be in (0, 1]")
        if self.top_k < 1:
            raise ConfigError("SamplerConfig: top_k must be >= 1")
        if self.repetition_penalty < 1:
            raise ConfigError("SamplerConfig: repetition_penalty must be >= 1")


def masked_distribution(logits: np.ndarray, history, cfg: SamplerConfig) -> np.ndarray:
    """Probabilities after the full penalty/temperature/top-k/top-p pipeline.

    Returns the renormalized distribution (zeros outside the support);
    temperature 0 yields a one-hot argmax distribution.
    """
    logits = np.asarray(logits, dtype=np.float64).copy()
    if not np.all(np.isfinite(logits)):
        raise ContractError("sample_next: non-finite logits")
    for tok in set(history):
        if logits[tok] > 0:
            logits[tok] /= cfg.repetition_penalty
        else:
            logits[tok] *= cfg.repetition_penalty

    if cfg.temperature == 0.0:
        out = np.zeros_like(logits)
        out[int(np.argmax(logits))] = 1.0
        return out
    logits /= cfg.temperature

    k = min(cfg.top_k, logits.size)
    kth = np.sort(logits)[-k]
    keep = logits >= kth
    shifted = logits - logits[keep].max()
    probs = np.where(keep, np.exp(shifted), 0.0)
    probs /= probs.sum()

    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    cut = int(np.searchsorted(csum, cfg.top_p)) + 1
    nucleus = order[:max(1, cut)]  # the argmax is order[0], always kept
    out = np.zeros_like(probs)
    out[nucleus] = probs[nucleus]
    out /= out.sum()
    return out


def sample_next(logits: np.ndarray, history, cfg: SamplerConfig,
                rng: np.random.Generator) -> int:
    """Draw the next token id from the masked distribution."""
    probs = masked_distribution(logits, history, cfg)
    if cfg.temperature == 0.0:
        return int(np.argmax(probs))
    return int(rng.choice(probs.size, p=probs))


def generate(weights: LmWeights, audio_tokens, prompt_ids, cfg: SamplerConfig,
             rng: np.random.Generator | None = None) -> tuple[list[int], str]:
    """Stream through the recurrent view with carried block state.

    Feeds the audio-token prefix and prompt, then samples until EOS or
    max_new_tokens. Deterministic given cfg.seed.
    """
    lmc = weights.config
    prompt_ids = list(prompt_ids)
    k = 0 if audio_tokens is None else np.asarray(audio_tokens).shape[0]
    if k + len(prompt_ids) + cfg.max_new_tokens > lmc.max_seq:
        raise ContractError("generate: prompt plus budget exceeds max_seq %d"
                            % lmc.max_seq)
    rng = rng or np.random.default_rng(cfg.seed)
    states = init_lm_states(weights)
    logits = None
    if k:
        for row in np.asarray(audio_tokens, dtype=np.float64):
            logits, states = lm_step(weights, row, states)
    for tok in prompt_ids:
        logits, states = lm_step(weights, weights.embed.data[tok], states)
    if logits is None:
        raise ContractError("generate: empty prefix")

    generated: list[int] = []
    history = list(prompt_ids) if cfg.penalize_prompt else []
    for _ in range(cfg.max_new_tokens):
        tok = sample_next(logits, history, cfg, rng)
        generated.append(tok)
        history.append(tok)
        if tok == EOS:
            break
        logits, states = lm_step(weights, weights.embed.data[tok], states)
    return generated, detokenize(generated)
