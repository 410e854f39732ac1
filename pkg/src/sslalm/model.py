"""Assembled audio language model: encoder + bridge + LM (+ LoRA), with a
flat parameter registry, example-level loss construction, and checkpoint
round-tripping."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .data import (load_checkpoint, load_spectrogram, save_checkpoint,
                   tokenize)
from .encoder import (EncoderConfig, EncoderWeights, Spectrogram, bridge_forward,
                      encoder_forward)
from .errors import ConfigError, DataError
from .lm import LmConfig, LmWeights, TokenSequence, lm_forward, next_token_loss
from .sample import SamplerConfig, generate
from .tensor import Tensor

__all__ = ["LalmModel", "build_model", "save_model", "load_model"]


@dataclass
class LalmModel:
    encoder: EncoderWeights
    lm: LmWeights
    lora_rank: int = 0       # 0 means no adapters attached
    lora_alpha: float = 16.0
    mask_question: bool = True

    def params(self) -> dict[str, Tensor]:
        out = {"enc.%s" % n: t for n, t in self.encoder.params().items()}
        out.update(self.lm.params())
        return out

    def encode_audio(self, spec: Spectrogram) -> Tensor:
        return bridge_forward(encoder_forward(spec, self.encoder), self.encoder)

    def sequence_for(self, question: str, answer: str, audio_len: int) -> TokenSequence:
        """[BOS, question, answer, EOS]; loss over the answer span (+EOS)."""
        q = tokenize(question)[:-1]          # BOS + question bytes
        a = tokenize(answer)[1:]             # answer bytes + EOS
        ids = q + a
        mask = [False] * len(q) + ([True] * len(a))
        if not self.mask_question:
            mask = [False] + [True] * (len(ids) - 1)
        return TokenSequence(ids=ids, loss_mask=mask, audio_prefix_len=audio_len)

    def example_loss(self, spec: Spectrogram, question: str, answer: str) -> Tensor:
        audio = self.encode_audio(spec)
        seq = self.sequence_for(question, answer, audio.data.shape[0])
        logits = lm_forward(self.lm, audio, seq.ids)
        return next_token_loss(logits, seq)

    def caption(self, spec: Spectrogram, prompt: str, cfg: SamplerConfig) -> str:
        audio = self.encode_audio(spec)
        prompt_ids = tokenize(prompt)[:-1]   # keep BOS, drop EOS
        _, text = generate(self.lm, audio.data, prompt_ids, cfg)
        return text

    def config_dict(self) -> dict:
        enc = self.encoder.config
        return {
            "encoder": {"stem_patch": enc.stem_patch,
                        "group_depths": list(enc.group_depths),
                        "group_dims": list(enc.group_dims),
                        "bridge_out_dim": enc.bridge_out_dim,
                        "d_state": enc.d_state, "expand": enc.expand,
                        "conv_width": enc.conv_width},
            "lm": asdict(self.lm.config),
            "lora": {"rank": self.lora_rank, "alpha": self.lora_alpha},
            "mask_question": self.mask_question,
        }


def build_model(encoder_cfg: EncoderConfig, lm_cfg: LmConfig, lora_rank: int = 0,
                lora_alpha: float = 16.0, seed: int = 0,
                mask_question: bool = True) -> LalmModel:
    if lm_cfg.audio_prefix and encoder_cfg.bridge_out_dim != lm_cfg.d_model:
        raise ConfigError("bridge_out_dim %d must equal lm d_model %d"
                          % (encoder_cfg.bridge_out_dim, lm_cfg.d_model))
    rng = np.random.default_rng(seed)
    model = LalmModel(encoder=EncoderWeights.init(encoder_cfg, rng),
                      lm=LmWeights.init(lm_cfg, rng),
                      lora_rank=lora_rank, lora_alpha=lora_alpha,
                      mask_question=mask_question)
    if lora_rank:
        model.lm.attach_lora(rank=lora_rank, alpha=lora_alpha, rng=rng)
    return model


def model_from_config(cfg: dict, seed: int = 0) -> LalmModel:
    enc = dict(cfg["encoder"])
    enc["group_depths"] = tuple(enc["group_depths"])
    enc["group_dims"] = tuple(enc["group_dims"])
    return build_model(EncoderConfig(**enc), LmConfig(**cfg["lm"]),
                       lora_rank=cfg.get("lora", {}).get("rank", 0),
                       lora_alpha=cfg.get("lora", {}).get("alpha", 16.0),
                       seed=seed, mask_question=cfg.get("mask_question", True))


def save_model(model: LalmModel, path):
    save_checkpoint(model.params(), model.config_dict(), path)


def load_model(path) -> LalmModel:
    """Rebuild from a checkpoint, validating every expected tensor."""
    config, tensors = load_checkpoint(path)
    model = model_from_config(config)
    for name, t in model.params().items():
        if name not in tensors:
            raise DataError("%s: checkpoint missing tensor %s" % (path, name))
        if tensors[name].shape != t.data.shape:
            raise DataError("%s: tensor %s shape %r, config expects %r"
                            % (path, name, tensors[name].shape, t.data.shape))
        t.data = tensors[name]
    return model


def load_dataset_example(data_dir, record: dict) -> tuple[Spectrogram, str, str]:
    from pathlib import Path
    spec = load_spectrogram(Path(data_dir) / record["spectrogram"])
    return spec, record["question"], record["answer"]
