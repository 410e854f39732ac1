"""Finetuning loop: frozen LM, trainable encoder/bridge/LoRA, gradient
accumulation, decoupled-weight-decay adaptive-moment optimizer, and a
tab-separated metrics log (rendered to a loss-curve figure by the CLI)."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .model import LalmModel, load_dataset_example
from .tensor import Graph, NumericError, Tensor

__all__ = ["TrainConfig", "AdamW", "Trainer", "count_trainable",
           "apply_freeze_plan", "train_loop", "DEFAULT_FREEZE_PLAN"]

# freeze the LM backbone; adapters (.lora_) stay trainable
DEFAULT_FREEZE_PLAN = (r"^lm\.(?!.*\.lora_)",)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8
    batch_size: int = 8
    accum_steps: int = 1
    max_steps: int = 300
    seed: int = 0
    freeze_plan: tuple = DEFAULT_FREEZE_PLAN

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accum_steps


def apply_freeze_plan(params: dict[str, Tensor], freeze_plan) -> dict[str, Tensor]:
    """Set requires_grad=False on matching params; returns the trainable map."""
    patterns = [re.compile(p) for p in freeze_plan]
    trainable = {}
    for name, t in params.items():
        if any(rx.search(name) for rx in patterns):
            t.requires_grad = False
        else:
            t.requires_grad = True
            trainable[name] = t
    if not trainable:
        raise ConfigError("freeze plan leaves no trainable parameter")
    return trainable


def count_trainable(params: dict[str, Tensor], freeze_plan=()) -> dict[str, int]:
    """Per-group and total trainable parameter counts."""
    patterns = [re.compile(p) for p in freeze_plan]
    groups = {"encoder": 0, "bridge": 0, "lora": 0, "lm": 0, "total": 0}
    for name, t in params.items():
        if any(rx.search(name) for rx in patterns):
            continue
        n = t.size
        if ".lora_" in name:
            groups["lora"] += n
        elif name.startswith("enc.bridge"):
            groups["bridge"] += n
        elif name.startswith("enc."):
            groups["encoder"] += n
        else:
            groups["lm"] += n
        groups["total"] += n
    if groups["total"] == 0:
        raise ConfigError("freeze plan leaves no trainable parameter")
    return groups


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data = p.data - c.lr * (mhat / (np.sqrt(vhat) + c.eps)
                                      + c.weight_decay * p.data)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class Trainer:
    """Owns optimizer state and the accumulation counter."""

    def __init__(self, model: LalmModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.trainable = apply_freeze_plan(model.params(), cfg.freeze_plan)
        self.opt = AdamW(self.trainable, cfg)
        self.micro = 0
        self.step_index = 0

    def train_step(self, batch) -> dict:
        """One micro-batch: forward, backward, and (every accum_steps) an
        optimizer update. `batch` is a list of (Spectrogram, question, answer).

        Returns loss, grad-norm (at update time, else nan), and the
        trainable parameter count.
        """
        losses = []
        with Graph() as g:
            for spec, question, answer in batch:
                losses.append(self.model.example_loss(spec, question, answer))
            total = losses[0]
            for ls in losses[1:]:
                total = T.add(total, ls)
            scale = 1.0 / (len(batch) * self.cfg.accum_steps)
            total = T.mul(total, Tensor(scale))
            g.backward(total)
        loss_value = total.item() * len(batch) * self.cfg.accum_steps / len(batch)
        if not np.isfinite(loss_value):
            raise NumericError("train_step: non-finite loss on batch starting %r"
                               % (batch[0][1],))
        self.micro += 1
        grad_norm = float("nan")
        if self.micro % self.cfg.accum_steps == 0:
            grad_norm = float(np.sqrt(sum(
                float((p.grad ** 2).sum()) for p in self.trainable.values()
                if p.grad is not None)))
            self.opt.step()
            self.opt.zero_grad()
            self.step_index += 1
        return {"loss": loss_value, "grad_norm": grad_norm,
                "trainable": sum(p.size for p in self.trainable.values())}


def train_loop(model: LalmModel, records: list[dict], data_dir, cfg: TrainConfig,
               out_dir=None, log_every: int = 10) -> list[dict]:
    """Run max_steps optimizer updates over the corpus.

    Batches cycle deterministically through a seed-shuffled order; the
    metrics log gets one `step\\tloss\\tgrad_norm` line per update, flushed
    every `log_every` steps.
    """
    trainer = Trainer(model, cfg)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(records))
    examples = [load_dataset_example(data_dir, records[i]) for i in order]
    log_path = Path(out_dir) / "metrics.tsv" if out_dir else None
    log_fh = open(log_path, "w") if log_path else None
    history = []
    cursor = 0
    try:
        while trainer.step_index < cfg.max_steps:
            batch = []
            for _ in range(cfg.batch_size):
                batch.append(examples[cursor % len(examples)])
                cursor += 1
            metrics = trainer.train_step(batch)
            if trainer.micro % cfg.accum_steps == 0:
                row = {"step": trainer.step_index, "loss": metrics["loss"],
                       "grad_norm": metrics["grad_norm"]}
                history.append(row)
                if log_fh:
                    log_fh.write("%d\t%.10g\t%.10g\n"
                                 % (row["step"], row["loss"], row["grad_norm"]))
                    if row["step"] % log_every == 0:
                        log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return history
