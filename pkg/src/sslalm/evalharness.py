"""Closed-ended evaluation: hashed-trigram text embeddings, cosine
matching of free-text predictions against candidate labels, accuracy /
micro-F1 for single-label tasks and mAP for multi-label tasks.

The embedding is a deterministic stand-in for a neural text encoder:
lowercase, strip punctuation, pad with boundary markers, hash character
trigrams (64-bit FNV-1a) into 512 bins, L2-normalize.
"""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

__all__ = [
    "EvalRecord", "embed_text", "cosine", "classify_single",
    "classify_multilabel_map", "run_eval", "average_precision",
    "EMBED_DIM",
]

EMBED_DIM = 512

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass
class EvalRecord:
    clip_id: str
    prediction_text: str
    candidate_labels: list
    gold: list  # one label for single-label tasks, a set's worth for multi

    def __post_init__(self):
        if not self.candidate_labels:
            raise ContractError("EvalRecord %s: empty candidate set" % self.clip_id)
        missing = set(self.gold) - set(self.candidate_labels)
        if missing:
            raise ContractError("EvalRecord %s: gold labels %r not in candidates"
                                % (self.clip_id, sorted(missing)))


def _fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def normalize_text(s: str) -> str:
    s = s.lower().translate(_PUNCT_TABLE)
    return " ".join(s.split())


def trigrams(s: str) -> list[str]:
    """Character trigrams of '^' + text + '$' (boundary-padded)."""
    padded = "^" + normalize_text(s) + "$"
    return [padded[i:i + 3] for i in range(max(0, len(padded) - 2))]


def embed_text(s: str) -> np.ndarray:
    """Deterministic 512-d unit vector; empty text maps to basis vector 0."""
    counts = np.zeros(EMBED_DIM)
    for tri in trigrams(s):
        counts[_fnv1a_64(tri.encode("utf-8")) % EMBED_DIM] += 1.0
    norm = np.linalg.norm(counts)
    if norm == 0.0:
        counts[0] = 1.0
        return counts
    return counts / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of pre-normalized embeddings."""
    return float(np.dot(a, b))


def _predict_label(record: EvalRecord, label_vecs: dict) -> str:
    pv = embed_text(record.prediction_text)
    scores = {lab: cosine(pv, label_vecs[lab]) for lab in record.candidate_labels}
    top = max(scores.values())
    # ties broken toward the lexicographically smallest label
    return min(lab for lab, sc in scores.items() if sc == top)


def classify_single(records: list) -> dict:
    """Argmax-cosine label choice; accuracy and its micro-F1 alias."""
    if not records:
        raise ContractError("classify_single: no records")
    label_vecs = {}
    correct = 0
    predictions = {}
    for rec in records:
        if len(rec.gold) != 1:
            raise ContractError("classify_single: record %s is multi-label" % rec.clip_id)
        for lab in rec.candidate_labels:
            if lab not in label_vecs:
                label_vecs[lab] = embed_text(lab)
        pred = _predict_label(rec, label_vecs)
        predictions[rec.clip_id] = pred
        if pred == rec.gold[0]:
            correct += 1
    acc = correct / len(records)
    # single prediction per clip over a shared label set: micro-F1 == accuracy
    return {"accuracy": acc, "micro_f1": acc, "predictions": predictions}


def average_precision(ranked_positives: list[bool]) -> float:
    """AP over a ranked relevance list: sum of (R_n - R_{n-1}) * P_n."""
    total = sum(ranked_positives)
    if total == 0:
        return 0.0
    ap = 0.0
    hits = 0
    for n, rel in enumerate(ranked_positives, 1):
        if rel:
            hits += 1
            ap += (1.0 / total) * (hits / n)
    return ap


def classify_multilabel_map(records: list) -> dict:
    """Per-class ranking by cosine score; mAP over classes with positives."""
    if not records:
        raise ContractError("classify_multilabel_map: no records")
    candidates = sorted({lab for r in records for lab in r.candidate_labels})
    label_vecs = {lab: embed_text(lab) for lab in candidates}
    pred_vecs = {r.clip_id: embed_text(r.prediction_text) for r in records}
    per_class = {}
    skipped = []
    for lab in candidates:
        positives = {r.clip_id for r in records if lab in r.gold}
        if not positives:
            skipped.append(lab)
            continue
        ranked = sorted(records,
                        key=lambda r: (-cosine(pred_vecs[r.clip_id], label_vecs[lab]),
                                       r.clip_id))
        per_class[lab] = average_precision([r.clip_id in positives for r in ranked])
    if not per_class:
        raise ContractError("classify_multilabel_map: no class has positives")
    return {"mAP": sum(per_class.values()) / len(per_class),
            "per_class_ap": per_class,
            "classes_without_positives": skipped}


def run_eval(dataset: list[dict], generate_fn, prompt: str | None = None) -> dict:
    """Generate a caption per clip with the fixed prompt, then score.

    `dataset` rows follow the JSONL schema (clip_id, spectrogram, question,
    labels, gold, task); `generate_fn(spectrogram_path, prompt)` returns the
    model's text. Captioning rows pass predictions through unscored.
    """
    if not dataset:
        raise ContractError("run_eval: empty dataset")
    from .data import CAPTION_PROMPT
    prompt = prompt or CAPTION_PROMPT
    by_task = {"single": [], "multi": [], "caption": []}
    predictions = {}
    for row in sorted(dataset, key=lambda r: r["clip_id"]):
        task = row.get("task", "single")
        if task not in by_task:
            raise ContractError("run_eval: unknown task %r for clip %s"
                                % (task, row.get("clip_id")))
        text = generate_fn(row["spectrogram"], prompt)
        predictions[row["clip_id"]] = text
        if task == "caption":
            by_task["caption"].append(row)
        else:
            by_task[task].append(EvalRecord(
                clip_id=row["clip_id"], prediction_text=text,
                candidate_labels=list(row["labels"]), gold=list(row["gold"])))
    report = {"predictions": predictions, "metrics": {}}
    if by_task["single"]:
        res = classify_single(by_task["single"])
        report["metrics"]["single"] = {"accuracy": res["accuracy"],
                                       "micro_f1": res["micro_f1"]}
    if by_task["multi"]:
        res = classify_multilabel_map(by_task["multi"])
        report["metrics"]["multi"] = {"mAP": res["mAP"],
                                      "per_class_ap": res["per_class_ap"]}
    if by_task["caption"]:
        report["metrics"]["caption"] = {"clips": len(by_task["caption"])}
    return report
