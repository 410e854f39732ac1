"""Synthetic audio-question-answer corpus, byte tokenizer, and binary
persistence (spectrogram files and named-tensor checkpoints).

Every clip superposes spectrogram patterns with disjoint dominant
frequency bands, so the planted classes are recoverable by a band-energy
detector and the learning task is solvable by construction.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .encoder import Spectrogram
from .errors import ConfigError, DataError
from .tensor import Tensor

__all__ = [
    "BOS", "EOS", "PAD", "VOCAB_SIZE", "tokenize", "detokenize",
    "save_spectrogram", "load_spectrogram",
    "save_checkpoint", "load_checkpoint",
    "SynthSpec", "synth_generate", "detect_classes", "render_clip",
    "answer_text", "load_jsonl", "CAPTION_PROMPT",
]

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259

CAPTION_PROMPT = "write an audio caption describing the sound"

_SPEC_MAGIC = b"SPEC"
_CKPT_MAGIC = b"SSCK"
_FORMAT_VERSION = 1


def tokenize(text: str) -> list[int]:
    """Byte-level encoding wrapped in BOS/EOS."""
    return [BOS] + list(text.encode("utf-8")) + [EOS]


def detokenize(ids) -> str:
    """Inverse of tokenize; special tokens are dropped, EOS stops decoding."""
    out = bytearray()
    for i in ids:
        if i == EOS:
            break
        if 0 <= i < 256:
            out.append(i)
    return out.decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# spectrogram files: "SPEC" | u32 version | u32 T | u32 F | T*F float32 LE
# ---------------------------------------------------------------------------

def save_spectrogram(path, spec: Spectrogram):
    t, f = spec.frames.shape
    with open(path, "wb") as fh:
        fh.write(_SPEC_MAGIC)
        fh.write(struct.pack("<III", _FORMAT_VERSION, t, f))
        fh.write(spec.frames.astype("<f4").tobytes())


def load_spectrogram(path) -> Spectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _SPEC_MAGIC:
        raise DataError("%s: not a spectrogram file (bad magic)" % path)
    version, t, f = struct.unpack("<III", raw[4:16])
    if version != _FORMAT_VERSION:
        raise DataError("%s: unsupported spectrogram version %d" % (path, version))
    expected = 16 + 4 * t * f
    if len(raw) != expected:
        raise DataError("%s: truncated (have %d bytes, need %d)"
                        % (path, len(raw), expected))
    frames = np.frombuffer(raw[16:], dtype="<f4").reshape(t, f).astype(np.float64)
    return Spectrogram(frames=frames)


# ---------------------------------------------------------------------------
# checkpoints: "SSCK" | u32 version | u32 json_len | config json |
#              u32 n_tensors | per tensor: u32 name_len | name | u8 dtype |
#              u32 rank | rank * u32 dims | raw little-endian float64
# ---------------------------------------------------------------------------

def save_checkpoint(params: dict, config: dict, path):
    """Write named tensors (dict of name -> Tensor or array) plus config JSON."""
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _FORMAT_VERSION))
        fh.write(struct.pack("<I", len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            data = params[name]
            arr = np.asarray(data.data if isinstance(data, Tensor) else data,
                             dtype=np.float64)
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BI", 0, arr.ndim))
            fh.write(struct.pack("<%dI" % arr.ndim, *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Read (config, tensors) back; tensors are plain float64 arrays."""
    raw = Path(path).read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(raw):
            raise DataError("%s: truncated while reading %s" % (path, what))
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != _CKPT_MAGIC:
        raise DataError("%s: not a checkpoint file (bad magic)" % path)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != _FORMAT_VERSION:
        raise DataError("%s: unknown checkpoint version %d" % (path, version))
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    config = json.loads(take(cfg_len, "config").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        dtype, rank = struct.unpack("<BI", take(5, "tensor %s header" % name))
        if dtype != 0:
            raise DataError("%s: tensor %s has unknown dtype %d" % (path, name, dtype))
        dims = struct.unpack("<%dI" % rank, take(4 * rank, "tensor %s dims" % name))
        n = int(np.prod(dims)) if dims else 1
        buf = take(8 * n, "tensor %s data" % name)
        tensors[name] = np.frombuffer(buf, dtype="<f8").reshape(dims).copy()
    return config, tensors


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

_PATTERN_KINDS = ("tone", "chirp", "pulse", "noise")

_DEFAULT_CLASSES = ("low hum", "soft chirp", "pulse train", "hiss band",
                    "mid tone", "rising sweep", "click burst", "white noise")


@dataclass
class SynthSpec:
    """Recipe for a planted-class corpus of audio/question/answer tuples."""

    class_vocab: tuple = _DEFAULT_CLASSES
    train_clips: int = 512
    eval_clips: int = 128
    T: int = 64
    F: int = 16
    classes_per_clip: int = 1
    seed: int = 0
    noise_sigma: float = 0.1
    question_style: str = "mixed"  # alternate phrasings, or "caption" for all

    def __post_init__(self):
        if not (1 <= self.classes_per_clip <= 3):
            raise ConfigError("SynthSpec: classes_per_clip must be in 1..3")
        if self.question_style not in ("mixed", "caption"):
            raise ConfigError("SynthSpec: question_style must be 'mixed' or "
                              "'caption', got %r" % self.question_style)
        if self.F < 2 * len(self.class_vocab):
            raise ConfigError("SynthSpec: %d classes need >= %d frequency rows "
                              "for disjoint bands, have %d"
                              % (len(self.class_vocab), 2 * len(self.class_vocab), self.F))

    def band(self, class_index: int) -> tuple[int, int]:
        """Disjoint dominant frequency band [lo, hi) for a class."""
        width = self.F // len(self.class_vocab)
        return class_index * width, class_index * width + width


def _render_pattern(kind: str, band: tuple, T: int, F: int,
                    rng: np.random.Generator) -> np.ndarray:
    lo, hi = band
    frames = np.zeros((T, F))
    if kind == "tone":
        frames[:, lo:hi] = 1.0
    elif kind == "chirp":
        rows = lo + ((np.arange(T) * (hi - lo)) // T)
        frames[np.arange(T), rows] = 1.5
        frames[:, lo:hi] += 0.4
    elif kind == "pulse":
        on = (np.arange(T) // 4) % 2 == 0
        frames[on, lo:hi] = 1.2
        frames[:, lo:hi] += 0.2
    else:  # noise
        frames[:, lo:hi] = rng.uniform(0.5, 1.5, (T, hi - lo))
    return frames


def render_clip(spec: SynthSpec, class_indices, rng: np.random.Generator) -> Spectrogram:
    frames = rng.normal(0.0, spec.noise_sigma, (spec.T, spec.F))
    for ci in class_indices:
        kind = _PATTERN_KINDS[ci % len(_PATTERN_KINDS)]
        frames += _render_pattern(kind, spec.band(ci), spec.T, spec.F, rng)
    return Spectrogram(frames=frames)


def detect_classes(spec: SynthSpec, s: Spectrogram, threshold: float = 0.25) -> list[str]:
    """Band-energy detector; independent check that clips are solvable."""
    found = []
    for ci, name in enumerate(spec.class_vocab):
        lo, hi = spec.band(ci)
        if s.frames[:, lo:hi].mean() > threshold:
            found.append(name)
    return found


def answer_text(class_names) -> str:
    return "the audio contains " + " and ".join(class_names)


def _make_clip(spec: SynthSpec, split: str, index: int):
    rng = np.random.default_rng([spec.seed, 0 if split == "train" else 1, index])
    k = spec.classes_per_clip
    chosen = sorted(rng.choice(len(spec.class_vocab), size=k, replace=False).tolist())
    s = render_clip(spec, chosen, rng)
    if spec.question_style == "caption" or index % 2 == 0:
        question = CAPTION_PROMPT
    else:
        question = "what sounds are present?"
    names = [spec.class_vocab[c] for c in chosen]
    return s, {
        "clip_id": "%s-%04d" % (split, index),
        "question": question,
        "answer": answer_text(names),
        "labels": list(spec.class_vocab),
        "gold": names,
        "task": "single" if k == 1 else "multi",
    }


def synth_generate(spec: SynthSpec, out_dir) -> dict:
    """Write spectrograms plus train/eval JSONL; byte-deterministic per seed."""
    out = Path(out_dir)
    (out / "spectrograms").mkdir(parents=True, exist_ok=True)
    counts = {}
    for split, n in (("train", spec.train_clips), ("eval", spec.eval_clips)):
        lines = []
        for i in range(n):
            s, rec = _make_clip(spec, split, i)
            rel = "spectrograms/%s.spec" % rec["clip_id"]
            save_spectrogram(out / rel, s)
            rec["spectrogram"] = rel
            planted = detect_classes(spec, s)
            if set(rec["gold"]) - set(planted):
                raise DataError("synth_generate: clip %s classes not detectable"
                                % rec["clip_id"])
            lines.append(json.dumps(rec, sort_keys=True))
        (out / ("%s.jsonl" % split)).write_text("\n".join(lines) + "\n")
        counts[split] = n
    (out / "synth_spec.json").write_text(json.dumps({
        "class_vocab": list(spec.class_vocab), "train_clips": spec.train_clips,
        "eval_clips": spec.eval_clips, "T": spec.T, "F": spec.F,
        "classes_per_clip": spec.classes_per_clip, "seed": spec.seed,
        "noise_sigma": spec.noise_sigma, "question_style": spec.question_style,
    }, sort_keys=True, indent=2) + "\n")
    return counts


def load_jsonl(path) -> list[dict]:
    records = []
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise DataError("cannot read dataset %s: %s" % (path, e))
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as e:
            raise DataError("%s line %d: %s" % (path, ln, e))
    return records
