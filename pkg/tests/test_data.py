import numpy as np
import pytest

from sslalm.data import (BOS, EOS, PAD, VOCAB_SIZE, SynthSpec, answer_text,
                         detect_classes, detokenize, load_checkpoint,
                         load_jsonl, load_spectrogram, render_clip,
                         save_checkpoint, save_spectrogram, synth_generate,
                         tokenize)
from sslalm.encoder import Spectrogram
from sslalm.errors import ConfigError, DataError
from sslalm.tensor import Tensor


def test_special_tokens_and_vocab():
    assert (BOS, EOS, PAD) == (256, 257, 258)
    assert VOCAB_SIZE == 259


def test_tokenize_round_trip():
    for text in ("", "hello", "the audio contains low hum", "café"):
        ids = tokenize(text)
        assert ids[0] == BOS and ids[-1] == EOS
        assert detokenize(ids[1:]) == text
    # EOS stops decoding, specials are dropped
    assert detokenize([104, 105, EOS, 120]) == "hi"
    assert detokenize([BOS, 104, PAD, 105]) == "hi"


def test_spectrogram_round_trip(tmp_path):
    s = Spectrogram(frames=np.random.default_rng(0).normal(size=(5, 3)).astype("f4"))
    path = tmp_path / "a.spec"
    save_spectrogram(path, s)
    loaded = load_spectrogram(path)
    np.testing.assert_array_equal(loaded.frames, s.frames.astype(np.float64))


def test_spectrogram_errors(tmp_path):
    bad = tmp_path / "bad.spec"
    bad.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(DataError, match="magic"):
        load_spectrogram(bad)
    s = Spectrogram(frames=np.zeros((2, 2)))
    good = tmp_path / "good.spec"
    save_spectrogram(good, s)
    good.write_bytes(good.read_bytes()[:-4])
    with pytest.raises(DataError, match="truncated"):
        load_spectrogram(good)


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    params = {"a.w": Tensor(rng.normal(size=(3, 4))),
              "b.scalar": np.float64(2.5),
              "c.vec": rng.normal(size=7)}
    config = {"d_model": 8, "note": "x"}
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, config, path)
    cfg2, tensors = load_checkpoint(path)
    assert cfg2 == config
    for name, v in params.items():
        arr = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
        assert tensors[name].tobytes() == arr.tobytes()
    # a second save is byte-identical
    path2 = tmp_path / "m2.ckpt"
    save_checkpoint(params, config, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint({"w": np.zeros(3)}, {}, path)
    raw = path.read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-8])
    with pytest.raises(DataError, match="truncated while reading tensor w"):
        load_checkpoint(tmp_path / "trunc.ckpt")
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")


def test_synth_spec_validation():
    with pytest.raises(ConfigError):
        SynthSpec(classes_per_clip=4)
    with pytest.raises(ConfigError):
        SynthSpec(F=8)  # 8 classes need >= 16 rows


def test_bands_are_disjoint():
    spec = SynthSpec()
    bands = [spec.band(i) for i in range(len(spec.class_vocab))]
    for (lo1, hi1), (lo2, hi2) in zip(bands, bands[1:]):
        assert hi1 <= lo2 and lo1 < hi1


def test_planted_classes_are_detectable():
    spec = SynthSpec()
    rng = np.random.default_rng(2)
    for _ in range(20):
        chosen = sorted(rng.choice(8, size=2, replace=False).tolist())
        s = render_clip(spec, chosen, rng)
        found = detect_classes(spec, s)
        assert set(spec.class_vocab[c] for c in chosen) <= set(found)


def test_question_style():
    from sslalm.data import CAPTION_PROMPT, _make_clip
    with pytest.raises(ConfigError):
        SynthSpec(question_style="riddle")
    mixed = SynthSpec(question_style="mixed")
    fixed = SynthSpec(question_style="caption")
    assert _make_clip(mixed, "train", 1)[1]["question"] != CAPTION_PROMPT
    assert _make_clip(fixed, "train", 1)[1]["question"] == CAPTION_PROMPT


def test_answer_text():
    assert answer_text(["low hum"]) == "the audio contains low hum"
    assert answer_text(["a", "b"]) == "the audio contains a and b"


def test_synth_generate_deterministic(tmp_path):
    spec = SynthSpec(train_clips=4, eval_clips=2)
    d1, d2 = tmp_path / "one", tmp_path / "two"
    assert synth_generate(spec, d1) == {"train": 4, "eval": 2}
    synth_generate(spec, d2)
    assert (d1 / "train.jsonl").read_bytes() == (d2 / "train.jsonl").read_bytes()
    rec = load_jsonl(d1 / "train.jsonl")[0]
    assert (d1 / rec["spectrogram"]).read_bytes() == \
        (d2 / rec["spectrogram"]).read_bytes()
    assert set(rec) >= {"clip_id", "question", "answer", "labels", "gold",
                        "task", "spectrogram"}
    assert rec["task"] == "single" and len(rec["gold"]) == 1
    assert rec["answer"] == answer_text(rec["gold"])


def test_load_jsonl_errors(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"a": 1}\nnot json\n')
    with pytest.raises(DataError, match="line 2"):
        load_jsonl(p)
    with pytest.raises(DataError):
        load_jsonl(tmp_path / "missing.jsonl")
