import numpy as np
import pytest

from sslalm.data import BOS, EOS, SynthSpec, synth_generate, load_jsonl
from sslalm.encoder import EncoderConfig, Spectrogram
from sslalm.errors import ConfigError, DataError
from sslalm.lm import LmConfig
from sslalm.model import (build_model, load_dataset_example, load_model,
                          model_from_config, save_model)
from sslalm.sample import SamplerConfig

ENC = EncoderConfig(stem_patch=2, group_depths=(1, 1, 1, 1),
                    group_dims=(8, 16, 32, 64), bridge_out_dim=48, d_state=4)
LM = LmConfig(vocab_size=259, d_model=48, n_layers=2, max_seq=512, d_state=8)


def _model(**kw):
    return build_model(ENC, LM, **kw)


def test_build_validates_bridge_dim():
    with pytest.raises(ConfigError):
        build_model(EncoderConfig(stem_patch=2, group_depths=(1, 1, 1, 1),
                                  group_dims=(8, 16, 32, 64), bridge_out_dim=32,
                                  d_state=4), LM)


def test_param_registry_prefixes():
    m = _model(lora_rank=4)
    names = set(m.params())
    assert "enc.stem.w" in names and "lm.embed" in names
    assert "lm.layers.00.in_proj.lora_A" in names
    # every name is unique by construction of the dict; spot-check count
    enc_n = sum(1 for n in names if n.startswith("enc."))
    assert enc_n == len(m.encoder.params())


def test_sequence_for_masks_question():
    m = _model()
    seq = m.sequence_for("ab", "cd", audio_len=3)
    assert seq.ids[0] == BOS and seq.ids[-1] == EOS
    assert seq.ids[1:3] == [97, 98] and seq.ids[3:5] == [99, 100]
    assert seq.loss_mask == [False, False, False, True, True, True]
    assert seq.audio_prefix_len == 3


def test_sequence_for_unmasked_mode():
    m = _model(mask_question=False)
    seq = m.sequence_for("ab", "cd", audio_len=3)
    assert seq.loss_mask == [False, True, True, True, True, True]


def test_encode_and_loss_shapes():
    m = _model()
    spec = Spectrogram(frames=np.random.default_rng(0).normal(size=(64, 16)))
    audio = m.encode_audio(spec)
    assert audio.data.shape == (2, 48)
    loss = m.example_loss(spec, "what?", "a hum")
    assert np.isfinite(loss.item()) and loss.item() > 0


def test_caption_returns_text():
    m = _model()
    spec = Spectrogram(frames=np.random.default_rng(1).normal(size=(64, 16)))
    text = m.caption(spec, "describe", SamplerConfig(max_new_tokens=8))
    assert isinstance(text, str) and len(text) <= 8


def test_checkpoint_round_trip_bitwise(tmp_path):
    m = _model(lora_rank=4)
    path = tmp_path / "m.ckpt"
    save_model(m, path)
    m2 = load_model(path)
    p1, p2 = m.params(), m2.params()
    assert set(p1) == set(p2)
    for name in p1:
        assert p1[name].data.tobytes() == p2[name].data.tobytes(), name
    # saved again, the bytes are identical
    save_model(m2, tmp_path / "m2.ckpt")
    assert path.read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_load_model_names_bad_tensor(tmp_path):
    from sslalm.data import load_checkpoint, save_checkpoint
    m = _model()
    path = tmp_path / "m.ckpt"
    save_model(m, path)
    config, tensors = load_checkpoint(path)
    del tensors["lm.embed"]
    save_checkpoint(tensors, config, path)
    with pytest.raises(DataError, match="lm.embed"):
        load_model(path)
    tensors["lm.embed"] = np.zeros((7, 7))
    save_checkpoint(tensors, config, path)
    with pytest.raises(DataError, match="lm.embed"):
        load_model(path)


def test_model_from_config_round_trip():
    m = _model(lora_rank=4)
    m2 = model_from_config(m.config_dict(), seed=0)
    assert m2.config_dict() == m.config_dict()


def test_load_dataset_example(tmp_path):
    spec = SynthSpec(train_clips=2, eval_clips=1)
    synth_generate(spec, tmp_path)
    rec = load_jsonl(tmp_path / "train.jsonl")[0]
    s, q, a = load_dataset_example(tmp_path, rec)
    assert s.frames.shape == (64, 16)
    assert q == rec["question"] and a == rec["answer"]
