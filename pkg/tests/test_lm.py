import numpy as np
import pytest

from sslalm.errors import ConfigError
from sslalm.lm import (LmConfig, LmWeights, TokenSequence, init_lm_states,
                       lm_forward, lm_step, next_token_loss)
from sslalm.tensor import ContractError, Graph, Tensor

CFG = LmConfig(vocab_size=30, d_model=8, n_layers=2, max_seq=64, d_state=4)


def _weights(seed=0, cfg=CFG):
    return LmWeights.init(cfg, np.random.default_rng(seed))


def test_forward_shapes_text_only():
    w = _weights()
    logits = lm_forward(w, None, [1, 2, 3])
    assert logits.data.shape == (3, 30)


def test_forward_with_audio_prefix():
    w = _weights()
    audio = Tensor(np.random.default_rng(1).normal(size=(4, 8)))
    logits = lm_forward(w, audio, [5, 6])
    assert logits.data.shape == (6, 30)
    # text-span logits differ from the unconditioned run: audio conditions text
    plain = lm_forward(w, None, [5, 6])
    assert np.max(np.abs(logits.data[4:] - plain.data)) > 1e-9


def test_forward_validates():
    w = _weights()
    with pytest.raises(ContractError):
        lm_forward(w, None, [])
    with pytest.raises(ContractError):
        lm_forward(w, None, [1] * 70)
    bad_audio = Tensor(np.zeros((2, 5)))
    with pytest.raises(ConfigError):
        lm_forward(w, bad_audio, [1])
    cfg = LmConfig(vocab_size=30, d_model=8, n_layers=1, audio_prefix=False)
    with pytest.raises(ConfigError):
        lm_forward(_weights(cfg=cfg), Tensor(np.zeros((2, 8))), [1])


def test_step_matches_forward():
    w = _weights(seed=2)
    audio = np.random.default_rng(3).normal(size=(3, 8))
    ids = [4, 9, 1, 17]
    full = lm_forward(w, Tensor(audio), ids).data
    states = init_lm_states(w)
    outs = []
    for row in audio:
        logits, states = lm_step(w, row, states)
        outs.append(logits)
    for tok in ids:
        logits, states = lm_step(w, w.embed.data[tok], states)
        outs.append(logits)
    np.testing.assert_allclose(np.stack(outs), full, atol=1e-9)


def test_lora_attach_targets_every_layer():
    w = _weights()
    w.attach_lora(rank=2)
    names = set(w.params())
    assert "lm.layers.00.in_proj.lora_A" in names
    assert "lm.layers.01.in_proj.lora_B" in names
    # fresh adapters leave the forward untouched
    base = lm_forward(_weights(), None, [1, 2]).data
    np.testing.assert_array_equal(lm_forward(w, None, [1, 2]).data, base)


def test_next_token_loss_alignment():
    # single predicted token with known logits: loss = -log softmax[target]
    w = _weights()
    seq = TokenSequence(ids=[3, 7], loss_mask=[False, True], audio_prefix_len=0)
    logits = lm_forward(w, None, seq.ids)
    loss = next_token_loss(logits, seq)
    row = logits.data[0]
    expected = -(row[7] - np.log(np.exp(row - row.max()).sum()) - row.max())
    assert loss.item() == pytest.approx(expected, abs=1e-9)


def test_next_token_loss_contracts():
    logits = Tensor(np.zeros((2, 30)))
    with pytest.raises(ContractError):
        next_token_loss(logits, TokenSequence(ids=[1, 2], loss_mask=[False, False]))
    with pytest.raises(ContractError):
        next_token_loss(logits, TokenSequence(ids=[1], loss_mask=[True],
                                              audio_prefix_len=0))
    with pytest.raises(ContractError):
        TokenSequence(ids=[1, 2], loss_mask=[True])


def test_loss_backward_reaches_embedding():
    w = _weights()
    seq = TokenSequence(ids=[1, 2, 3], loss_mask=[False, True, True])
    with Graph() as g:
        g.backward(next_token_loss(lm_forward(w, None, seq.ids), seq))
    assert w.embed.grad is not None and np.any(w.embed.grad != 0.0)
