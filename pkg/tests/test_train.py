import numpy as np
import pytest

from sslalm.data import SynthSpec, load_jsonl, synth_generate
from sslalm.encoder import EncoderConfig
from sslalm.errors import ConfigError
from sslalm.lm import LmConfig
from sslalm.model import build_model
from sslalm.tensor import Tensor
from sslalm.train import (DEFAULT_FREEZE_PLAN, AdamW, TrainConfig, Trainer,
                          apply_freeze_plan, count_trainable, train_loop)

ENC = EncoderConfig(stem_patch=2, group_depths=(1, 1, 1, 1),
                    group_dims=(8, 16, 32, 64), bridge_out_dim=48, d_state=4)
LM = LmConfig(vocab_size=259, d_model=48, n_layers=2, max_seq=512, d_state=8)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    synth_generate(SynthSpec(train_clips=4, eval_clips=2), root)
    return root, load_jsonl(root / "train.jsonl")


def _model():
    return build_model(ENC, LM, lora_rank=4, seed=0)


def test_default_freeze_plan_spares_adapters():
    m = _model()
    trainable = apply_freeze_plan(m.params(), DEFAULT_FREEZE_PLAN)
    assert all(n.startswith("enc.") or ".lora_" in n for n in trainable)
    assert any(".lora_" in n for n in trainable)
    assert not m.lm.embed.requires_grad


def test_freeze_plan_must_leave_something():
    m = _model()
    with pytest.raises(ConfigError):
        apply_freeze_plan(m.params(), (r".",))


def test_count_trainable_groups():
    m = _model()
    groups = count_trainable(m.params(), DEFAULT_FREEZE_PLAN)
    assert groups["lm"] == 0 and groups["lora"] > 0
    assert groups["total"] == groups["encoder"] + groups["bridge"] + groups["lora"]
    full = count_trainable(m.params(), ())
    assert full["lm"] > 0 and full["total"] > groups["total"]


def test_adamw_single_step_oracle():
    # one update against the closed-form adaptive-moments formula
    cfg = TrainConfig(lr=0.1, beta1=0.9, beta2=0.95, weight_decay=0.01, eps=1e-8)
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    g = np.array([0.5, -0.25])
    p.grad = g.copy()
    opt = AdamW({"p": p}, cfg)
    opt.step()
    mhat = (0.1 * g) / (1 - 0.9)
    vhat = (0.05 * g * g) / (1 - 0.95)
    expected = np.array([1.0, -2.0]) - 0.1 * (
        mhat / (np.sqrt(vhat) + 1e-8) + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(p.data, expected, atol=1e-12)


def test_weight_decay_is_decoupled():
    # zero gradient still shrinks the weight by lr * wd * w
    cfg = TrainConfig(lr=0.1, weight_decay=0.5)
    p = Tensor(np.array([2.0]), requires_grad=True)
    p.grad = np.zeros(1)
    AdamW({"p": p}, cfg).step()
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0], atol=1e-12)


def test_gradient_accumulation_equals_big_batch(corpus):
    root, records = corpus
    from sslalm.model import load_dataset_example
    examples = [load_dataset_example(root, r) for r in records]

    def run(batch_size, accum):
        m = build_model(ENC, LM, lora_rank=4, seed=0)
        tr = Trainer(m, TrainConfig(lr=1e-3, batch_size=batch_size,
                                    accum_steps=accum, max_steps=1))
        for i in range(accum):
            tr.train_step(examples[i * batch_size:(i + 1) * batch_size])
        return m.params()

    p_big = run(4, 1)
    p_acc = run(2, 2)
    for name in p_big:
        np.testing.assert_allclose(p_acc[name].data, p_big[name].data,
                                   atol=1e-9, err_msg=name)


def test_frozen_base_untouched_and_loss_drops(corpus):
    root, records = corpus
    m = _model()
    before = {n: t.data.copy() for n, t in m.params().items()
              if n.startswith("lm.") and ".lora_" not in n}
    history = train_loop(m, records, root, TrainConfig(lr=3e-3, batch_size=4,
                                                       max_steps=12))
    for name, arr in before.items():
        assert m.params()[name].data.tobytes() == arr.tobytes(), name
    assert history[-1]["loss"] < history[0]["loss"]
    assert np.isfinite(history[-1]["grad_norm"])


def test_train_loop_deterministic(corpus):
    root, records = corpus

    def run():
        m = _model()
        return train_loop(m, records, root, TrainConfig(lr=1e-3, batch_size=2,
                                                        max_steps=4, seed=1))

    h1, h2 = run(), run()
    assert [r["loss"] for r in h1] == [r["loss"] for r in h2]
    assert [r["grad_norm"] for r in h1] == [r["grad_norm"] for r in h2]


def test_metrics_log_format(corpus, tmp_path):
    root, records = corpus
    m = _model()
    train_loop(m, records, root, TrainConfig(lr=1e-3, batch_size=2, max_steps=3),
               out_dir=tmp_path)
    lines = (tmp_path / "metrics.tsv").read_text().strip().splitlines()
    assert len(lines) == 3
    for i, line in enumerate(lines, 1):
        step, loss, gnorm = line.split("\t")
        assert int(step) == i
        float(loss), float(gnorm)
