import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabomlab import autodiff as ad
from tabomlab.model import (DenoiserConfig, Vocabulary, entropies, forward, init_params, load_checkpoint,
                            predict, predict_batch, save_checkpoint, token_entropy)
from tabomlab.objectives import finetune
from tabomlab.optim import OptimConfig
from tabomlab.tasks import default_vocab, encode_pair, generate_corpus, get_task

VOCAB = default_vocab()
SMALL = DenoiserConfig(layers=2, heads=2, model_dim=16, ffn_dim=32, max_prompt_len=8, max_response_len=6, seed=3)


def test_vocabulary_ids():
    v = Vocabulary(("a", "b", "<eos>"))
    assert v.mask_id == 3 and v.size == 4 and v.eos_id == 2
    assert v.encode("a b") == [0, 1]
    with pytest.raises(ValueError):
        Vocabulary(("a", "a", "<eos>"))
    with pytest.raises(ValueError):
        Vocabulary(("a", "b"))


def test_config_heads_must_divide_dim():
    with pytest.raises(ValueError):
        DenoiserConfig(model_dim=10, heads=4)


def test_output_head_excludes_mask():
    p = init_params(SMALL, VOCAB)
    assert p["out.w"].shape == (SMALL.model_dim, VOCAB.base_size)


def test_rows_sum_to_one():
    p = init_params(SMALL, VOCAB)
    rng = np.random.default_rng(0)
    states = rng.integers(0, VOCAB.size, size=(5, 6))
    prompts = [list(rng.integers(0, VOCAB.base_size, size=k)) for k in (1, 3, 5, 8, 0)]
    probs = predict_batch(p, prompts, states)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-9)


def test_zero_weights_give_uniform_entropy():
    p = init_params(SMALL, VOCAB, zero=True)
    probs = predict(p, [1, 2], [VOCAB.mask_id] * 6)
    for row in probs:
        assert abs(token_entropy(row) - math.log(VOCAB.base_size)) < 1e-6


def test_length_overflow_rejected():
    p = init_params(SMALL, VOCAB)
    with pytest.raises(ValueError, match="max_response_len"):
        predict(p, [1], [VOCAB.mask_id] * 7)
    with pytest.raises(ValueError, match="max_prompt_len"):
        predict(p, [1] * 9, [VOCAB.mask_id] * 6)


def test_predict_is_deterministic():
    p = init_params(SMALL, VOCAB)
    a = predict(p, [1, 2, 3], [VOCAB.mask_id, 4, VOCAB.mask_id, 1, 2, 3])
    b = predict(p, [1, 2, 3], [VOCAB.mask_id, 4, VOCAB.mask_id, 1, 2, 3])
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("row,expected", [
    ([0.25] * 4, math.log(4)),
    ([1.0, 0.0, 0.0], 0.0),
    ([0.5, 0.5, 0.0, 0.0], math.log(2)),
])
def test_token_entropy_examples(row, expected):
    assert token_entropy(row) == pytest.approx(expected, abs=1e-12)


def test_token_entropy_rejects_unnormalized():
    with pytest.raises(ValueError):
        token_entropy([0.5, 0.6])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=8), st.randoms(use_true_random=False))
def test_entropy_permutation_invariant_and_bounded(w, rnd):
    row = np.array(w) / sum(w)
    perm = list(row)
    rnd.shuffle(perm)
    h = token_entropy(row)
    assert h == pytest.approx(token_entropy(perm), abs=1e-12)
    assert -1e-12 <= h <= math.log(len(row)) + 1e-12
    assert entropies(row[None])[0] == pytest.approx(h, abs=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    logits = ad.Tensor(np.random.default_rng(1).normal(size=(1, 7)), requires_grad=True)
    target = 3
    ad.backward(ad.scale(ad.sum(ad.take_last(ad.log_softmax(logits), [target])), -1.0))
    p = np.exp(logits.data[0] - logits.data.max())
    p /= p.sum()
    onehot = np.eye(7)[target]
    np.testing.assert_allclose(logits.grad[0], p - onehot, atol=1e-8)


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SMALL, VOCAB)
    save_checkpoint(p, tmp_path / "m.ckpt")
    q = load_checkpoint(tmp_path / "m.ckpt")
    assert q.version_tag == p.version_tag and q.config == p.config and q.vocab == p.vocab
    for name in p.tensors:
        assert p[name].data.tobytes() == q[name].data.tobytes()
    save_checkpoint(q, tmp_path / "n.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "n.ckpt").read_bytes()


def test_truncated_checkpoint_rejected(tmp_path):
    p = init_params(SMALL, VOCAB)
    save_checkpoint(p, tmp_path / "m.ckpt")
    blob = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "t.ckpt").write_bytes(blob[:-16])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "x.ckpt")


def test_bidirectional_attention_sees_later_positions():
    p = init_params(SMALL, VOCAB)
    m = VOCAB.mask_id
    a = predict(p, [1], [m, m, m, m, m, 2])
    b = predict(p, [1], [m, m, m, m, m, 5])
    assert not np.allclose(a[0], b[0])


def test_trained_copy_model_fills_forced_position():
    # one masked position in a copy answer is determined by the prompt
    cfg = DenoiserConfig(layers=2, heads=4, model_dim=64, ffn_dim=128, max_prompt_len=8, max_response_len=8, seed=0)
    spec = get_task("copy")
    train = [encode_pair(VOCAB, p, a, 8) for p, a in generate_corpus(spec, 800, 1)]
    res = finetune(init_params(cfg, VOCAB), train, "sft-gt",
                   OptimConfig(lr=3e-3, warmup=20, epochs=8, batch_size=32), seed=0)
    assert res.steps == 200
    seen = {tuple(p) for p, _ in train}
    held = [encode_pair(VOCAB, p, a, 8) for p, a in generate_corpus(spec, 400, 2)]
    held = [(p, a) for p, a in held if tuple(p) not in seen][:50]
    assert len(held) == 50
    rng = np.random.default_rng(0)
    hits = 0
    for prompt, ans in held:
        n_real = len(prompt) - 1
        r = int(rng.integers(0, n_real))
        state = list(ans)
        state[r] = VOCAB.mask_id
        hits += int(np.argmax(predict(res.params, prompt, state)[r]) == ans[r])
    assert hits == 50, hits
