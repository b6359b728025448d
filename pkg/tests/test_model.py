import numpy as np
import pytest

from ivtlr import substrate as S
from ivtlr import vocab
from ivtlr.model import (CapacityError, ModelConfig, embed_inputs, forward, forward_calls, greedy_decode,
                         init_params, next_token_logits, param_shapes)
from ivtlr.substrate import Tensor
from ivtlr.tasks import generate_dataset

SMALL = ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, max_seq=64)


@pytest.fixture(scope="module")
def samples():
    return generate_dataset(20, seed=0)[0]


@pytest.fixture(scope="module")
def params():
    return init_params(SMALL, 0)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, n_heads=4).validate()
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10).validate()
    ModelConfig().validate()


def test_default_capacity_covers_stage0_plus_three_blocks():
    cfg = ModelConfig()
    train, test = generate_dataset(300, seed=0)
    longest = max(len(s.question_tokens) + cfg.n_patches + sum(len(x) + 1 for x in s.rationale_steps) + 2
                  for s in train + test)
    assert cfg.max_seq >= longest + 3 * (cfg.default_k + 1)


def test_param_shapes_head_is_vocab_by_d():
    shapes = param_shapes(ModelConfig())
    assert shapes["head"] == (vocab.VOCAB_SIZE, 64)
    for special in (vocab.LATENT, vocab.BOS, vocab.EOS, vocab.STEP, vocab.PAD):
        assert special in vocab.TOKEN_ID


def test_embed_inputs_layout(samples, params):
    seq = embed_inputs(params, samples[:1])
    q = len(samples[0].question_tokens)
    assert len(seq) == q + 16
    assert seq.tags == ["text"] * q + ["image"] * 16


def test_embed_inputs_empty_question(samples, params):
    s = samples[0]
    broken = type(s)(**{**s.__dict__, "question_tokens": []})
    with pytest.raises(ValueError):
        embed_inputs(params, [broken])


def test_embed_inputs_capacity(samples):
    tight = init_params(ModelConfig(n_layers=1, n_heads=2, d_model=16, d_ff=16, max_seq=20), 0)
    with pytest.raises(CapacityError):
        embed_inputs(tight, samples[:1])


def test_embed_inputs_deterministic(samples, params):
    a = embed_inputs(params, samples[:3]).content.data
    b = embed_inputs(params, samples[:3]).content.data
    assert a.tobytes() == b.tobytes()


def test_trace_invariants(samples, params):
    seq = embed_inputs(params, samples[:2])
    trace = forward(params, seq.content)
    assert trace.attn.shape == (2, SMALL.n_layers, SMALL.n_heads, len(seq), len(seq))
    np.testing.assert_allclose(trace.attn.astype(np.float64).sum(-1), 1.0, atol=1e-6)
    assert np.all(np.triu(trace.attn[0, 0, 0], 1) == 0.0)
    # hidden[0] is the input sequence (content plus position embeddings)
    pos = params["pos_emb"].data[: len(seq)]
    np.testing.assert_allclose(trace.hidden[0].data, seq.content.data + pos, atol=1e-6)
    assert len(trace.hidden) == SMALL.n_layers + 1


def test_causality(samples, params):
    seq = embed_inputs(params, samples[:1])
    base = forward(params, seq.content).logits.data
    bumped = seq.content.data.copy()
    t = 10
    bumped[0, t + 1:] += np.random.default_rng(0).normal(size=bumped[0, t + 1:].shape).astype(np.float32)
    after = forward(params, Tensor(bumped)).logits.data
    np.testing.assert_array_equal(base[0, : t + 1], after[0, : t + 1])
    assert not np.allclose(base[0, t + 1:], after[0, t + 1:])


def test_last_hidden_matches_prefix_rerun(samples, params):
    seq = embed_inputs(params, samples[:1])
    full = forward(params, seq.content).hidden_array()
    for cut in (5, 17, len(seq)):
        prefix = forward(params, S.slice_rows(seq.content, 0, cut)).last_hidden().data[0, 0]
        np.testing.assert_allclose(prefix, full[-1, cut - 1], atol=1e-5)


def test_next_token_distribution(samples, params):
    seq = embed_inputs(params, samples[:1])
    trace = forward(params, seq.content)
    p = next_token_logits(trace)
    assert abs(p.sum() - 1.0) < 1e-6
    # argmax oracle: W . h computed directly
    h = trace.hidden[-1].data[0, -1].astype(np.float64)
    direct = params["head"].data.astype(np.float64) @ h
    assert int(np.argmax(p)) == int(np.argmax(direct))


def test_zero_head_is_uniform(samples):
    p0 = init_params(SMALL, 1)
    p0["head"].data[:] = 0.0
    trace = forward(p0, embed_inputs(p0, samples[:1]).content)
    np.testing.assert_allclose(next_token_logits(trace), 1.0 / SMALL.vocab_size, atol=1e-9)


def test_greedy_zero_length(samples, params):
    assert greedy_decode(params, embed_inputs(params, samples[:1]), 0) == ([], 0)


def test_greedy_forced_eos(samples):
    p = init_params(SMALL, 2)
    p["head"].data[:] = 0.0
    p["head"].data[vocab.EOS_ID] = 1.0
    p["ln_f.g"].data[:] = 0.0
    p["ln_f.b"].data[:] = 1.0
    tokens, passes = greedy_decode(p, embed_inputs(p, samples[:1]), 10)
    assert tokens == [vocab.EOS_ID] and passes == 1


@pytest.mark.parametrize("seed", range(4))
def test_greedy_pass_count_equals_tokens(samples, seed):
    p = init_params(SMALL, seed)
    before = forward_calls()
    tokens, passes = greedy_decode(p, embed_inputs(p, samples[seed:seed + 1]), 7)
    assert passes == len(tokens) == forward_calls() - before


def test_greedy_capacity(samples, params):
    with pytest.raises(CapacityError):
        greedy_decode(params, embed_inputs(params, samples[:1]), SMALL.max_seq)


def test_forward_rejects_wrong_width(params):
    with pytest.raises(S.DimensionError):
        forward(params, Tensor(np.zeros((1, 4, 8))))
