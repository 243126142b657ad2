import itertools
import math

import numpy as np
import pytest

import scalar_reference as ref
from helpers import toy_batch, toy_state
from selfrefine_vlm import decoder as dec
from selfrefine_vlm.data import SyntheticSpec, corpus_vocab, generate_corpus
from selfrefine_vlm.layers import attention, init_block
from selfrefine_vlm.model import ModelConfig, ModelState
from selfrefine_vlm.numcore import ShapeError, Tape, check_params, parameter


def _desk_model():
    corpus = generate_corpus(SyntheticSpec(n_examples=20, seed=3))
    vocab = corpus_vocab(corpus)
    state = ModelState.init(ModelConfig(), vocab, 5)
    rng = np.random.default_rng(77)
    for name, p in state.params.items():
        if name.startswith("dec."):
            p.data += rng.normal(0.0, 0.05, p.shape)
    return state, corpus


# ---------------------------------------------------------------------------
# embed_tokens


def test_embed_rows_equal_table_rows_without_positions():
    rng = np.random.default_rng(0)
    table = parameter(rng.normal(size=(10, 4)))
    ids = np.array([3, 7, 3, 0])
    zero_pos = parameter(np.zeros((8, 4)))
    t = Tape()
    out = dec.embed_tokens(t, ids, table, zero_pos, offset=2).data
    np.testing.assert_array_equal(out, table.data[ids])
    np.testing.assert_array_equal(out[0], out[2])


def test_embed_matches_index_loop_with_offset():
    rng = np.random.default_rng(1)
    table, pos = parameter(rng.normal(size=(10, 4))), parameter(rng.normal(size=(12, 4)))
    ids = np.array([[1, 5, 9], [2, 2, 0]])
    out = dec.embed_tokens(Tape(), ids, table, pos, offset=4).data
    for b in range(2):
        for i in range(3):
            np.testing.assert_array_equal(out[b, i], table.data[ids[b, i]] + pos.data[4 + i])


def test_embed_rejects_out_of_range_ids():
    table = parameter(np.zeros((5, 2)))
    with pytest.raises(IndexError):
        dec.embed_tokens(Tape(), [5], table)
    with pytest.raises(IndexError):
        dec.embed_tokens(Tape(), [-1], table)


def test_one_hot_argmax_round_trip():
    ids = np.array([4, 1, 7, 7, 2])
    logits = np.eye(8)[ids] * 5.0
    back = logits.argmax(axis=-1)
    table = parameter(np.random.default_rng(2).normal(size=(8, 3)))
    np.testing.assert_array_equal(dec.embed_tokens(Tape(), back, table).data, table.data[ids])


# ---------------------------------------------------------------------------
# forward


def test_zero_output_path_gives_uniform_cross_entropy():
    state, corpus = _desk_model()
    state.params["dec.ln_f.g"].data[...] = 0.0
    state.params["dec.ln_f.b"].data[...] = 0.0
    ids = state.vocab.encode(corpus[1].report)
    t = Tape()
    rec = state.forward(t, corpus[1].image[None], np.array([ids[:-1]]))
    np.testing.assert_array_equal(rec.logits.data, 0.0)
    loss = dec.report_loss(t, rec.logits, np.array([ids[1:]])).item()
    assert loss == pytest.approx(math.log(64), abs=1e-12)


def test_future_tokens_do_not_change_past_logits():
    state, corpus = _desk_model()
    ids = np.array([state.vocab.encode(corpus[2].report)[:-1]])
    base = state.forward(Tape(), corpus[2].image[None], ids).logits.data
    for j in range(1, ids.shape[1]):
        changed = ids.copy()
        changed[0, j] = (changed[0, j] + 5) % len(state.vocab)
        out = state.forward(Tape(), corpus[2].image[None], changed).logits.data
        np.testing.assert_array_equal(out[0, :j], base[0, :j])


def test_forward_matches_scalar_loop_golden():
    state, corpus = _desk_model()
    ids = np.array([state.vocab.encode(corpus[0].report)[:-1]])
    t = Tape(record=False)
    rec = state.forward(t, corpus[0].image[None], ids)
    tokens, _ = state.encode_images(t, corpus[0].image[None])
    inputs, spans = state.decode_inputs(t, tokens, ids)
    params = {k: v.data for k, v in state.params.items()}
    logits, attn = ref.decoder(inputs.data[0], params, 2, 4, spans.report[0])
    np.testing.assert_allclose(rec.logits.data[0], logits, rtol=0, atol=1e-12)
    np.testing.assert_allclose(rec.last_attn.data[0], attn, rtol=0, atol=1e-12)
    # frozen from the scalar-loop oracle
    assert rec.logits.data.sum() == pytest.approx(11.87411578077381, abs=1e-12)
    assert rec.logits.data[0, 2, 7] == pytest.approx(-0.0650140887437558, abs=1e-12)


def test_attention_rows_are_causal_distributions():
    rng = np.random.default_rng(3)
    params = init_block("blk", 8, 2, rng)
    for p in params.values():
        p.data += rng.normal(0.0, 0.5, p.shape)
    t = Tape()
    x = t.constant(rng.normal(size=(2, 9, 8)))
    _, w = attention(t, x, params, "blk", heads=2, causal=True)
    w = w.data
    assert np.abs(w.sum(axis=-1) - 1).max() < 1e-6
    upper = np.triu(np.ones((9, 9), dtype=bool), k=1)
    assert np.all(w[..., upper] == 0.0)


def test_record_spans_and_shapes():
    state = toy_state()
    batch = toy_batch(report_len=4)
    rec = state.forward(Tape(), batch.images, batch.report_in)
    assert rec.spans.image == (0, 4) and rec.spans.prompt == (4, 7) and rec.spans.report == (7, 11)
    assert rec.logits.shape == (2, 4, 8)
    assert rec.last_attn.shape == (2, 2, 11, 11)
    assert rec.image_rep.shape == (2, 8)


def test_overlength_sequence_rejected():
    state = toy_state()
    too_long = np.ones((1, 10), dtype=np.int64)  # 4 image + 3 prompt + 10 > 16
    with pytest.raises(ShapeError):
        state.forward(Tape(), np.zeros((1, 4, 4, 1)), too_long)


# ---------------------------------------------------------------------------
# report_loss


def test_report_loss_examples():
    t = Tape()
    targets = np.array([[3, 1, 2]])
    sharp = np.full((1, 3, 5), -1e4)
    sharp[0, np.arange(3), targets[0]] = 1e4
    assert dec.report_loss(t, t.constant(sharp), targets).item() < 1e-12
    uniform = np.zeros((1, 3, 64))
    assert dec.report_loss(t, t.constant(uniform), targets).item() == pytest.approx(math.log(64), abs=1e-12)


def test_report_loss_matches_scalar_cross_entropy():
    rng = np.random.default_rng(4)
    logits = rng.normal(scale=2.0, size=(3, 5, 7))
    targets = rng.integers(1, 7, size=(3, 5))
    targets[1, 3:] = 0
    targets[2, 1:] = 0
    t = Tape()
    got = dec.report_loss(t, t.constant(logits), targets).item()
    per_sample = []
    for b in range(3):
        terms = [ref.cross_entropy(list(logits[b, i]), int(targets[b, i])) for i in range(5) if targets[b, i] != 0]
        per_sample.append(sum(terms) / len(terms))
    assert got == pytest.approx(sum(per_sample) / 3, abs=1e-10)


def test_report_loss_length_mismatch():
    t = Tape()
    with pytest.raises(ShapeError):
        dec.report_loss(t, t.constant(np.zeros((1, 3, 5))), np.array([[1, 2]]))


def test_report_loss_gradients_through_two_layer_decoder():
    state = toy_state(layers=2)
    batch = toy_batch(pad_last=True, report_len=4)
    params = {k: v for k, v in state.params.items() if k.startswith("dec.")}

    def loss():
        t = Tape()
        rec = state.forward(t, batch.images, batch.report_in)
        return dec.report_loss(t, rec.logits, batch.targets)

    errs = check_params(loss, params)
    assert max(errs.values()) < 1e-4, {k: v for k, v in errs.items() if v >= 1e-4}


# ---------------------------------------------------------------------------
# beam search

EOS_TOY = 2


def _toy_lm(table):
    """Next-token log-probs from a (position, previous token) lookup; token 3 is BOS."""

    def step(prefixes):
        rows = []
        for seq in prefixes:
            z = table[len(seq) - 1][seq[-1]]
            rows.append(z - np.log(np.exp(z).sum()))
        return np.array(rows)

    return step


def _brute_force(step, max_len, vocab=3, bos=3):
    best = None
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(vocab), repeat=n):
            if EOS_TOY in seq[:-1]:
                continue
            if n < max_len and seq[-1] != EOS_TOY:
                continue
            score, prefix = 0.0, [bos]
            for tok in seq:
                score += step([prefix])[0][tok]
                prefix = prefix + [tok]
            key = (score / n, [-x for x in seq])
            if best is None or key > best[0]:
                best = (key, list(seq), score)
    return best[1], best[2]


HAND_TABLE = np.array(
    [
        # position 0, indexed by previous token (only BOS=3 used)
        [[0, 0, 0], [0, 0, 0], [0, 0, 0], [1.0, 1.2, -0.5]],
        # position 1
        [[2.0, 0.0, 0.5], [0.1, 0.0, 1.5], [0, 0, 0], [0, 0, 0]],
        # position 2
        [[0.0, 0.2, 3.0], [1.0, 1.0, 1.0], [0, 0, 0], [0, 0, 0]],
    ]
)


def test_beam_matches_brute_force_on_hand_set_toy_lm():
    step = _toy_lm(HAND_TABLE)
    want, want_score = _brute_force(step, 3)
    out = dec.beam_search(step, beam_width=3, max_len=3, bos=3, eos=EOS_TOY)
    assert out.ids == want
    assert out.score == pytest.approx(want_score, abs=1e-12)


def test_wide_beam_is_exhaustive_on_random_toy_lms():
    for trial in range(50):
        table = np.random.default_rng(trial).normal(scale=2.0, size=(3, 4, 3))
        step = _toy_lm(table)
        want, _ = _brute_force(step, 3)
        assert dec.beam_search(step, beam_width=9, max_len=3, bos=3, eos=EOS_TOY).ids == want


def test_width_one_is_greedy_and_width_three_dominates():
    for seed in range(10):
        state = toy_state(seed=seed, jitter=1.0)
        image = np.random.default_rng(seed).random((4, 4, 1))
        step = state.step_fn(image)
        greedy = dec.greedy_decode(step, 8)
        one = dec.beam_search(step, 1, 8)
        three = dec.beam_search(step, 3, 8)
        assert one.ids == greedy.ids and one.score == pytest.approx(greedy.score, abs=1e-12)
        assert three.normalized_score >= one.normalized_score - 1e-12
        assert three.score <= 0


def test_tie_breaks_toward_lower_token_id():
    step = lambda prefixes: np.log(np.full((len(prefixes), 3), 1 / 3))  # noqa: E731
    assert dec.beam_search(step, 2, 2, bos=3, eos=EOS_TOY).ids == [0, 0]


def test_beam_width_must_be_positive():
    with pytest.raises(ValueError):
        dec.beam_search(lambda p: np.zeros((len(p), 3)), 0, 3)
