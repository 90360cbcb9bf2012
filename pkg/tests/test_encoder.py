from __future__ import annotations

import numpy as np
import pytest

from proctrack import numerics as nx
from proctrack.encoder import (
    TS_CURRENT,
    TS_FUTURE,
    TS_PAST,
    Ablations,
    EncoderConfig,
    build_step_input,
    encode,
    encode_steps,
    extract_span,
    gold_token_span,
    init_encoder,
    init_span_head,
    span_probs,
    valid_span_mask,
)
from proctrack.ingest import PAD, Vocab, resolve_span

SMALL = EncoderConfig(vocab_size=128, d=16, layers=2, heads=4, ff=32, m_max=64, max_span_len=4)
SENTS = ["aa bb", "cc dd", "ee ff"]


def model(seed=0, cfg=SMALL):
    rng = nx.make_rng(seed)
    p = init_encoder(cfg, rng)
    p.update(init_span_head(cfg, rng))
    return p


def test_timestep_ids_rule_table():
    v = Vocab(128)
    # question "where is x" = 3 tokens
    x = build_step_input(SENTS, "x", 2, v)
    assert list(x.timestep_ids) == [2, 2, 2, 2, 2, 1, 1, 2, 2, 3, 3, 2]
    x0 = build_step_input(SENTS, "x", 0, v)
    assert list(x0.timestep_ids[x0.para_start : x0.para_end]) == [TS_FUTURE] * 6
    x3 = build_step_input(SENTS, "x", 3, v)
    assert list(x3.timestep_ids[x3.para_start : x3.para_end]) == [TS_PAST] * 4 + [TS_CURRENT] * 2
    assert len(x.token_ids) == len(x.timestep_ids) == len(x.sentence_map)
    with pytest.raises(ValueError):
        build_step_input(SENTS, "x", 4, v)


def test_truncation_is_recorded():
    long = [" ".join(f"w{i}" for i in range(40))] * 3
    x = build_step_input(long, "x", 1, Vocab(128), m_max=32)
    assert x.length == 32 and x.truncated == 5 + 120 - 31  # [CLS] + 3 question + [SEP], keep m_max - 1


def test_padding_tokens_have_timestep_zero():
    v = Vocab(128)
    inputs = [build_step_input(["aa"], "x", 1, v), build_step_input(["aa bb cc"], "x", 1, v)]
    from proctrack.encoder import pad_batch

    ids, ts, mask = pad_batch(inputs)
    assert np.array_equal(ids == PAD, ts == 0)
    assert np.array_equal(mask, ids != PAD)


def test_padding_gets_zero_attention():
    cfg = EncoderConfig(vocab_size=32, d=8, layers=1, heads=2, ff=8, m_max=8)
    p = init_encoder(cfg, nx.make_rng(1))
    short = build_step_input(["aa"], "", 0, Vocab(32), ablations=Ablations(no_e=True))
    # trim to 2 real tokens and pad with 2 more to the batch length
    short.token_ids = short.token_ids[:2]
    short.timestep_ids = short.timestep_ids[:2]
    longer = build_step_input(["aa bb"], "", 0, Vocab(32), ablations=Ablations(no_e=True))
    longer.token_ids, longer.timestep_ids = longer.token_ids[:4], longer.timestep_ids[:4]
    enc = encode([short, longer], p, cfg, keep_attention=True)
    probs = enc.attention[0][0]  # [H, m, m] for the short input
    assert np.all(probs[:, :2, 2:] == 0.0)


def test_zeroed_timestep_table_makes_steps_identical():
    p = model()
    p["enc.timestep"].data[:] = 0.0
    v = Vocab(SMALL.vocab_size)
    xs = [build_step_input(SENTS, "x", t, v) for t in (1, 2)]
    enc = encode(xs, p, SMALL)
    assert np.array_equal(enc.tokens.data[0], enc.tokens.data[1])


def test_no_t_rows_identical():
    p = model()
    v = Vocab(SMALL.vocab_size)
    xs = [build_step_input(SENTS, "x", t, v) for t in range(4)]
    cls = encode_steps(xs, p, SMALL, no_t=True).cls.data
    assert all(np.array_equal(cls[0], cls[t]) for t in range(4))
    full = encode_steps(xs, p, SMALL).cls.data
    assert not np.array_equal(full[0], full[1])


def test_no_e_rows_identical_across_entities():
    p = model()
    v = Vocab(SMALL.vocab_size)
    ab = Ablations(no_e=True)
    a = encode_steps([build_step_input(SENTS, e, 2, v, ablations=ab) for e in ("x", "y")], p, SMALL).cls.data
    assert np.array_equal(a[0], a[1])


def test_no_gc_ignores_future_sentences():
    p = model()
    v = Vocab(SMALL.vocab_size)
    ab = Ablations(no_gc=True)
    other = ["aa bb", "cc dd", "zz yy qq"]
    for t in range(3):
        a = encode_steps([build_step_input(SENTS, "x", s, v, ablations=ab) for s in range(4)], p, SMALL).cls.data
        b = encode_steps([build_step_input(other, "x", s, v, ablations=ab) for s in range(4)], p, SMALL).cls.data
        assert np.array_equal(a[t], b[t])


def test_span_distributions_normalised():
    p = model()
    v = Vocab(SMALL.vocab_size)
    xs = [build_step_input(SENTS, "x", t, v) for t in range(4)]
    ps, pe = span_probs(encode_steps(xs, p, SMALL), p)
    np.testing.assert_allclose(ps.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(pe.sum(axis=1), 1.0, atol=1e-9)


def test_extract_span_cls_answer():
    x = build_step_input(SENTS, "x", 1, Vocab(128))
    ps = np.zeros(x.length)
    pe = np.zeros(x.length)
    ps[0] = pe[0] = 1.0
    assert extract_span(ps, pe, x, 8)[:2] == (0, 0)


def test_extract_span_never_inverted_matches_brute_force():
    x = build_step_input(SENTS, "x", 1, Vocab(128))
    m = x.length
    ps = np.full(m, 0.01)
    pe = np.full(m, 0.01)
    ps[x.para_start + 3] = 0.5
    pe[x.para_start + 2] = 0.5
    i, j, s = extract_span(ps / ps.sum(), pe / pe.sum(), x, 4)
    assert i <= j
    best = max(
        (
            (a, b)
            for a in range(m)
            for b in range(m)
            if (a == b == 0)
            or (x.para_start <= a <= b < x.para_end and b - a < 4 and x.sentence_map[a] == x.sentence_map[b])
        ),
        key=lambda ab: (ps[ab[0]] * pe[ab[1]], -ab[0], -ab[1]),
    )
    assert (i, j) == best


def test_extract_span_uniform_tie_break():
    x = build_step_input(SENTS, "x", 1, Vocab(128))
    u = np.full(x.length, 1.0 / x.length)
    assert extract_span(u, u, x, 4)[:2] == (0, 0)


def test_valid_span_mask_excludes_question():
    mask = valid_span_mask(10, 5, 9, 3)
    assert mask[0, 0] and not mask[1, 1] and mask[5, 7] and not mask[5, 8] and not mask[6, 5]


def test_spans_stay_inside_one_sentence():
    x = build_step_input(SENTS, "x", 1, Vocab(128))
    ps = np.zeros(x.length)
    pe = np.zeros(x.length)
    # most mass on "bb" as start and "cc" as end: the cross-sentence pair is not decodable
    ps[x.para_start + 1] = 0.9
    pe[x.para_start + 2] = 0.9
    ps[x.para_start + 2] = pe[x.para_start + 1] = 0.05
    i, j, _ = extract_span(ps, pe, x, 4)
    assert x.sentence_map[i] == x.sentence_map[j]


def test_gold_token_span_and_visibility():
    sents = ["the soil is wet", "roots pull water"]
    v = Vocab(128)
    span = resolve_span(sents, "soil", 1)
    x = build_step_input(sents, "water", 2, v)
    i, j = gold_token_span(x, span)
    assert (i, j) != (0, 0) and x.sentence_map[i] == 1
    hidden = build_step_input(sents, "water", 0, v, ablations=Ablations(no_gc=True))
    assert gold_token_span(hidden, span) == (0, 0)


def test_encode_deterministic():
    v = Vocab(SMALL.vocab_size)
    xs = [build_step_input(SENTS, "x", t, v) for t in range(4)]
    a = encode_steps(xs, model(3), SMALL).tokens.data
    b = encode_steps(xs, model(3), SMALL).tokens.data
    assert np.array_equal(a, b)


def test_all_parameters_trainable():
    p = model()
    assert all(t.requires_grad for t in p.values())
    assert p["enc.timestep"].shape == (4, SMALL.d)
