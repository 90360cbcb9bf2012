from __future__ import annotations

import math

import numpy as np
import pytest

from proctrack import crf
from proctrack.encoder import Ablations
from proctrack.errors import ValidationError
from proctrack.gradchecks import STORY_FIXTURE_ATTRIBUTES, TINY, story_fixture, story_suite
from proctrack.metrics import story_metrics
from proctrack.numerics import Tape, Tensor, backward
from proctrack.schema import Attribute, StoryEntity, StoryPair, pair_from_index
from proctrack.story import (
    SIDES,
    StoryModel,
    attribute_emissions,
    conflict_scores,
    decide,
    entity_story_loss,
    plausibility,
    predict_story,
    story_encode,
    story_loss,
    story_predict,
    train_story,
)
from proctrack.synthetic import STORY_ATTRIBUTES, synthesize_stories
from proctrack.trainer import Adam, TrainConfig

from oracles import brute_logz


def fixture_model(no_crf=True, seed=0):
    return StoryModel.create([story_fixture()], STORY_FIXTURE_ATTRIBUTES, TINY, seed=seed, no_crf=no_crf)


def test_two_b_modules_and_shapes():
    model = fixture_model()
    B = len(STORY_FIXTURE_ATTRIBUTES)
    assert len(model.transitions) == 2 * B
    d = TINY.d
    for side in SIDES:
        for b, attr in enumerate(STORY_FIXTURE_ATTRIBUTES):
            head = model.head(side, b)
            assert head.w_d.shape == (d, d) and head.w_a.shape == (d, attr.labels)
            assert head.transitions.scores.shape == (attr.labels + 1, attr.labels)
    assert model.params["story.w_confl"].shape == (2 * d,)
    assert model.params["story.w_plau"].shape == (d, 2)


def test_story_encode_has_one_row_per_sentence():
    model = fixture_model()
    rows = story_encode(model, ["a b .", "c d .", "e f .", "g .", "h ."], "cup")
    assert rows.shape == (5, TINY.d)
    no_t = StoryModel.create([story_fixture()], STORY_FIXTURE_ATTRIBUTES, TINY, Ablations(no_t=True))
    rows = story_encode(no_t, ["a b .", "c d .", "e f ."], "cup").data
    assert np.array_equal(rows[0], rows[1]) and np.array_equal(rows[0], rows[2])


def test_conflict_distribution_examples():
    w = Tensor(np.random.default_rng(0).normal(size=8))
    rows2 = Tensor(np.random.default_rng(1).normal(size=(2, 4)))
    np.testing.assert_array_equal(conflict_scores(rows2, w).data, [1.0])
    rows5 = Tensor(np.random.default_rng(2).normal(size=(5, 4)))
    p = conflict_scores(rows5, w).data
    assert p.shape == (10,) and abs(p.sum() - 1.0) < 1e-9
    np.testing.assert_allclose(conflict_scores(rows5, Tensor(np.zeros(8))).data, 0.1, atol=1e-15)
    assert pair_from_index(5, 5) == (2, 4)
    with pytest.raises(ValidationError):
        conflict_scores(Tensor(np.zeros((1, 4))), w)


def test_conflict_scores_follow_row_major_pairs():
    rows = Tensor(np.diag([1.0, 2.0, 3.0, 4.0]))
    # with all-ones weights each pair's logit is the sum of both rows
    w = Tensor(np.concatenate([np.ones(4), np.ones(4)]))
    logits = np.log(conflict_scores(rows, w).data)
    expected = np.array([rows.data[t].sum() + rows.data[j].sum() for t in range(4) for j in range(t + 1, 4)])
    np.testing.assert_allclose(logits - logits[0], expected - expected[0], atol=1e-12)


def test_plausibility_examples():
    rows = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    np.testing.assert_allclose(plausibility(rows, Tensor(np.zeros((4, 2)))).data, [0.5, 0.5])
    w = Tensor(np.random.default_rng(1).normal(size=(4, 2)))
    assert np.array_equal(plausibility(rows, w).data, plausibility(Tensor(rows.data.copy()), w).data)


def test_conflict_head_gradient_zero_for_plausible_story():
    # at least three sentences, so the conflict softmax is not a singleton
    split = synthesize_stories(1, seed=0)
    pair = split.examples[0]
    model = StoryModel.create([pair], STORY_ATTRIBUTES, TINY)
    w = model.params["story.w_confl"]
    with Tape() as tape:
        loss, parts = entity_story_loss(model, pair, pair.plausible, 0)
    assert "confl" not in parts
    assert np.all(backward(tape, loss, [w])[w] == 0.0)
    with Tape() as tape:
        loss, parts = entity_story_loss(model, pair, pair.implausible, 0)
    assert "confl" in parts
    assert np.any(backward(tape, loss, [w])[w] != 0.0)


@pytest.mark.parametrize("no_crf", [True, False])
def test_uniform_heads_attribute_loss_counts_paths(no_crf):
    attrs = [Attribute("wet", 3)]
    ent = StoryEntity("cup", pre=[[0], [1], [2]], eff=[[1], [2], [0]])
    pair = StoryPair("u", (["a .", "b .", "c ."], ["a .", "x .", "c ."]), 1, (1, 3), ([ent], [ent]))
    model = StoryModel.create([pair], attrs, TINY, no_crf=no_crf)
    for name, p in model.params.items():
        if name.endswith(".w_a") or name.endswith(".psi"):
            p.data[:] = 0.0
    for tm in model.transitions.values():
        tm.blocked[:] = False
    _, parts = entity_story_loss(model, pair, 0, 0)
    n, labels = 3, 3
    one = brute_logz(np.zeros((n, labels)), np.zeros((labels + 1, labels)))
    assert one == pytest.approx(math.log(labels**n))
    assert parts["att"].item() == pytest.approx(2 * one, abs=1e-12)


def test_head_rows_are_local_in_stepwise_mode():
    model = fixture_model(no_crf=True)
    rng = np.random.default_rng(0)
    rows = rng.normal(size=(4, TINY.d))
    head = model.head("pre", 0)
    base = attribute_emissions(Tensor(rows), head).data
    for j in range(4):
        bumped = rows.copy()
        bumped[j] += rng.normal(size=TINY.d)
        out = attribute_emissions(Tensor(bumped), head).data
        for t in range(4):
            if t != j:
                assert np.array_equal(out[t], base[t])
        assert not np.array_equal(out[j], base[j])


@pytest.mark.parametrize("no_crf", [True, False])
def test_single_module_update_leaves_others_identical(no_crf):
    pair = story_fixture()
    model = fixture_model(no_crf=no_crf)
    before = {k: p.data.copy() for k, p in model.params.items()}
    with Tape() as tape:
        loss = story_loss(model, pair)
    grads = backward(tape, loss, model.params.values())
    target = model.head_params("pre", 0)
    Adam({k: model.params[k] for k in target}, 0.1).step({k: grads[model.params[k]] for k in target})
    for k, p in model.params.items():
        if k in target:
            if not (k.endswith(".psi") and no_crf):
                assert not np.array_equal(p.data, before[k]), k
        else:
            assert np.array_equal(p.data, before[k]), k


def test_attribute_loss_does_not_touch_other_modules():
    from proctrack.story import attribute_loss

    pair = story_fixture()
    model = fixture_model(no_crf=False)
    rows = story_encode(model, pair.stories[0], "cup")
    with Tape() as tape:
        loss = attribute_loss(model, rows, [1, 0], "pre", 0)
    others = [model.params[k] for s in SIDES for b in range(2) if (s, b) != ("pre", 0) for k in model.head_params(s, b)]
    grads = backward(tape, loss, others)
    assert all(np.all(grads[p] == 0.0) for p in others)


def test_story_loss_gradcheck():
    for name, report in story_suite().items():
        assert report.ok, (name, report.to_dict())


def test_entity_order_does_not_change_predictions():
    split = synthesize_stories(2, seed=4)
    model = StoryModel.create(split.examples, STORY_ATTRIBUTES, TINY, seed=1)
    pair = split.examples[0]
    names = [e.name for e in pair.entities[0]]
    assert len(names) >= 2
    a = predict_story(model, pair.stories[0], names)
    b = predict_story(model, pair.stories[0], names[::-1])
    np.testing.assert_allclose(a.plausibility, b.plausibility, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.conflict, b.conflict, rtol=0, atol=1e-12)
    assert a.attributes == b.attributes


def test_single_entity_averaging_is_identity():
    pair = story_fixture()
    model = fixture_model()
    pred = predict_story(model, pair.stories[0], ["cup"])
    rows = story_encode(model, pair.stories[0], "cup")
    np.testing.assert_allclose(pred.plausibility, plausibility(rows, model.params["story.w_plau"]).data, atol=1e-15)
    np.testing.assert_allclose(pred.conflict, conflict_scores(rows, model.params["story.w_confl"]).data, atol=1e-15)


def test_pair_decision_rule():
    pair = story_fixture()
    from proctrack.story import StoryPrediction

    low = StoryPrediction(np.array([0.7, 0.3]), np.array([1.0]), {})
    high = StoryPrediction(np.array([0.2, 0.8]), np.array([1.0]), {})
    assert decide(pair, [low, high]) == (1, (1, 2))
    assert decide(pair, [high, low])[0] == 0
    assert decide(pair, [low, low])[0] == 0


def test_crf_mode_decodes_without_blocked_transitions():
    split = synthesize_stories(6, seed=2)
    model = StoryModel.create(split.examples, STORY_ATTRIBUTES, TINY, no_crf=False)
    for pair in split.examples:
        preds, record = story_predict(model, pair)
        for s in (0, 1):
            for ent_rows in preds[s].attributes.values():
                for side in SIDES:
                    for b in range(len(STORY_ATTRIBUTES)):
                        tm = model.transitions[f"story.{side}{b}.psi"]
                        path = [row[b] for row in ent_rows[side]]
                        assert not crf.uses_blocked(path, tm.blocked)


def test_training_and_prediction_feed_metrics(tmp_path):
    split = synthesize_stories(4, seed=0)
    res = train_story(split, TrainConfig(epochs=2, seed=3), TINY)
    assert len(res.history) == 2 and res.manifest["config"]["no_crf"] is True
    records = [story_predict(res.model, p)[1] for p in split.examples]
    rep = story_metrics(split.examples, records, STORY_ATTRIBUTES)
    assert rep.verifiability <= rep.consistency <= rep.accuracy
    res.model.save(tmp_path / "s.json")
    again = StoryModel.load(tmp_path / "s.json")
    assert again.dumps() == res.model.dumps()
    assert story_predict(again, split.examples[0])[1].to_json() == records[0].to_json()


def test_story_training_is_deterministic():
    split = synthesize_stories(3, seed=1)
    cfg = TrainConfig(epochs=1, seed=2)
    assert train_story(split, cfg, TINY).model.dumps() == train_story(split, cfg, TINY).model.dumps()


def test_story_loss_decreases():
    split = synthesize_stories(4, seed=0)
    hist = train_story(split, TrainConfig(epochs=8, lr=3e-3), TINY).history
    assert hist[-1]["loss"] < hist[0]["loss"]


def test_checkpoint_registry_mismatch_rejected():
    model = fixture_model()
    with pytest.raises(ValidationError):
        StoryModel(model.encoder, model.ablations, [Attribute("x", 2)], dict(model.params), model.transitions)
