from __future__ import annotations

import json

import pytest

from proctrack.errors import FormatError, ValidationError
from proctrack.ingest import (
    CLS,
    PAD,
    SEP,
    UNK,
    DatasetSplit,
    Vocab,
    dump_grid_tsv,
    dump_procedural,
    dump_story,
    load_any,
    load_procedural,
    load_story,
    parse_grid_tsv,
    parse_procedural_jsonl,
    parse_story_jsonl,
    resolve_span,
    split_tokens,
)
from proctrack.schema import Action, StateTag
from proctrack.synthetic import PAPER_SPLIT_SIZES, STORY_ATTRIBUTES, synthesize, synthesize_stories

from oracles import fnv1a

A = Action

WATER = {
    "para_id": "p1",
    "sentences": ["Rain soaks the soil .", "Roots pull water from the soil to the root .", "The plant uses the water ."],
    "entities": [
        {
            "name": "water",
            "states": [
                {"tag": "none"},
                {"tag": "loc", "span": {"text": "soil", "sent": 1}},
                {"tag": "loc", "span": {"text": "root", "sent": 2}},
                {"tag": "none"},
            ],
        }
    ],
    "annotated": True,
}


def test_jsonl_fixture_derives_actions():
    [ex] = parse_procedural_jsonl([json.dumps(WATER)])
    tl = ex.timeline("water")
    assert list(tl.actions) == [A.CREATE, A.MOVE, A.DESTROY]
    assert tl.states[1].span.text == "soil" and tl.states[1].span.sent == 1


def test_empty_entity_list_accepted():
    obj = dict(WATER, entities=[])
    [ex] = parse_procedural_jsonl([json.dumps(obj)])
    assert ex.entities == []


def test_actions_in_file_are_ignored():
    obj = json.loads(json.dumps(WATER))
    obj["entities"][0]["actions"] = ["EXIST", "EXIST", "EXIST"]
    [ex] = parse_procedural_jsonl([json.dumps(obj)])
    assert list(ex.timeline("water").actions) == [A.CREATE, A.MOVE, A.DESTROY]


def test_malformed_line_reports_line_number():
    lines = [json.dumps(WATER), "{not json"]
    with pytest.raises(FormatError) as err:
        parse_procedural_jsonl(lines, "f.jsonl")
    assert err.value.line == 2


def test_illegal_timeline_names_entity_and_step():
    obj = json.loads(json.dumps(WATER))
    # destroyed at step 1, back at step 3: re-creation rejected by default
    obj["entities"][0]["states"] = [
        {"tag": "loc", "span": {"text": "soil", "sent": 1}},
        {"tag": "none"},
        {"tag": "none"},
        {"tag": "loc", "span": {"text": "water", "sent": 3}},
    ]
    with pytest.raises(FormatError) as err:
        parse_procedural_jsonl([json.dumps(obj)])
    assert "water" in str(err.value) and err.value.line == 1
    [ex] = parse_procedural_jsonl([json.dumps(obj)], recreation="warn")
    assert ex.timeline("water").actions[-1] == A.CREATE


def test_span_not_found_is_validation_error():
    with pytest.raises(ValidationError):
        resolve_span(["the soil ."], "leaf", 1)
    span = resolve_span(["The Soil is wet ."], "soil", None)
    assert span.text == "Soil" and span.start == 4


def test_jsonl_round_trip(tmp_path):
    gold, pool = synthesize(6, seed=3, pool=2)
    path = tmp_path / "d.jsonl"
    dump_procedural(gold.examples + pool.examples, path)
    again = load_procedural(path)
    assert dump_procedural(again.examples) == path.read_text()
    assert len(again.pool) == 2 and len(again.annotated) == 6


def test_grid_tsv_round_trip(tmp_path):
    gold, _ = synthesize(5, seed=4)
    text = dump_grid_tsv(gold.examples)
    parsed = parse_grid_tsv(text.splitlines())
    assert dump_grid_tsv(parsed) == text
    for a, b in zip(gold.examples, parsed):
        for ra, rb in zip(a.entities, b.entities):
            assert ra.timeline.actions == rb.timeline.actions
            assert [s.location_key for s in ra.timeline.states] == [s.location_key for s in rb.timeline.states]
    (tmp_path / "g.tsv").write_text(text)
    assert len(load_procedural(tmp_path / "g.tsv").examples) == 5


def test_grid_tsv_cells():
    text = "para_id\tkind\tname\tc0\tc1\tc2\np\tsentences\t\tA seed forms in the soil .\tThe seed is eaten .\np\tentity\tseed\t-\tsoil\t-\n"
    [ex] = parse_grid_tsv(text.splitlines())
    assert list(ex.timeline("seed").actions) == [A.CREATE, A.DESTROY]
    bad = text.replace("\t-\n", "\n")
    with pytest.raises(FormatError):
        parse_grid_tsv(bad.splitlines())


def test_tokenize_split_rule_and_hash():
    assert [t for t, _, _ in split_tokens("Water moves.")] == ["water", "moves", "."]
    v = Vocab(4096)
    ids = v.tokenize("Water moves.")
    assert len(ids) == 3 and ids == v.tokenize("Water moves.")
    assert v.token_id("water") == fnv1a("water") % 4092 + 4
    assert (PAD, CLS, SEP, UNK) == (0, 1, 2, 3)
    assert all(4 <= i < 4096 for i in v.tokenize("a b c the of , ."))


STORY_HEADER = {"attributes": [{"name": "wet", "labels": 3}, {"name": "broken", "labels": 2}]}


def story_line(**kw):
    ent = {"name": "cup", "pre": [[0, 0]] * 4, "eff": [[0, 0]] * 4}
    obj = {
        "pair_id": "s1",
        "stories": [["a", "b", "c", "d"], ["a", "b", "x", "d"]],
        "plausible": 1,
        "conflict": [1, 4],
        "entities": [[ent], [ent]],
    }
    obj.update(kw)
    return json.dumps(obj)


def test_story_fixture_parses():
    attrs, [pair] = parse_story_jsonl([json.dumps(STORY_HEADER), story_line()])
    assert pair.conflict == (1, 4) and pair.implausible == 0
    assert [a.name for a in attrs] == ["wet", "broken"]


def test_story_rejections():
    with pytest.raises(FormatError):
        parse_story_jsonl([json.dumps(STORY_HEADER), story_line(stories=[["a", "b"], ["a", "b"]])])
    with pytest.raises(FormatError):
        parse_story_jsonl([json.dumps(STORY_HEADER), story_line(conflict=[0, 2])])
    with pytest.raises(FormatError):
        parse_story_jsonl([story_line()])


def test_twenty_attribute_registry(tmp_path):
    header = {"attributes": [{"name": f"attr{i}", "labels": 3} for i in range(20)]}
    ent = {"name": "cup", "pre": [[0] * 20] * 3, "eff": [[1] * 20] * 3}
    pair = {
        "pair_id": "s",
        "stories": [["a", "b", "c"], ["a", "q", "c"]],
        "plausible": 0,
        "conflict": [2, 3],
        "entities": [[ent], [ent]],
    }
    path = tmp_path / "s.jsonl"
    path.write_text(json.dumps(header) + "\n" + json.dumps(pair) + "\n")
    split = load_story(path)
    assert len(split.attributes) == 20
    from proctrack.story import StoryModel

    model = StoryModel.create(split.examples, split.attributes, seed=0)
    assert len(model.transitions) == 40


def test_story_round_trip(tmp_path):
    split = synthesize_stories(5, seed=2)
    text = dump_story(STORY_ATTRIBUTES, split.examples)
    path = tmp_path / "s.jsonl"
    path.write_text(text)
    again = load_any(path)
    assert again.is_story and dump_story(again.attributes, again.examples) == text


def test_stats_are_recomputed():
    gold, _ = synthesize(4, seed=1)
    split = DatasetSplit(list(gold.examples), "train")
    before = split.stats["paragraphs"]
    split.examples.pop()
    assert split.stats["paragraphs"] == before - 1


def test_paper_shaped_split_sizes():
    gold, pool = synthesize(PAPER_SPLIT_SIZES["train"], seed=0, pool=5, sentences=(2, 3), entities=(1, 2))
    assert gold.stats["paragraphs"] == 391
    assert len(pool.examples) == 5
    assert 1 <= gold.stats["ents_per_para"] <= 2


def test_synthetic_gold_is_legal():
    gold, _ = synthesize(30, seed=9)
    for ex in gold.examples:
        for rec in ex.entities:
            states = rec.timeline.states
            for s in states:
                if s.tag is StateTag.LOCATION:
                    assert ex.paragraph[s.span.start : s.span.end] == s.span.text
