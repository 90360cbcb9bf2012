"""Dataset formats, parsing/serialisation, hashed vocabulary and split statistics.

Procedural JSONL, one paragraph per line::

    {"para_id": "p1", "sentences": ["...", ...], "annotated": true,
     "entities": [{"name": "water",
                   "states": [{"tag": "none"},
                              {"tag": "loc", "span": {"text": "soil", "sent": 1}}, ...]}]}

Grid TSV (fixtures), tab separated, first row is a header::

    para_id  kind       name   c0         c1    ...
    p1       sentences         Sent one.  Sent two.
    p1       entity     water  -          soil  ?

``-`` is non-existence, ``?`` unknown location, anything else location text.

Story JSONL: a header line ``{"attributes": [{"name": ..., "labels": k}, ...]}``
then one pair per line (see :func:`story_to_json`).

Gold actions are never read from files; they are derived from states.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import FormatError, IOFailure, ValidationError
from .schema import (
    NONE_STATE,
    UNKNOWN_STATE,
    Attribute,
    EntityRecord,
    EntityState,
    EntityTimeline,
    ProceduralExample,
    Span,
    StateTag,
    StoryEntity,
    StoryPair,
    validate_actions,
)

PAD, CLS, SEP, UNK = 0, 1, 2, 3
NUM_SPECIAL = 4
SPECIAL_TOKENS = {"[PAD]": PAD, "[CLS]": CLS, "[SEP]": SEP, "[UNK]": UNK}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a_64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def split_tokens(text: str) -> list[tuple[str, int, int]]:
    """Case-folded word/punctuation tokens with character offsets into ``text``."""
    return [(m.group().casefold(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


@dataclass(frozen=True)
class Vocab:
    bucket_count: int = 4096
    hash_name: str = "fnv1a64"

    def __post_init__(self):
        if self.bucket_count <= NUM_SPECIAL:
            raise ValidationError(f"vocab size must exceed {NUM_SPECIAL}")

    def token_id(self, token: str) -> int:
        return fnv1a_64(token) % (self.bucket_count - NUM_SPECIAL) + NUM_SPECIAL

    def tokenize(self, text: str) -> list[int]:
        return [self.token_id(tok) for tok, _, _ in split_tokens(text)]


# ---------------------------------------------------------------------------
# splits


@dataclass
class DatasetSplit:
    examples: list
    name: str = "train"
    attributes: list[Attribute] | None = None

    @property
    def is_story(self) -> bool:
        return self.attributes is not None

    @property
    def stats(self) -> dict:
        """Recomputed from contents on every access."""
        if self.is_story:
            stories = [(p.stories[s], p.entities[s]) for p in self.examples for s in (0, 1)]
            count = len(self.examples)
        else:
            stories = [(ex.sentences, ex.entities) for ex in self.examples]
            count = len(self.examples)
        if not stories:
            return {"paragraphs": count, "ents_per_para": 0.0, "sents_per_para": 0.0}
        return {
            "paragraphs": count,
            "ents_per_para": sum(len(e) for _, e in stories) / len(stories),
            "sents_per_para": sum(len(s) for s, _ in stories) / len(stories),
        }

    @property
    def annotated(self) -> list[ProceduralExample]:
        return [ex for ex in self.examples if ex.annotated or ex.pseudo]

    @property
    def pool(self) -> list[ProceduralExample]:
        return [ex for ex in self.examples if not ex.annotated and not ex.pseudo]


# ---------------------------------------------------------------------------
# span resolution


def resolve_span(sentences: Sequence[str], text: str, sent: int | None) -> Span:
    """Locate ``text`` token-aligned in sentence ``sent`` (1-based; None = first match)."""
    target = [t for t, _, _ in split_tokens(text)]
    if not target:
        raise ValidationError(f"empty location text {text!r}")
    paragraph = " ".join(sentences)
    offsets, pos = [], 0
    for s in sentences:
        offsets.append(pos)
        pos += len(s) + 1
    candidates = [sent] if sent is not None else range(1, len(sentences) + 1)
    for k in candidates:
        if not 1 <= k <= len(sentences):
            raise ValidationError(f"span sentence {k} outside [1, {len(sentences)}]")
        toks = split_tokens(sentences[k - 1])
        words = [t for t, _, _ in toks]
        for i in range(len(words) - len(target) + 1):
            if words[i : i + len(target)] == target:
                start = offsets[k - 1] + toks[i][1]
                end = offsets[k - 1] + toks[i + len(target) - 1][2]
                return Span(paragraph[start:end], k, start, end)
    where = f"sentence {sent}" if sent is not None else "paragraph"
    raise ValidationError(f"location {text!r} not found in {where}")


# ---------------------------------------------------------------------------
# procedural JSONL


def _state_from_json(obj: dict, sentences: Sequence[str]) -> EntityState:
    tag = obj.get("tag")
    if tag == "none":
        return NONE_STATE
    if tag == "unknown":
        return UNKNOWN_STATE
    if tag == "loc":
        span = obj.get("span")
        if not isinstance(span, dict) or "text" not in span:
            raise ValidationError("location state needs a span with text")
        return EntityState(StateTag.LOCATION, resolve_span(sentences, span["text"], span.get("sent")))
    raise ValidationError(f"unknown state tag {tag!r}")


def _state_to_json(state: EntityState) -> dict:
    if state.tag is StateTag.LOCATION:
        return {"tag": "loc", "span": {"text": state.span.text, "sent": state.span.sent}}
    return {"tag": state.tag.value}


def example_from_json(obj: dict, recreation: str = "reject") -> ProceduralExample:
    for key in ("para_id", "sentences", "entities"):
        if key not in obj:
            raise ValidationError(f"missing field {key!r}")
    sentences = obj["sentences"]
    if not isinstance(sentences, list) or not all(isinstance(s, str) for s in sentences):
        raise ValidationError("sentences must be a list of strings")
    annotated = bool(obj.get("annotated", True))
    pseudo = bool(obj.get("pseudo", False))
    records = []
    for ent in obj["entities"]:
        name = ent.get("name")
        if not isinstance(name, str):
            raise ValidationError("entity name must be a string")
        timeline = None
        if "states" in ent:
            states = [_state_from_json(s, sentences) for s in ent["states"]]
            if len(states) != len(sentences) + 1:
                raise ValidationError(f"entity {name!r} has {len(states)} states, expected {len(sentences) + 1}")
            timeline = EntityTimeline.from_states(name, states)
            validate_actions(timeline.actions, recreation, entity=name)
        records.append(EntityRecord(name, timeline))
    return ProceduralExample(str(obj["para_id"]), list(sentences), records, annotated, pseudo)


def example_to_json(ex: ProceduralExample, with_actions: bool = False) -> dict:
    ents = []
    for e in ex.entities:
        item: dict = {"name": e.name}
        if e.timeline is not None:
            item["states"] = [_state_to_json(s) for s in e.timeline.states]
            if with_actions:
                item["actions"] = [a.name for a in e.timeline.actions]
        ents.append(item)
    out = {"para_id": ex.para_id, "sentences": list(ex.sentences), "entities": ents, "annotated": ex.annotated}
    if ex.pseudo:
        out["pseudo"] = True
    return out


def _read_lines(path: str | Path) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc


def load_procedural(path: str | Path, format: str | None = None, name: str | None = None, recreation: str = "reject") -> DatasetSplit:
    fmt = format or ("grid_tsv" if str(path).endswith(".tsv") else "jsonl")
    lines = _read_lines(path)
    if fmt == "grid_tsv":
        examples = parse_grid_tsv(lines, str(path), recreation)
    elif fmt == "jsonl":
        examples = parse_procedural_jsonl(lines, str(path), recreation)
    else:
        raise ValidationError(f"unknown format {fmt!r}")
    return DatasetSplit(examples, name or Path(path).stem)


def parse_procedural_jsonl(lines: Iterable[str], path: str = "<memory>", recreation: str = "reject") -> list[ProceduralExample]:
    examples, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", lineno, path) from None
        if not isinstance(obj, dict):
            raise FormatError("expected a JSON object", lineno, path)
        try:
            ex = example_from_json(obj, recreation)
        except ValidationError as exc:
            raise FormatError(str(exc), lineno, path) from exc
        if ex.para_id in seen:
            raise FormatError(f"duplicate para_id {ex.para_id!r}", lineno, path)
        seen.add(ex.para_id)
        examples.append(ex)
    return examples


def dump_procedural(examples: Iterable[ProceduralExample], path: str | Path | None = None, with_actions: bool = False) -> str:
    text = "".join(json.dumps(example_to_json(ex, with_actions), ensure_ascii=False) + "\n" for ex in examples)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# grid TSV


def _cell_state(cell: str, sentences: Sequence[str]) -> EntityState:
    cell = cell.strip()
    if cell == "-":
        return NONE_STATE
    if cell == "?":
        return UNKNOWN_STATE
    if not cell:
        raise ValidationError("empty grid cell")
    return EntityState(StateTag.LOCATION, resolve_span(sentences, cell, None))


def parse_grid_tsv(lines: Sequence[str], path: str = "<memory>", recreation: str = "reject") -> list[ProceduralExample]:
    rows = list(csv.reader(lines, delimiter="\t", quoting=csv.QUOTE_NONE))
    if not rows or [c.strip() for c in rows[0][:3]] != ["para_id", "kind", "name"]:
        raise FormatError("header must start with para_id, kind, name", 1, path)
    order: list[str] = []
    sentences: dict[str, list[str]] = {}
    entity_rows: dict[str, list[tuple[int, str, list[str]]]] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(c.strip() for c in row):
            continue
        if len(row) < 3:
            raise FormatError("row needs para_id, kind and name columns", lineno, path)
        pid, kind, name, cells = row[0].strip(), row[1].strip(), row[2].strip(), row[3:]
        while cells and cells[-1] == "":
            cells.pop()
        if kind == "sentences":
            if pid in sentences:
                raise FormatError(f"duplicate sentences row for {pid!r}", lineno, path)
            sentences[pid] = cells
            order.append(pid)
        elif kind == "entity":
            entity_rows.setdefault(pid, []).append((lineno, name, cells))
        else:
            raise FormatError(f"unknown row kind {kind!r}", lineno, path)
    examples = []
    for pid in order:
        sents = sentences[pid]
        records = []
        for lineno, name, cells in entity_rows.pop(pid, []):
            if len(cells) != len(sents) + 1:
                raise FormatError(f"entity {name!r} has {len(cells)} cells, expected {len(sents) + 1}", lineno, path)
            try:
                timeline = EntityTimeline.from_states(name, [_cell_state(c, sents) for c in cells])
                validate_actions(timeline.actions, recreation, entity=name)
            except ValidationError as exc:
                raise FormatError(str(exc), lineno, path) from exc
            records.append(EntityRecord(name, timeline))
        try:
            examples.append(ProceduralExample(pid, sents, records))
        except ValidationError as exc:
            raise FormatError(str(exc), None, path) from exc
    if entity_rows:
        raise FormatError(f"entity rows without sentences: {sorted(entity_rows)}", None, path)
    return examples


def dump_grid_tsv(examples: Iterable[ProceduralExample]) -> str:
    buf = io.StringIO()
    examples = list(examples)
    width = max((ex.n + 1 for ex in examples), default=1)
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n", quoting=csv.QUOTE_NONE, escapechar="\\")
    writer.writerow(["para_id", "kind", "name"] + [f"c{i}" for i in range(width)])
    for ex in examples:
        writer.writerow([ex.para_id, "sentences", ""] + list(ex.sentences))
        for e in ex.entities:
            cells = []
            for s in e.timeline.states:
                cells.append("-" if s.tag is StateTag.NON_EXISTENCE else "?" if s.tag is StateTag.UNKNOWN_LOCATION else s.span.text)
            writer.writerow([ex.para_id, "entity", e.name] + cells)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# story JSONL


def story_to_json(pair: StoryPair) -> dict:
    return {
        "pair_id": pair.pair_id,
        "stories": [list(pair.stories[0]), list(pair.stories[1])],
        "plausible": pair.plausible,
        "conflict": list(pair.conflict),
        "entities": [[{"name": e.name, "pre": e.pre, "eff": e.eff} for e in ents] for ents in pair.entities],
    }


def story_from_json(obj: dict, attributes: Sequence[Attribute]) -> StoryPair:
    for key in ("pair_id", "stories", "plausible", "conflict", "entities"):
        if key not in obj:
            raise ValidationError(f"missing field {key!r}")
    stories = obj["stories"]
    if not isinstance(stories, list) or len(stories) != 2:
        raise ValidationError("stories must be a list of two sentence lists")
    ents = obj["entities"]
    if not isinstance(ents, list) or len(ents) != 2:
        raise ValidationError("entities must hold one list per story")
    conflict = obj["conflict"]
    if not isinstance(conflict, list) or len(conflict) != 2:
        raise ValidationError("conflict must be [c1, c2]")
    pair = StoryPair(
        pair_id=str(obj["pair_id"]),
        stories=(list(stories[0]), list(stories[1])),
        plausible=int(obj["plausible"]),
        conflict=(int(conflict[0]), int(conflict[1])),
        entities=tuple(
            [StoryEntity(e["name"], [list(map(int, r)) for r in e["pre"]], [list(map(int, r)) for r in e["eff"]]) for e in side]
            for side in ents
        ),
    )
    pair.validate(attributes)
    return pair


def parse_attributes(obj: dict) -> list[Attribute]:
    attrs = obj.get("attributes")
    if not isinstance(attrs, list) or not attrs:
        raise ValidationError("header needs a nonempty attributes list")
    out = [Attribute(str(a["name"]), int(a["labels"])) for a in attrs]
    if len({a.name for a in out}) != len(out):
        raise ValidationError("duplicate attribute names")
    return out


def parse_story_jsonl(lines: Sequence[str], path: str = "<memory>") -> tuple[list[Attribute], list[StoryPair]]:
    attributes = None
    pairs, seen = [], set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid JSON: {exc.msg}", lineno, path) from None
        try:
            if attributes is None:
                attributes = parse_attributes(obj)
                continue
            pair = story_from_json(obj, attributes)
        except (ValidationError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(str(exc), lineno, path) from exc
        if pair.pair_id in seen:
            raise FormatError(f"duplicate pair_id {pair.pair_id!r}", lineno, path)
        seen.add(pair.pair_id)
        pairs.append(pair)
    if attributes is None:
        raise FormatError("missing attribute header line", 1, path)
    return attributes, pairs


def load_story(path: str | Path, name: str | None = None) -> DatasetSplit:
    attributes, pairs = parse_story_jsonl(_read_lines(path), str(path))
    return DatasetSplit(pairs, name or Path(path).stem, attributes)


def dump_story(attributes: Sequence[Attribute], pairs: Iterable[StoryPair], path: str | Path | None = None) -> str:
    header = {"attributes": [{"name": a.name, "labels": a.labels} for a in attributes]}
    text = json.dumps(header) + "\n" + "".join(json.dumps(story_to_json(p), ensure_ascii=False) + "\n" for p in pairs)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def is_story_file(path: str | Path) -> bool:
    for line in _read_lines(path):
        if line.strip():
            try:
                return "attributes" in json.loads(line)
            except json.JSONDecodeError:
                return False
    return False


def load_any(path: str | Path, name: str | None = None) -> DatasetSplit:
    return load_story(path, name) if is_story_file(path) else load_procedural(path, name=name)


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def split_sha256(split: DatasetSplit) -> str:
    if split.is_story:
        text = dump_story(split.attributes, split.examples)
    else:
        text = dump_procedural(split.examples)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
