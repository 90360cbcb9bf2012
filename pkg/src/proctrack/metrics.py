"""Procedural (sentence- and document-level) and story evaluation.

All conventions (set matching, undefined precision, averaging order) are
listed in docs/metrics.md. Evaluators are pure functions of their inputs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .errors import ValidationError
from .schema import Action, Attribute, EntityTimeline, ProceduralExample, StoryPair

EVENTS = ("created", "moved", "destroyed")
_EVENT_ACTION = {"created": Action.CREATE, "moved": Action.MOVE, "destroyed": Action.DESTROY}


def _rate(correct: int, asked: int) -> float:
    return correct / asked if asked else 1.0


def _align(gold: Sequence[ProceduralExample], pred: Sequence[ProceduralExample]) -> dict[str, ProceduralExample]:
    by_id = {ex.para_id: ex for ex in pred}
    return {ex.para_id: by_id.get(ex.para_id) for ex in gold}


def _pred_timeline(ex: ProceduralExample | None, name: str) -> EntityTimeline | None:
    if ex is None:
        return None
    for rec in ex.entities:
        if rec.name == name:
            return rec.timeline
    return None


# ---------------------------------------------------------------------------
# sentence level


def event_steps(tl: EntityTimeline, event: str) -> list[int]:
    """1-based steps at which the event happens."""
    kind = _EVENT_ACTION[event]
    return [t for t, a in enumerate(tl.actions, start=1) if a == kind]


def event_locations(tl: EntityTimeline, event: str) -> list[str]:
    """Location keys at each event: where it was created / moved to / destroyed from."""
    steps = event_steps(tl, event)
    if event == "destroyed":
        return [tl.states[t - 1].location_key for t in steps]
    return [tl.states[t].location_key for t in steps]


@dataclass
class SentenceLevelReport:
    cat1: float
    cat2: float
    cat3: float
    macro_avg: float
    micro_avg: float
    tallies: dict
    missing_entities: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def sentence_level(gold: Sequence[ProceduralExample], pred: Sequence[ProceduralExample]) -> SentenceLevelReport:
    counts = {c: [0, 0] for c in ("cat1", "cat2", "cat3")}  # [correct, asked]
    missing = []
    aligned = _align(gold, pred)
    for ex in gold:
        pex = aligned[ex.para_id]
        for rec in ex.entities:
            g = rec.timeline
            if g is None:
                raise ValidationError(f"{ex.para_id}: gold entity {rec.name!r} has no timeline")
            p = _pred_timeline(pex, rec.name)
            if p is None:
                missing.append(f"{ex.para_id}/{rec.name}")
                counts["cat1"][1] += len(EVENTS)
                continue
            for event in EVENTS:
                gs, ps = event_steps(g, event), event_steps(p, event)
                counts["cat1"][1] += 1
                counts["cat1"][0] += int(bool(gs) == bool(ps))
                if not (gs and ps):
                    continue
                counts["cat2"][1] += 1
                counts["cat2"][0] += int(set(gs) == set(ps))
                g_locs = event_locations(g, event)
                if all(loc == "?" for loc in g_locs):
                    continue
                counts["cat3"][1] += 1
                counts["cat3"][0] += int(g_locs == event_locations(p, event))
    cats = {c: _rate(*v) for c, v in counts.items()}
    correct = sum(v[0] for v in counts.values())
    asked = sum(v[1] for v in counts.values())
    tallies = {c: {"correct": v[0], "asked": v[1]} for c, v in counts.items()}
    return SentenceLevelReport(
        cats["cat1"], cats["cat2"], cats["cat3"], sum(cats.values()) / 3, _rate(correct, asked), tallies, missing
    )


# ---------------------------------------------------------------------------
# document level

CATEGORIES = ("inputs", "outputs", "conversions", "moves")


def _entity_key(name: str) -> str:
    return name.casefold()


def extract_tuples(ex: ProceduralExample) -> dict[str, set]:
    out: dict[str, set] = {c: set() for c in CATEGORIES}
    destroyed_at: dict[int, set] = {}
    created_at: dict[int, set] = {}
    for rec in ex.entities:
        tl = rec.timeline
        if tl is None:
            continue
        key = _entity_key(rec.name)
        first, last = tl.states[0].exists, tl.states[-1].exists
        if first and not last and Action.DESTROY in tl.actions:
            out["inputs"].add(key)
        if not first and last:
            out["outputs"].add(key)
        for t, a in enumerate(tl.actions, start=1):
            if a == Action.DESTROY:
                destroyed_at.setdefault(t, set()).add(key)
            elif a == Action.CREATE:
                created_at.setdefault(t, set()).add(key)
            elif a == Action.MOVE:
                out["moves"].add((key, t, tl.states[t - 1].location_key, tl.states[t].location_key))
    for t in sorted(set(destroyed_at) & set(created_at)):
        out["conversions"].add((t, frozenset(destroyed_at[t]), frozenset(created_at[t])))
    return out


def precision_recall(gold: set, pred: set) -> tuple[float, float]:
    if not gold and not pred:
        return 1.0, 1.0
    hit = len(gold & pred)
    return (hit / len(pred) if pred else 0.0), (hit / len(gold) if gold else 0.0)


def f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float


@dataclass
class DocumentLevelReport:
    categories: dict[str, PRF]
    overall: PRF
    paragraphs: int

    def to_dict(self) -> dict:
        return {
            "categories": {k: asdict(v) for k, v in self.categories.items()},
            "overall": asdict(self.overall),
            "paragraphs": self.paragraphs,
        }


def document_level(gold: Sequence[ProceduralExample], pred: Sequence[ProceduralExample]) -> DocumentLevelReport:
    aligned = _align(gold, pred)
    sums = {c: [0.0, 0.0] for c in CATEGORIES}
    for ex in gold:
        pex = aligned[ex.para_id]
        g = extract_tuples(ex)
        p = extract_tuples(pex) if pex is not None else {c: set() for c in CATEGORIES}
        for c in CATEGORIES:
            pr, rc = precision_recall(g[c], p[c])
            sums[c][0] += pr
            sums[c][1] += rc
    k = max(len(gold), 1)
    cats = {}
    for c in CATEGORIES:
        pr, rc = (sums[c][0] / k, sums[c][1] / k) if gold else (1.0, 1.0)
        cats[c] = PRF(pr, rc, f1(pr, rc))
    p_all = sum(v.precision for v in cats.values()) / len(CATEGORIES)
    r_all = sum(v.recall for v in cats.values()) / len(CATEGORIES)
    return DocumentLevelReport(cats, PRF(p_all, r_all, f1(p_all, r_all)), len(gold))


# ---------------------------------------------------------------------------
# stories


@dataclass
class StoryPredictionRecord:
    pair_id: str
    chosen: int
    conflict: tuple[int, int]
    # attributes[story][entity] = {"pre": [[label per attribute] per step], "eff": ...}
    attributes: list[dict[str, dict[str, list[list[int]]]]]

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "chosen": self.chosen,
            "conflict": list(self.conflict),
            "attributes": {"stories": self.attributes},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "StoryPredictionRecord":
        try:
            stories = obj["attributes"]["stories"]
            return cls(str(obj["pair_id"]), int(obj["chosen"]), tuple(obj["conflict"]), stories)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed story prediction: {exc}") from None


@dataclass
class StoryReport:
    accuracy: float
    consistency: float
    verifiability: float
    precondition_f1: dict[str, float]
    effect_f1: dict[str, float]
    precondition_macro: float
    effect_macro: float
    pairs: int

    def to_dict(self) -> dict:
        return asdict(self)


def macro_f1(gold: Sequence[int], pred: Sequence[int]) -> float:
    """Multi-class F1 averaged over labels seen in gold or pred (missing preds are -1, always wrong)."""
    labels = sorted({g for g in gold} | {p for p in pred if p >= 0})
    if not labels:
        return 1.0
    scores = []
    for lab in labels:
        tp = sum(1 for g, p in zip(gold, pred) if g == lab and p == lab)
        fp = sum(1 for g, p in zip(gold, pred) if g != lab and p == lab)
        fn = sum(1 for g, p in zip(gold, pred) if g == lab and p != lab)
        pr = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        scores.append(f1(pr, rc))
    return sum(scores) / len(scores)


def _check_vectors(rows: list[list[int]], attributes: Sequence[Attribute], where: str) -> None:
    for row in rows:
        if len(row) != len(attributes):
            raise ValidationError(f"{where}: {len(row)} attribute values, registry has {len(attributes)}")
        for v, attr in zip(row, attributes):
            if not 0 <= int(v) < attr.labels:
                raise ValidationError(f"{where}: label {v} out of range for attribute {attr.name!r}")


def _matches_nondefault(gold_row: Sequence[int], pred_row: Sequence[int] | None) -> bool:
    if pred_row is None:
        return all(g == 0 for g in gold_row)
    return all(g == 0 or g == p for g, p in zip(gold_row, pred_row))


def story_metrics(
    gold: Sequence[StoryPair], pred: Iterable[StoryPredictionRecord], attributes: Sequence[Attribute]
) -> StoryReport:
    by_id = {p.pair_id: p for p in pred}
    acc = cons = ver = 0
    slots = {(side, b): ([], []) for side in ("pre", "eff") for b in range(len(attributes))}
    for pair in gold:
        p = by_id.get(pair.pair_id)
        if p is None:
            raise ValidationError(f"no prediction for pair {pair.pair_id!r}")
        if len(p.attributes) != 2:
            raise ValidationError(f"{pair.pair_id}: expected attribute predictions for two stories")
        for s in (0, 1):
            for ent in pair.entities[s]:
                got = p.attributes[s].get(ent.name)
                for side, gold_rows in (("pre", ent.pre), ("eff", ent.eff)):
                    pred_rows = got[side] if got is not None else None
                    if pred_rows is not None:
                        if len(pred_rows) != len(gold_rows):
                            raise ValidationError(f"{pair.pair_id}/{ent.name}: {len(pred_rows)} steps predicted, gold has {len(gold_rows)}")
                        _check_vectors(pred_rows, attributes, f"{pair.pair_id}/{ent.name}/{side}")
                    for t, grow in enumerate(gold_rows):
                        for b in range(len(attributes)):
                            slots[(side, b)][0].append(int(grow[b]))
                            slots[(side, b)][1].append(int(pred_rows[t][b]) if pred_rows is not None else -1)
        if p.chosen != pair.plausible:
            continue
        acc += 1
        if tuple(p.conflict) != tuple(pair.conflict):
            continue
        cons += 1
        k = pair.implausible
        c1, c2 = pair.conflict
        ok = True
        for ent in pair.entities[k]:
            got = p.attributes[k].get(ent.name)
            eff = got["eff"][c1 - 1] if got is not None else None
            pre = got["pre"][c2 - 1] if got is not None else None
            if not (_matches_nondefault(ent.eff[c1 - 1], eff) and _matches_nondefault(ent.pre[c2 - 1], pre)):
                ok = False
                break
        ver += int(ok)
    n = len(gold)
    pre_f1 = {a.name: macro_f1(*slots[("pre", b)]) for b, a in enumerate(attributes)}
    eff_f1 = {a.name: macro_f1(*slots[("eff", b)]) for b, a in enumerate(attributes)}
    return StoryReport(
        _rate(acc, n),
        _rate(cons, n),
        _rate(ver, n),
        pre_f1,
        eff_f1,
        sum(pre_f1.values()) / len(pre_f1) if pre_f1 else 1.0,
        sum(eff_f1.values()) / len(eff_f1) if eff_f1 else 1.0,
        n,
    )


def gold_story_predictions(pairs: Sequence[StoryPair]) -> list[StoryPredictionRecord]:
    """Predictions that copy the gold annotations (self-evaluation)."""
    out = []
    for pair in pairs:
        stories = [{e.name: {"pre": [list(r) for r in e.pre], "eff": [list(r) for r in e.eff]} for e in pair.entities[s]} for s in (0, 1)]
        out.append(StoryPredictionRecord(pair.pair_id, pair.plausible, tuple(pair.conflict), stories))
    return out


# ---------------------------------------------------------------------------
# emission


def flatten(report: dict, prefix: str = "") -> dict[str, float]:
    rows = {}
    for k, v in report.items():
        name = f"{prefix}{k}"
        if isinstance(v, dict):
            rows.update(flatten(v, name + "."))
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            rows[name] = v
    return rows


def to_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def to_table(report: dict) -> str:
    rows = flatten(report)
    width = max((len(k) for k in rows), default=0)
    return "".join(f"{k:<{width}}  {v:.4f}\n" if isinstance(v, float) else f"{k:<{width}}  {v}\n" for k, v in rows.items())


def to_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value"])
    for k, v in flatten(report).items():
        w.writerow([k, v])
    return buf.getvalue()


def procedural_report(gold: Sequence[ProceduralExample], pred: Sequence[ProceduralExample]) -> dict:
    return {
        "sentence_level": sentence_level(gold, pred).to_dict(),
        "document_level": document_level(gold, pred).to_dict(),
    }
