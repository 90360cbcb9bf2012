"""Template-generated desk-scale corpora for both tasks.

Procedural paragraphs narrate create/move/destroy events for a few entities;
each sentence is one step. Story pairs differ in one sentence whose effect
contradicts a later sentence's precondition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import DatasetSplit, resolve_span
from .numerics import make_rng
from .schema import (
    NONE_STATE,
    UNKNOWN_STATE,
    Attribute,
    EntityRecord,
    EntityState,
    EntityTimeline,
    ProceduralExample,
    StateTag,
    StoryEntity,
    StoryPair,
)

# Paragraph counts of the original benchmark splits, for paper-shaped corpora.
PAPER_SPLIT_SIZES = {"train": 391, "dev": 43, "test": 54, "pool": 871}

ENTITIES = [
    "water", "sugar", "oxygen", "carbon dioxide", "seed", "rock", "sediment", "magma",
    "ice", "vapor", "gas", "energy", "starch", "mineral", "spore", "egg", "larva", "ash",
    "salt", "pollen",
]
LOCATIONS = [
    "soil", "root", "leaf", "stem", "air", "cloud", "river", "ocean", "cell", "tank",
    "pipe", "furnace", "lung", "blood", "valley", "crater", "nest", "mold",
]
FILLERS = ["nothing else happens .", "time passes .", "the process continues .", "everything waits ."]


@dataclass
class _Event:
    step: int
    kind: str  # create / move / destroy
    src: str | None
    dst: str | None


def _plan_entity(rng: np.random.Generator, n: int, locs: list[str]) -> tuple[list[_Event], str | None]:
    """Pick a lifecycle; returns events and the initial location ('?' unknown, None absent)."""
    pattern = rng.choice(["input", "output", "mover", "transient"]) if n >= 2 else rng.choice(["input", "output", "mover"])
    steps = sorted(rng.choice(np.arange(1, n + 1), size=min(n, 3), replace=False).tolist())

    def loc() -> str:
        return locs.pop() if rng.random() > 0.15 else "?"

    events = []
    if pattern == "input":
        start = locs.pop()
        here = start
        if len(steps) >= 2 and rng.random() < 0.5:
            dst = loc()
            events.append(_Event(steps[0], "move", here, dst))
            here = dst
            steps = steps[1:]
        events.append(_Event(steps[-1], "destroy", here, None))
        return events, start
    if pattern == "mover":
        start = locs.pop()
        here = start
        for s in steps[: 1 + int(rng.random() < 0.4)]:
            dst = locs.pop()
            events.append(_Event(s, "move", here, dst))
            here = dst
        return events, start
    here = loc()
    events.append(_Event(steps[0], "create", None, here))
    if pattern == "transient":
        events.append(_Event(steps[-1], "destroy", here, None))
    elif len(steps) >= 2 and rng.random() < 0.5:
        events.append(_Event(steps[1], "move", here, locs.pop()))
    return events, None


def _clause(entity: str, ev: _Event) -> str:
    if ev.kind == "create":
        return f"the {entity} is produced" if ev.dst == "?" else f"the {entity} forms in the {ev.dst}"
    if ev.kind == "move":
        if ev.src == "?":
            return f"the {entity} moves to the {ev.dst}"
        return f"the {entity} moves from the {ev.src} to the {ev.dst}"
    return f"the {entity} is used up" if ev.src == "?" else f"the {entity} in the {ev.src} is used up"


def _sentence(clauses: list[str], rng: np.random.Generator) -> str:
    if not clauses:
        return FILLERS[int(rng.integers(len(FILLERS)))].capitalize()
    text = " and ".join(clauses) + " ."
    return text[0].upper() + text[1:]


def make_paragraph(rng: np.random.Generator, para_id: str, n: int, k: int, annotated: bool = True) -> ProceduralExample:
    names = [str(x) for x in rng.choice(ENTITIES, size=k, replace=False)]
    locs = [str(x) for x in rng.permutation(LOCATIONS)]
    plans = [_plan_entity(rng, n, locs) for _ in names]
    order = rng.permutation(k)
    sentences = []
    for t in range(1, n + 1):
        clauses = [_clause(names[i], ev) for i in order for ev in plans[i][0] if ev.step == t]
        sentences.append(_sentence(clauses, rng))

    records = []
    for name, (events, start) in zip(names, plans):
        # first sentence where this entity's clause mentions each location
        mention: dict[str, int] = {}
        for ev in sorted(events, key=lambda e: e.step):
            for place in (ev.src, ev.dst):
                if place and place != "?" and place not in mention:
                    mention[place] = ev.step

        def state_at(place: str | None) -> EntityState:
            if place is None:
                return NONE_STATE
            if place == "?":
                return UNKNOWN_STATE
            return EntityState(StateTag.LOCATION, resolve_span(sentences, place, mention[place]))

        here = start
        states = [state_at(here)]
        by_step = {ev.step: ev for ev in events}
        for t in range(1, n + 1):
            ev = by_step.get(t)
            if ev is not None:
                here = ev.dst if ev.kind != "destroy" else None
            states.append(state_at(here))
        timeline = EntityTimeline.from_states(name, states)
        records.append(EntityRecord(name, timeline if annotated else None))
    return ProceduralExample(para_id, sentences, records, annotated=annotated)


def synthesize(
    paragraphs: int = 8,
    seed: int = 0,
    sentences: tuple[int, int] = (3, 5),
    entities: tuple[int, int] = (2, 3),
    pool: int = 0,
    prefix: str = "syn",
) -> tuple[DatasetSplit, DatasetSplit]:
    """Annotated split plus an unannotated pool (entity names only)."""
    rng = make_rng(seed)
    gold, unlabeled = [], []
    for i in range(paragraphs + pool):
        n = int(rng.integers(sentences[0], sentences[1] + 1))
        k = int(rng.integers(entities[0], entities[1] + 1))
        is_gold = i < paragraphs
        ex = make_paragraph(rng, f"{prefix}-{'g' if is_gold else 'u'}{i:04d}", n, k, annotated=is_gold)
        (gold if is_gold else unlabeled).append(ex)
    return DatasetSplit(gold, "train"), DatasetSplit(unlabeled, "pool")


# ---------------------------------------------------------------------------
# stories

STORY_ATTRIBUTES = [Attribute("wetness", 3), Attribute("integrity", 3), Attribute("location", 4)]
OBJECTS = ["cup", "shirt", "book", "phone", "towel", "plate", "notebook", "pen", "umbrella", "bag"]
AGENTS = ["ann", "john", "mary", "tom"]

# verb -> (attribute index, precondition label, effect label); 0 = irrelevant
VERBS = {
    "washed": (0, 0, 1),
    "dried": (0, 1, 2),
    "broke": (1, 1, 2),
    "used": (1, 1, 0),
    "picked up": (2, 0, 1),
    "put down": (2, 1, 2),
    "threw away": (2, 0, 3),
    "looked at": (None, 0, 0),
}
# (breaking verb, verb whose precondition it violates)
CONFLICTS = [("broke", "used"), ("dried", "dried"), ("threw away", "put down")]


def _story_entity(name: str, acts: list[tuple[str, str]], n_attr: int) -> StoryEntity:
    pre = [[0] * n_attr for _ in acts]
    eff = [[0] * n_attr for _ in acts]
    for t, (verb, obj) in enumerate(acts):
        if obj != name:
            continue
        attr, p, e = VERBS[verb]
        if attr is not None:
            pre[t][attr] = p
            eff[t][attr] = e
    return StoryEntity(name, pre, eff)


def make_story_pair(rng: np.random.Generator, pair_id: str, n: int) -> StoryPair:
    agent = str(rng.choice(AGENTS))
    objs = [str(x) for x in rng.choice(OBJECTS, size=2, replace=False)]
    c1 = int(rng.integers(1, n))
    c2 = int(rng.integers(c1 + 1, n + 1))
    breaker, victim = CONFLICTS[int(rng.integers(len(CONFLICTS)))]
    target = objs[0]
    benign = [v for v in VERBS if v not in (breaker, victim)]
    acts = []
    for t in range(1, n + 1):
        if t == c2:
            acts.append((victim, target))
        else:
            acts.append((str(rng.choice(benign)), objs[1] if t != c1 else target))
    plausible_acts = list(acts)
    plausible_acts[c1 - 1] = ("looked at", target)
    implausible_acts = list(acts)
    implausible_acts[c1 - 1] = (breaker, target)
    stories, ents = [], []
    for variant in (plausible_acts, implausible_acts):
        stories.append([f"{agent.capitalize()} {verb} the {obj} ." for verb, obj in variant])
        ents.append([_story_entity(o, variant, len(STORY_ATTRIBUTES)) for o in objs])
    plausible = int(rng.integers(2))
    if plausible == 1:
        stories.reverse()
        ents.reverse()
    return StoryPair(pair_id, (stories[0], stories[1]), plausible, (c1, c2), (ents[0], ents[1]))


def synthesize_stories(pairs: int = 8, seed: int = 0, sentences: tuple[int, int] = (4, 5)) -> DatasetSplit:
    rng = make_rng(seed)
    out = []
    for i in range(pairs):
        n = int(rng.integers(sentences[0], sentences[1] + 1))
        pair = make_story_pair(rng, f"story-{i:04d}", n)
        pair.validate(STORY_ATTRIBUTES)
        out.append(pair)
    return DatasetSplit(out, "train", list(STORY_ATTRIBUTES))
