"""Domain types for both tasks and the action/state algebra.

State sequences have n+1 entries for an n-step paragraph: ``states[t]`` is
the effect of step t and the precondition of step t+1. Actions have n
entries; ``actions[t-1]`` is the transition from ``states[t-1]`` to
``states[t]``.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Sequence

from .errors import InconsistencyError, ValidationError

log = logging.getLogger(__name__)


class Action(enum.IntEnum):
    CREATE = 0
    EXIST = 1
    MOVE = 2
    DESTROY = 3
    OUT_OF_CREATE = 4
    OUT_OF_DESTROY = 5

    @property
    def eval_label(self) -> str:
        """Label used by evaluators; the two out-of labels collapse to NONE."""
        if self in (Action.OUT_OF_CREATE, Action.OUT_OF_DESTROY):
            return "NONE"
        return self.name

    @property
    def short(self) -> str:
        return _SHORT[self]


_SHORT = {
    Action.CREATE: "C",
    Action.EXIST: "E",
    Action.MOVE: "M",
    Action.DESTROY: "D",
    Action.OUT_OF_CREATE: "OC",
    Action.OUT_OF_DESTROY: "OD",
}

NUM_ACTIONS = len(Action)


class StateTag(enum.Enum):
    NON_EXISTENCE = "none"
    UNKNOWN_LOCATION = "unknown"
    LOCATION = "loc"


@dataclass(frozen=True)
class Span:
    """A location mention. ``sent`` is 1-based; ``start``/``end`` are
    character offsets into the space-joined paragraph (-1 when unresolved)."""

    text: str
    sent: int
    start: int = -1
    end: int = -1

    @property
    def key(self) -> str:
        return normalize_location(self.text)


def normalize_location(text: str) -> str:
    return " ".join(text.casefold().split())


@dataclass(frozen=True)
class EntityState:
    tag: StateTag
    span: Span | None = None

    def __post_init__(self):
        if (self.tag is StateTag.LOCATION) != (self.span is not None):
            raise ValidationError(f"span must be present iff tag is location (tag={self.tag.value})")

    @property
    def exists(self) -> bool:
        return self.tag is not StateTag.NON_EXISTENCE

    @property
    def location_key(self) -> str:
        """'-' for non-existence, '?' for unknown, else the case-folded text."""
        if self.tag is StateTag.NON_EXISTENCE:
            return "-"
        if self.tag is StateTag.UNKNOWN_LOCATION:
            return "?"
        return self.span.key

    def same_place(self, other: "EntityState") -> bool:
        return self.location_key == other.location_key


NONE_STATE = EntityState(StateTag.NON_EXISTENCE)
UNKNOWN_STATE = EntityState(StateTag.UNKNOWN_LOCATION)


def location(text: str, sent: int = 0, start: int = -1, end: int = -1) -> EntityState:
    return EntityState(StateTag.LOCATION, Span(text, sent, start, end))


# ---------------------------------------------------------------------------
# transition table

_LEGAL = {
    Action.OUT_OF_CREATE: frozenset({Action.OUT_OF_CREATE, Action.CREATE}),
    Action.CREATE: frozenset({Action.EXIST, Action.MOVE, Action.DESTROY}),
    Action.EXIST: frozenset({Action.EXIST, Action.MOVE, Action.DESTROY}),
    Action.MOVE: frozenset({Action.EXIST, Action.MOVE, Action.DESTROY}),
    Action.DESTROY: frozenset({Action.OUT_OF_DESTROY}),
    Action.OUT_OF_DESTROY: frozenset({Action.OUT_OF_DESTROY}),
}
# An entity can start out absent or present, but cannot have been destroyed already.
LEGAL_FIRST = frozenset(Action) - {Action.OUT_OF_DESTROY}


def legal_successors(a: Action) -> frozenset[Action]:
    """Hard commonsense adjacency used by validators and test oracles."""
    return _LEGAL[Action(a)]


def _who(entity: str | None) -> str:
    return f"entity {entity!r}: " if entity else ""


def validate_actions(actions: Sequence[Action], recreation: str = "reject", entity: str | None = None) -> None:
    """Raise InconsistencyError at the first illegal adjacency.

    ``recreation`` controls OutOfDestroy -> Create: "reject" or "warn".
    """
    if recreation not in ("reject", "warn"):
        raise ValueError(f"recreation must be 'reject' or 'warn', got {recreation!r}")
    if not actions:
        return
    if Action(actions[0]) not in LEGAL_FIRST:
        raise InconsistencyError(
            f"{_who(entity)}{Action(actions[0]).name} cannot be the first action (step 1)", step=1, entity=entity, index=0
        )
    for i in range(1, len(actions)):
        prev, cur = Action(actions[i - 1]), Action(actions[i])
        if cur in _LEGAL[prev]:
            continue
        if prev is Action.OUT_OF_DESTROY and cur is Action.CREATE and recreation == "warn":
            log.warning("entity %s re-created after destruction at index %d", entity, i)
            continue
        raise InconsistencyError(
            f"{_who(entity)}illegal transition {prev.name} -> {cur.name} at index {i} (step {i + 1})",
            step=i + 1,
            entity=entity,
            index=i,
        )


def is_legal(actions: Sequence[Action], recreation: str = "reject") -> bool:
    try:
        validate_actions(actions, recreation)
    except InconsistencyError:
        return False
    return True


def state_from_span(span: Span | None) -> EntityState:
    """A missing span is the [CLS] answer: present but with no concrete location."""
    return UNKNOWN_STATE if span is None else EntityState(StateTag.LOCATION, span)


def derive_states(
    actions: Sequence[Action], spans: Sequence[Span | None], recreation: str = "reject", check: bool = True
) -> list[EntityState]:
    """Combine an action sequence with per-step decoded spans.

    ``spans[t]`` is the span decoded for step input t (None = [CLS]).
    Existence is dictated by the actions; spans only fill in where a
    present entity is. ``check=False`` skips the legality check (used when
    decoding without transition constraints).
    """
    n = len(actions)
    if len(spans) != n + 1:
        raise ValidationError(f"need {n + 1} spans for {n} actions, got {len(spans)}")
    if check:
        validate_actions(actions, recreation)
    absent_before = {Action.CREATE, Action.OUT_OF_CREATE, Action.OUT_OF_DESTROY}
    absent_after = {Action.DESTROY, Action.OUT_OF_CREATE, Action.OUT_OF_DESTROY}
    states = [NONE_STATE if n and Action(actions[0]) in absent_before else state_from_span(spans[0])]
    for t in range(1, n + 1):
        a = Action(actions[t - 1])
        states.append(NONE_STATE if a in absent_after else state_from_span(spans[t]))
    return states


def derive_actions(states: Sequence[EntityState]) -> list[Action]:
    if len(states) < 2:
        raise ValidationError("need at least two states to derive actions")
    actions = []
    destroyed = False
    for prev, cur in zip(states[:-1], states[1:]):
        if not prev.exists and not cur.exists:
            actions.append(Action.OUT_OF_DESTROY if destroyed else Action.OUT_OF_CREATE)
        elif not prev.exists:
            actions.append(Action.CREATE)
            destroyed = False
        elif not cur.exists:
            actions.append(Action.DESTROY)
            destroyed = True
        elif prev.same_place(cur):
            actions.append(Action.EXIST)
        else:
            actions.append(Action.MOVE)
    return actions


# ---------------------------------------------------------------------------
# procedural task


@dataclass(frozen=True)
class EntityTimeline:
    entity: str
    states: tuple[EntityState, ...]
    actions: tuple[Action, ...]

    def __post_init__(self):
        if len(self.states) != len(self.actions) + 1:
            raise ValidationError(
                f"entity {self.entity!r}: {len(self.states)} states for {len(self.actions)} actions"
            )
        derived = derive_actions(self.states)
        for t, (a, b) in enumerate(zip(derived, self.actions)):
            if a != b:
                raise InconsistencyError(
                    f"entity {self.entity!r}: action {Action(b).name} at step {t + 1} "
                    f"contradicts states (expected {a.name})",
                    step=t + 1,
                    entity=self.entity,
                )

    @classmethod
    def from_states(cls, entity: str, states: Sequence[EntityState]) -> "EntityTimeline":
        return cls(entity, tuple(states), tuple(derive_actions(states)))

    @classmethod
    def from_actions(cls, entity: str, actions: Sequence[Action], spans: Sequence[Span | None], recreation: str = "reject") -> "EntityTimeline":
        return cls.from_states(entity, derive_states(actions, spans, recreation))

    @property
    def n(self) -> int:
        return len(self.actions)


@dataclass
class EntityRecord:
    name: str
    timeline: EntityTimeline | None = None


@dataclass
class ProceduralExample:
    para_id: str
    sentences: list[str]
    entities: list[EntityRecord] = field(default_factory=list)
    annotated: bool = True
    pseudo: bool = False

    def __post_init__(self):
        if len(self.sentences) < 1:
            raise ValidationError(f"{self.para_id}: paragraph needs at least one sentence")
        names = [e.name for e in self.entities]
        if any(not name.strip() for name in names):
            raise ValidationError(f"{self.para_id}: empty entity name")
        if len(set(names)) != len(names):
            raise ValidationError(f"{self.para_id}: duplicate entity names")
        for e in self.entities:
            if self.annotated and e.timeline is None:
                raise ValidationError(f"{self.para_id}: annotated example lacks a timeline for {e.name!r}")
            if not self.annotated and e.timeline is not None and not self.pseudo:
                raise ValidationError(f"{self.para_id}: unannotated example carries gold for {e.name!r}")
            if e.timeline is not None and e.timeline.n != self.n:
                raise ValidationError(
                    f"{self.para_id}: timeline for {e.name!r} has {e.timeline.n} steps, paragraph has {self.n}"
                )

    @property
    def n(self) -> int:
        return len(self.sentences)

    @property
    def entity_names(self) -> list[str]:
        return [e.name for e in self.entities]

    def timeline(self, name: str) -> EntityTimeline:
        for e in self.entities:
            if e.name == name:
                if e.timeline is None:
                    raise ValidationError(f"{self.para_id}: no timeline for {name!r}")
                return e.timeline
        raise KeyError(name)

    @property
    def paragraph(self) -> str:
        return " ".join(self.sentences)

    def sentence_offsets(self) -> list[int]:
        offsets, pos = [], 0
        for s in self.sentences:
            offsets.append(pos)
            pos += len(s) + 1
        return offsets


# ---------------------------------------------------------------------------
# story task


@dataclass(frozen=True)
class Attribute:
    name: str
    labels: int

    def __post_init__(self):
        if self.labels < 2:
            raise ValidationError(f"attribute {self.name!r} needs at least 2 labels")


@dataclass
class StoryEntity:
    """Per-step attribute labels; ``pre[t][b]`` is attribute b before step t+1."""

    name: str
    pre: list[list[int]]
    eff: list[list[int]]


@dataclass
class StoryPair:
    pair_id: str
    stories: tuple[list[str], list[str]]
    plausible: int
    conflict: tuple[int, int]
    entities: tuple[list[StoryEntity], list[StoryEntity]]

    @property
    def implausible(self) -> int:
        return 1 - self.plausible

    @property
    def n(self) -> int:
        return len(self.stories[0])

    def validate(self, attributes: Sequence[Attribute]) -> None:
        pid = self.pair_id
        if self.plausible not in (0, 1):
            raise ValidationError(f"{pid}: plausible must be 0 or 1")
        a, b = self.stories
        if len(a) != len(b):
            raise ValidationError(f"{pid}: stories have different lengths ({len(a)} vs {len(b)})")
        diff = sum(x != y for x, y in zip(a, b))
        if diff != 1:
            raise ValidationError(f"{pid}: stories must differ in exactly one sentence, found {diff}")
        c1, c2 = self.conflict
        if not (1 <= c1 < c2 <= self.n):
            raise ValidationError(f"{pid}: conflict {list(self.conflict)} outside 1 <= c1 < c2 <= {self.n}")
        for s, ents in enumerate(self.entities):
            if not ents:
                raise ValidationError(f"{pid}: story {s} has no entities")
            names = [e.name for e in ents]
            if len(set(names)) != len(names):
                raise ValidationError(f"{pid}: story {s} has duplicate entities")
            for e in ents:
                for side, rows in (("pre", e.pre), ("eff", e.eff)):
                    if len(rows) != self.n:
                        raise ValidationError(f"{pid}: {e.name!r} {side} has {len(rows)} steps, story has {self.n}")
                    for t, row in enumerate(rows):
                        if len(row) != len(attributes):
                            raise ValidationError(
                                f"{pid}: {e.name!r} {side} step {t + 1} has {len(row)} values, registry has {len(attributes)}"
                            )
                        for attr, v in zip(attributes, row):
                            if not 0 <= v < attr.labels:
                                raise ValidationError(
                                    f"{pid}: {e.name!r} {side} step {t + 1} {attr.name}={v} outside [0, {attr.labels})"
                                )


def pair_index(c1: int, c2: int, n: int) -> int:
    """Flat index of the 1-based sentence pair (c1 < c2), ordered by c1 then c2."""
    if not (1 <= c1 < c2 <= n):
        raise ValidationError(f"pair ({c1}, {c2}) invalid for n={n}")
    t, j = c1 - 1, c2 - 1
    return t * (2 * n - t - 1) // 2 + (j - t - 1)


def pair_from_index(index: int, n: int) -> tuple[int, int]:
    total = n * (n - 1) // 2
    if not 0 <= index < total:
        raise ValidationError(f"pair index {index} outside [0, {total})")
    t = 0
    while index >= n - 1 - t:
        index -= n - 1 - t
        t += 1
    return t + 1, t + 2 + index


def num_pairs(n: int) -> int:
    return n * (n - 1) // 2
