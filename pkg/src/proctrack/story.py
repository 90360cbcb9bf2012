"""Story-pair plausibility with conflict detection and per-attribute state heads.

Each (story, entity) is encoded once per sentence (no step 0). The [CLS]
rows ``C`` of shape ``[n, d]`` feed:

* a conflict scorer over every sentence pair ``t < j`` (row-major order),
* a plausibility classifier on the mean row,
* one CRF (or per-step classifier) per attribute and side, on single rows.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import checkpoint, crf
from . import numerics as nx
from .encoder import Ablations, EncoderConfig, build_step_input, encode_steps, init_encoder
from .errors import NumericError, ValidationError
from .ingest import DatasetSplit, Vocab, split_sha256
from .metrics import StoryPredictionRecord
from .numerics import Tape, Tensor
from .schema import Attribute, StoryPair, pair_from_index, pair_index
from .trainer import Adam, GradAccumulator, TrainConfig, config_hash

log = logging.getLogger(__name__)

SIDES = ("pre", "eff")


def head_name(side: str, b: int) -> str:
    return f"story.{side}{b}"


@dataclass
class StoryModel:
    encoder: EncoderConfig
    ablations: Ablations
    attributes: list[Attribute]
    params: dict[str, Tensor]
    transitions: dict[str, crf.TransitionMatrix]  # keyed "story.{side}{b}.psi"
    no_crf: bool = True
    vocab: Vocab = field(init=False)

    def __post_init__(self):
        self.vocab = Vocab(self.encoder.vocab_size)
        expected = {f"{head_name(s, b)}.psi" for s in SIDES for b in range(len(self.attributes))}
        if set(self.transitions) != expected:
            raise ValidationError("transition matrices do not match the attribute registry")
        for name, tm in self.transitions.items():
            self.params[name] = tm.scores

    @classmethod
    def create(
        cls,
        pairs: Sequence[StoryPair],
        attributes: Sequence[Attribute],
        encoder: EncoderConfig = EncoderConfig(),
        ablations: Ablations = Ablations(),
        seed: int = 0,
        no_crf: bool = True,
    ) -> "StoryModel":
        rng = nx.make_rng(seed)
        params = init_encoder(encoder, rng)
        d = encoder.d
        transitions = {}
        for side in SIDES:
            for b, attr in enumerate(attributes):
                name = head_name(side, b)
                seqs = [
                    [row[b] for row in getattr(ent, side)]
                    for pair in pairs
                    for ents in pair.entities
                    for ent in ents
                ]
                labels = [str(i) for i in range(attr.labels)]
                tm = crf.init_prior(seqs, attr.labels, labels, name=f"{name}.psi")
                params[f"{name}.w_d"] = nx.uniform_param(rng, (d, d), f"{name}.w_d")
                params[f"{name}.w_a"] = nx.uniform_param(rng, (d, attr.labels), f"{name}.w_a")
                transitions[f"{name}.psi"] = tm
        params["story.w_confl"] = nx.uniform_param(rng, (2 * d,), "story.w_confl")
        params["story.w_plau"] = nx.uniform_param(rng, (d, 2), "story.w_plau")
        return cls(encoder, ablations, list(attributes), params, transitions, no_crf)

    def head(self, side: str, b: int) -> crf.CrfHead:
        name = head_name(side, b)
        return crf.CrfHead(self.params[f"{name}.w_d"], self.params[f"{name}.w_a"], self.transitions[f"{name}.psi"])

    def head_params(self, side: str, b: int) -> list[str]:
        name = head_name(side, b)
        return [f"{name}.w_d", f"{name}.w_a", f"{name}.psi"]

    def meta(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "ablations": self.ablations.to_dict(),
            "attributes": [{"name": a.name, "labels": a.labels} for a in self.attributes],
            "no_crf": self.no_crf,
        }

    def dumps(self) -> str:
        return checkpoint.dumps("story", self.meta(), self.params, self.transitions)

    def save(self, path) -> str:
        return checkpoint.write(path, self.dumps())

    @classmethod
    def from_checkpoint(cls, obj: dict) -> "StoryModel":
        if obj["task"] != "story":
            raise ValidationError(f"checkpoint is for task {obj['task']!r}, not story")
        meta = obj["meta"]
        return cls(
            EncoderConfig(**meta["encoder"]),
            Ablations(**meta["ablations"]),
            [Attribute(a["name"], a["labels"]) for a in meta["attributes"]],
            obj["params"],
            obj["transitions"],
            meta["no_crf"],
        )

    @classmethod
    def load(cls, path) -> "StoryModel":
        return cls.from_checkpoint(checkpoint.read(path))


# ---------------------------------------------------------------------------
# heads


def story_encode(model: StoryModel, sentences: list[str], entity: str) -> Tensor:
    """[CLS] rows for steps 1..n: ``[n, d]``."""
    inputs = [
        build_step_input(sentences, entity, t, model.vocab, model.encoder.m_max, model.ablations)
        for t in range(1, len(sentences) + 1)
    ]
    return encode_steps(inputs, model.params, model.encoder, model.ablations.no_t).cls


def pair_rows(n: int) -> tuple[np.ndarray, np.ndarray]:
    """0-based (t, j) index arrays for all t < j in row-major order."""
    ts, js = np.triu_indices(n, k=1)
    return ts, js


def conflict_logits(rows: Tensor, w_confl: Tensor) -> Tensor:
    n = rows.shape[0]
    if n < 2:
        raise ValidationError("conflict detection needs at least two sentences")
    ts, js = pair_rows(n)
    return nx.concat([rows[ts], rows[js]], axis=1) @ w_confl


def conflict_scores(rows: Tensor, w_confl: Tensor) -> Tensor:
    return nx.softmax(conflict_logits(rows, w_confl), axis=-1)


def plausibility_logits(rows: Tensor, w_plau: Tensor) -> Tensor:
    return nx.mean(rows, axis=0) @ w_plau


def plausibility(rows: Tensor, w_plau: Tensor) -> Tensor:
    return nx.softmax(plausibility_logits(rows, w_plau), axis=-1)


def attribute_emissions(rows: Tensor, head: crf.CrfHead) -> Tensor:
    """Single-row emissions ``[n, labels]``; step t depends only on row t."""
    return head.emissions_from_rows(rows)


def attribute_loss(model: StoryModel, rows: Tensor, labels: Sequence[int], side: str, b: int) -> Tensor:
    head = model.head(side, b)
    phi = attribute_emissions(rows, head)
    if model.no_crf:
        return crf.stepwise_nll(phi, labels)
    return crf.nll(phi, head.transitions, labels)


def entity_story_loss(model: StoryModel, pair: StoryPair, s: int, entity_index: int) -> tuple[Tensor, dict[str, Tensor]]:
    ent = pair.entities[s][entity_index]
    rows = story_encode(model, pair.stories[s], ent.name)
    y_p = int(s == pair.plausible)
    plau = nx.cross_entropy(nx.reshape(plausibility_logits(rows, model.params["story.w_plau"]), (1, 2)), [y_p])
    parts = {"plau": plau}
    total = plau
    if y_p == 0:
        target = pair_index(pair.conflict[0], pair.conflict[1], pair.n)
        logits = conflict_logits(rows, model.params["story.w_confl"])
        confl = nx.cross_entropy(nx.reshape(logits, (1, logits.shape[0])), [target])
        parts["confl"] = confl
        total = total + confl
    B = len(model.attributes)
    att = None
    for b in range(B):
        for side in SIDES:
            labels = [row[b] for row in getattr(ent, side)]
            term = attribute_loss(model, rows, labels, side, b)
            att = term if att is None else att + term
    att = nx.scale(att, 1.0 / B)
    parts["att"] = att
    return total + att, parts


def story_side_loss(model: StoryModel, pair: StoryPair, s: int) -> Tensor:
    """Loss of one story, averaged over its entities."""
    ents = pair.entities[s]
    if not ents:
        raise ValidationError(f"{pair.pair_id}: story {s} has no annotated entities")
    terms = [entity_story_loss(model, pair, s, i)[0] for i in range(len(ents))]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return nx.scale(total, 1.0 / len(ents))


def story_loss(model: StoryModel, pair: StoryPair) -> Tensor:
    """Sum of the two stories' losses (each story encoded independently)."""
    return story_side_loss(model, pair, 0) + story_side_loss(model, pair, 1)


# ---------------------------------------------------------------------------
# prediction


@dataclass
class StoryPrediction:
    plausibility: np.ndarray  # [2] probabilities
    conflict: np.ndarray  # [n(n-1)/2] probabilities
    attributes: dict[str, dict[str, list[list[int]]]]


def _decode(model: StoryModel, phi: np.ndarray, side: str, b: int) -> list[int]:
    if model.no_crf:
        return crf.stepwise_argmax(phi)
    tm = model.transitions[f"{head_name(side, b)}.psi"]
    return crf.viterbi(phi, crf.effective_scores(tm), tm.blocked)[0]


def predict_story(model: StoryModel, sentences: list[str], entities: Sequence[str]) -> StoryPrediction:
    if not entities:
        raise ValidationError("story prediction needs at least one entity")
    plau_logits, confl_logits, attrs = [], [], {}
    for name in entities:
        rows = story_encode(model, sentences, name)
        plau_logits.append(plausibility_logits(rows, model.params["story.w_plau"]).data)
        if len(sentences) >= 2:
            confl_logits.append(conflict_logits(rows, model.params["story.w_confl"]).data)
        per_side = {}
        for side in SIDES:
            cols = []
            for b in range(len(model.attributes)):
                phi = attribute_emissions(rows, model.head(side, b)).data
                nx.check_finite(phi, f"attribute emissions {side}{b}")
                cols.append(_decode(model, phi, side, b))
            per_side[side] = [list(step) for step in zip(*cols)]
        attrs[name] = per_side
    # logits averaged over entities before normalising
    plau = _softmax(np.mean(plau_logits, axis=0))
    confl = _softmax(np.mean(confl_logits, axis=0)) if confl_logits else np.ones(0)
    return StoryPrediction(plau, confl, attrs)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def decide(pair: StoryPair, preds: Sequence[StoryPrediction]) -> tuple[int, tuple[int, int]]:
    """Choose the story with the larger plausible-class probability (ties -> 0);
    the conflict pair is read from the other story."""
    chosen = 0 if preds[0].plausibility[1] >= preds[1].plausibility[1] else 1
    other = preds[1 - chosen]
    conflict = pair_from_index(int(np.argmax(other.conflict)), pair.n) if other.conflict.size else (1, 2)
    return chosen, conflict


def story_predict(model: StoryModel, pair: StoryPair) -> tuple[list[StoryPrediction], StoryPredictionRecord]:
    preds = [predict_story(model, pair.stories[s], [e.name for e in pair.entities[s]]) for s in (0, 1)]
    chosen, conflict = decide(pair, preds)
    return preds, StoryPredictionRecord(pair.pair_id, chosen, conflict, [p.attributes for p in preds])


# ---------------------------------------------------------------------------
# training


@dataclass
class StoryTrainResult:
    model: StoryModel
    manifest: dict
    history: list[dict]


def train_story(
    data: DatasetSplit,
    config: TrainConfig = TrainConfig(),
    encoder: EncoderConfig = EncoderConfig(),
    no_crf: bool = True,
    epochs: int | None = None,
    on_epoch: Callable[[int, StoryModel, dict], bool] | None = None,
) -> StoryTrainResult:
    if not data.is_story:
        raise ValidationError("story training needs a story split")
    pairs = list(data.examples)
    for pair in pairs:
        pair.validate(data.attributes)
    epochs = epochs or config.epochs
    model = StoryModel.create(pairs, data.attributes, encoder, config.ablations, config.seed, no_crf)
    trainable = dict(model.params)
    opt = Adam(trainable, config.lr, config.beta1, config.beta2, config.eps)
    acc = GradAccumulator(opt, config.grad_accum)
    rng = nx.make_rng(config.seed + 1)
    history = []
    started = time.perf_counter()
    for epoch in range(1, epochs + 1):
        total = 0.0
        for idx in rng.permutation(len(pairs)):
            pair = pairs[idx]
            with Tape() as tape:
                loss = story_loss(model, pair)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, pair {pair.pair_id}")
            grads = nx.backward(tape, loss, trainable.values())
            acc.add({k: grads[p] for k, p in trainable.items()})
            total += value
        acc.flush()
        record = {"epoch": epoch, "loss": total / len(pairs), "updates": acc.updates}
        history.append(record)
        if on_epoch is not None and on_epoch(epoch, model, record):
            break
    cfg = {"train": config.to_dict(), "encoder": encoder.to_dict(), "epochs": epochs, "no_crf": no_crf}
    manifest = {
        "stage": "story",
        "seed": config.seed,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "ablations": config.ablations.to_dict(),
        "data_hash": split_sha256(data),
        "data_stats": data.stats,
        "history": history,
        "final_metrics": history[-1] if history else {},
        "seconds": round(time.perf_counter() - started, 3),
        "parent": None,
    }
    return StoryTrainResult(model, manifest, history)
