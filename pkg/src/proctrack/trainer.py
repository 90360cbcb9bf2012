"""Joint span + action training, decoding, and self-training augmentation."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import checkpoint, crf
from . import numerics as nx
from .encoder import (
    Ablations,
    EncoderConfig,
    StepInput,
    build_step_input,
    encode_steps,
    extract_span,
    gold_token_span,
    init_encoder,
    init_span_head,
    span_from_tokens,
    span_log_probs,
    span_probs,
)
from .errors import ConfigError, NumericError, ValidationError
from .ingest import DatasetSplit, Vocab, split_sha256
from .numerics import Tape, Tensor
from .schema import (
    NUM_ACTIONS,
    Action,
    EntityRecord,
    EntityTimeline,
    ProceduralExample,
    StateTag,
    derive_states,
)

log = logging.getLogger(__name__)

ACTION_LABELS = [a.name for a in Action]


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    augmented_epochs: int = 6
    grad_accum: int = 2
    seed: int = 0
    ablations: Ablations = Ablations()
    # "n+1" averages the location loss over its actual term count; "n" is the literal divisor
    loc_norm: str = "n+1"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    recreation: str = "reject"

    def __post_init__(self):
        if self.epochs < 1 or self.augmented_epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.grad_accum < 1:
            raise ConfigError("grad_accum must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.loc_norm not in ("n+1", "n"):
            raise ConfigError(f"loc_norm must be 'n+1' or 'n', got {self.loc_norm!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = self.ablations.to_dict()
        return d


def config_hash(obj: dict) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# model


@dataclass
class ProceduralModel:
    encoder: EncoderConfig
    ablations: Ablations
    params: dict[str, Tensor]
    transitions: crf.TransitionMatrix
    recreation: str = "reject"
    vocab: Vocab = field(init=False)

    def __post_init__(self):
        self.vocab = Vocab(self.encoder.vocab_size)
        self.params["crf.psi"] = self.transitions.scores

    @classmethod
    def create(
        cls,
        examples: Sequence[ProceduralExample],
        encoder: EncoderConfig = EncoderConfig(),
        ablations: Ablations = Ablations(),
        seed: int = 0,
        recreation: str = "reject",
    ) -> "ProceduralModel":
        """Fresh parameters; transitions prior-initialised from the examples' gold actions."""
        rng = nx.make_rng(seed)
        params = init_encoder(encoder, rng)
        params.update(init_span_head(encoder, rng))
        seqs = [[int(a) for a in rec.timeline.actions] for ex in examples for rec in ex.entities if rec.timeline]
        transitions = crf.init_prior(seqs, NUM_ACTIONS, ACTION_LABELS)
        head = crf.CrfHead.create(2 * encoder.d, encoder.d, transitions, rng)
        params.update(head.params())
        return cls(encoder, ablations, params, transitions, recreation)

    @property
    def head(self) -> crf.CrfHead:
        return crf.CrfHead(self.params["crf.w_d"], self.params["crf.w_a"], self.transitions)

    def meta(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "ablations": self.ablations.to_dict(), "recreation": self.recreation}

    def dumps(self) -> str:
        return checkpoint.dumps("procedural", self.meta(), self.params, {"crf.psi": self.transitions})

    def save(self, path) -> str:
        return checkpoint.write(path, self.dumps())

    @classmethod
    def from_checkpoint(cls, obj: dict) -> "ProceduralModel":
        if obj["task"] != "procedural":
            raise ValidationError(f"checkpoint is for task {obj['task']!r}, not procedural")
        meta = obj["meta"]
        return cls(
            EncoderConfig(**meta["encoder"]),
            Ablations(**meta["ablations"]),
            obj["params"],
            obj["transitions"]["crf.psi"],
            meta.get("recreation", "reject"),
        )

    @classmethod
    def load(cls, path) -> "ProceduralModel":
        return cls.from_checkpoint(checkpoint.read(path))

    def step_inputs(self, example: ProceduralExample, entity: str) -> list[StepInput]:
        return [
            build_step_input(example.sentences, entity, t, self.vocab, self.encoder.m_max, self.ablations)
            for t in range(example.n + 1)
        ]


# ---------------------------------------------------------------------------
# targets and loss


@dataclass
class GoldTargets:
    starts: np.ndarray  # [n+1] token index, 0 = [CLS]
    ends: np.ndarray
    actions: list[int]

    @classmethod
    def build(cls, inputs: Sequence[StepInput], timeline: EntityTimeline | None) -> "GoldTargets":
        if timeline is None:
            raise ValidationError(f"no gold timeline for entity {inputs[0].entity!r}")
        if len(inputs) != len(timeline.states):
            raise ValidationError(f"{len(inputs)} step inputs for {len(timeline.states)} states")
        pairs = [
            gold_token_span(x, s.span if s.tag is StateTag.LOCATION else None)
            for x, s in zip(inputs, timeline.states)
        ]
        return cls(
            np.array([p[0] for p in pairs], dtype=np.int64),
            np.array([p[1] for p in pairs], dtype=np.int64),
            [int(a) for a in timeline.actions],
        )


def entity_loss(
    model: ProceduralModel, inputs: Sequence[StepInput], targets: GoldTargets, loc_norm: str = "n+1"
) -> tuple[Tensor, dict[str, Tensor]]:
    """Location loss + action loss for one entity; returns (total, parts)."""
    enc = encode_steps(list(inputs), model.params, model.encoder, model.ablations.no_t)
    log_start, log_end = span_log_probs(enc, model.params)
    steps = np.arange(len(inputs))
    n = len(inputs) - 1
    denom = n + 1 if loc_norm == "n+1" else max(n, 1)
    picked = log_start[steps, targets.starts].sum() + log_end[steps, targets.ends].sum()
    loc = nx.scale(picked, -1.0 / denom)
    phi = crf.emissions(enc.cls, model.head)
    if model.ablations.no_go:
        action = crf.stepwise_nll(phi, targets.actions)
    else:
        action = crf.nll(phi, model.transitions, targets.actions)
    return loc + action, {"loc": loc, "action": action}


# ---------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with bias correction. ``step`` consumes already-accumulated gradients."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            self.params[k].data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class GradAccumulator:
    """Sums micro-batch gradients; ``flush`` applies one optimiser step to the sum."""

    def __init__(self, optimizer: Adam, every: int):
        self.optimizer = optimizer
        self.every = every
        self.pending: dict[str, np.ndarray] = {}
        self.count = 0
        self.updates = 0

    def add(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if k in self.pending:
                self.pending[k] += g
            else:
                self.pending[k] = g.copy()
        self.count += 1
        if self.count >= self.every:
            self.flush()

    def flush(self) -> None:
        if self.count:
            self.optimizer.step(self.pending)
            self.updates += 1
        self.pending = {}
        self.count = 0


# ---------------------------------------------------------------------------
# decoding


@dataclass
class EntityPrediction:
    entity: str
    actions: list[Action]  # raw decoder output
    token_spans: list[tuple[int, int]]
    timeline: EntityTimeline


def decode_actions(phi: np.ndarray, model: ProceduralModel) -> list[int]:
    if model.ablations.no_go:
        return crf.stepwise_argmax(phi)
    # looked up on the module so tests can observe the call
    path, _ = crf.viterbi(phi, crf.effective_scores(model.transitions), model.transitions.blocked)
    return path


def predict_entity(model: ProceduralModel, example: ProceduralExample, entity: str, inputs=None) -> EntityPrediction:
    inputs = inputs or model.step_inputs(example, entity)
    enc = encode_steps(inputs, model.params, model.encoder, model.ablations.no_t)
    p_start, p_end = span_probs(enc, model.params)
    token_spans, spans = [], []
    for t, x in enumerate(inputs):
        i, j, _ = extract_span(p_start[t], p_end[t], x, model.encoder.max_span_len)
        token_spans.append((i, j))
        spans.append(span_from_tokens(x, i, j))
    phi = crf.emissions(enc.cls, model.head).data
    nx.check_finite(phi, f"emissions for {example.para_id}/{entity}")
    actions = [Action(a) for a in decode_actions(phi, model)]
    # actions take precedence: existence comes from them, spans fill in locations
    states = derive_states(actions, spans, model.recreation, check=not model.ablations.no_go)
    return EntityPrediction(entity, actions, token_spans, EntityTimeline.from_states(entity, states))


def predict(model: ProceduralModel, example: ProceduralExample) -> ProceduralExample:
    records = [EntityRecord(name, predict_entity(model, example, name).timeline) for name in example.entity_names]
    return ProceduralExample(example.para_id, list(example.sentences), records, annotated=True)


def predict_split(model: ProceduralModel, split: DatasetSplit) -> DatasetSplit:
    return DatasetSplit([predict(model, ex) for ex in split.examples], split.name)


def fit_accuracy(model: ProceduralModel, examples: Sequence[ProceduralExample], cache: dict | None = None) -> dict:
    """Per-step action accuracy (raw decoder output vs gold) and span accuracy
    (decoded token span vs gold token span, [CLS] included) over all entities."""
    act_ok = act_n = span_ok = span_n = 0
    for ex in examples:
        for rec in ex.entities:
            if rec.timeline is None:
                continue
            key = (ex.para_id, rec.name)
            if cache is not None and key in cache:
                inputs, gold = cache[key]
            else:
                inputs = model.step_inputs(ex, rec.name)
                gold = GoldTargets.build(inputs, rec.timeline)
            pred = predict_entity(model, ex, rec.name, inputs)
            act_ok += sum(int(a) == g for a, g in zip(pred.actions, gold.actions))
            act_n += len(gold.actions)
            span_ok += sum((i, j) == (s, e) for (i, j), s, e in zip(pred.token_spans, gold.starts, gold.ends))
            span_n += len(pred.token_spans)
    return {
        "action_acc": act_ok / act_n if act_n else 1.0,
        "span_acc": span_ok / span_n if span_n else 1.0,
    }


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    model: ProceduralModel
    manifest: dict
    history: list[dict]


EpochCallback = Callable[[int, ProceduralModel, dict], bool]


def _training_items(model: ProceduralModel, examples: Sequence[ProceduralExample]):
    items, truncations = [], []
    for ex in examples:
        for rec in ex.entities:
            inputs = model.step_inputs(ex, rec.name)
            for x in inputs:
                if x.truncated:
                    truncations.append({"para_id": ex.para_id, "entity": rec.name, "step": x.step, "tokens_dropped": x.truncated})
            items.append((ex, rec.name, inputs, GoldTargets.build(inputs, rec.timeline)))
    return items, truncations


def train(
    data: DatasetSplit,
    config: TrainConfig = TrainConfig(),
    encoder: EncoderConfig = EncoderConfig(),
    dev: DatasetSplit | None = None,
    on_epoch: EpochCallback | None = None,
    epochs: int | None = None,
    stage: str = "gold",
    parent: dict | None = None,
) -> TrainResult:
    """Fixed-epoch training. ``on_epoch(epoch, model, record)`` may return True to stop."""
    examples = data.annotated
    if not examples:
        raise ValidationError("training split has no annotated examples")
    epochs = epochs or config.epochs
    model = ProceduralModel.create(examples, encoder, config.ablations, config.seed, config.recreation)
    items, truncations = _training_items(model, examples)
    for tr in truncations:
        log.warning("truncated %s/%s step %d (%d tokens)", tr["para_id"], tr["entity"], tr["step"], tr["tokens_dropped"])
    trainable = {k: p for k, p in model.params.items()}
    opt = Adam(trainable, config.lr, config.beta1, config.beta2, config.eps)
    acc = GradAccumulator(opt, config.grad_accum)
    rng = nx.make_rng(config.seed + 1)
    dev_cache: dict = {}
    history = []
    started = time.perf_counter()
    for epoch in range(1, epochs + 1):
        total = loc_total = act_total = 0.0
        for idx in rng.permutation(len(items)):
            ex, name, inputs, gold = items[idx]
            with Tape() as tape:
                loss, parts = entity_loss(model, inputs, gold, config.loc_norm)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, update {acc.updates + 1}, example {ex.para_id}, entity {name!r}")
            grads = nx.backward(tape, loss, trainable.values())
            acc.add({k: grads[p] for k, p in trainable.items()})
            total += value
            loc_total += parts["loc"].item()
            act_total += parts["action"].item()
        acc.flush()
        record = {
            "epoch": epoch,
            "loss": total / len(items),
            "loc_loss": loc_total / len(items),
            "action_loss": act_total / len(items),
            "updates": acc.updates,
        }
        if dev is not None and dev.annotated:
            record["dev"] = fit_accuracy(model, dev.annotated, dev_cache)
        history.append(record)
        log.info("epoch %d loss %.4f", epoch, record["loss"])
        if on_epoch is not None and on_epoch(epoch, model, record):
            break
    elapsed = time.perf_counter() - started
    manifest = build_manifest(model, config, encoder, data, history, truncations, stage, parent, epochs)
    manifest["seconds"] = round(elapsed, 3)
    return TrainResult(model, manifest, history)


def build_manifest(model, config, encoder, data, history, truncations, stage, parent, epochs) -> dict:
    cfg = {"train": config.to_dict(), "encoder": encoder.to_dict(), "epochs": epochs}
    return {
        "stage": stage,
        "seed": config.seed,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "ablations": config.ablations.to_dict(),
        "data_hash": split_sha256(data),
        "data_stats": data.stats,
        "pseudo_examples": sum(1 for ex in data.examples if ex.pseudo),
        "history": history,
        "final_metrics": history[-1] if history else {},
        "truncations": truncations,
        "checkpoint_sha256": hashlib.sha256(model.dumps().encode()).hexdigest(),
        "parent": parent,
    }


# ---------------------------------------------------------------------------
# self-training


def pseudo_label(model: ProceduralModel, pool: DatasetSplit) -> DatasetSplit:
    """Label unannotated paragraphs with the model; examples without entities are skipped."""
    out = []
    for ex in pool.examples:
        if not ex.entities:
            log.warning("pool example %s has no entity list; skipped", ex.para_id)
            continue
        records = [EntityRecord(name, predict_entity(model, ex, name).timeline) for name in ex.entity_names]
        out.append(ProceduralExample(ex.para_id, list(ex.sentences), records, annotated=False, pseudo=True))
    return DatasetSplit(out, f"{pool.name}-pseudo")


def augment(gold: DatasetSplit, pool: DatasetSplit, model: ProceduralModel) -> DatasetSplit:
    """Gold examples followed by pseudo-labelled pool examples."""
    pseudo = pseudo_label(model, pool)
    return DatasetSplit(list(gold.annotated) + pseudo.examples, f"{gold.name}+{pseudo.name}")


def retrain_config(config: TrainConfig, epochs: int | None = None) -> TrainConfig:
    """The second-run config: augmented epoch count unless explicitly overridden."""
    return replace(config, epochs=epochs if epochs is not None else config.augmented_epochs)


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def self_train(
    gold: DatasetSplit,
    pool: DatasetSplit,
    config: TrainConfig = TrainConfig(),
    encoder: EncoderConfig = EncoderConfig(),
    dev: DatasetSplit | None = None,
    retrain_epochs: int | None = None,
) -> tuple[TrainResult, DatasetSplit, TrainResult, list[dict]]:
    """Gold training, pseudo-labelling, and retraining on the mixture.

    Returns both results, the mixed split, and three linked stage manifests.
    """
    first = train(gold, config, encoder, dev, stage="gold")
    first_link = {"stage": "gold", "manifest_sha256": manifest_digest(first.manifest)}
    mixed = augment(gold, pool, first.model)
    pseudo_count = sum(1 for ex in mixed.examples if ex.pseudo)
    label_manifest = {
        "stage": "pseudo_label",
        "parent": first_link,
        "pool_hash": split_sha256(pool),
        "pool_examples": len(pool.examples),
        "pseudo_examples": pseudo_count,
        "skipped": len(pool.examples) - pseudo_count,
        "mixed_hash": split_sha256(mixed),
    }
    cfg2 = retrain_config(config, retrain_epochs)
    second = train(
        mixed,
        cfg2,
        encoder,
        dev,
        stage="retrain",
        parent={"stage": "pseudo_label", "manifest_sha256": manifest_digest(label_manifest)},
    )
    return first, mixed, second, [first.manifest, label_manifest, second.manifest]
