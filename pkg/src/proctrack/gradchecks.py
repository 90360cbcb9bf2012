"""Finite-difference suites over small fixtures, shared by the CLI and tests."""

from __future__ import annotations

import numpy as np

from . import crf
from . import numerics as nx
from .encoder import Ablations, EncoderConfig
from .numerics import GradcheckReport, Tensor, gradcheck
from .ingest import resolve_span
from .schema import (
    NONE_STATE,
    Attribute,
    EntityRecord,
    EntityState,
    EntityTimeline,
    ProceduralExample,
    StateTag,
    StoryEntity,
    StoryPair,
)

TINY = EncoderConfig(vocab_size=64, d=8, layers=1, heads=2, ff=16, m_max=64, max_span_len=4)


def _param(rng, *shape, name=None, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True, name=name)


def numerics_suite(seed: int = 0) -> dict[str, GradcheckReport]:
    """One check per differentiable op, each reduced to a scalar by a fixed random projection."""
    rng = nx.make_rng(seed)
    a = _param(rng, 3, 4, name="a")
    b = _param(rng, 3, 4, name="b")
    row = _param(rng, 4, name="row")
    w = _param(rng, 4, 5, name="w")
    pos = Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True, name="pos")
    table = _param(rng, 6, 4, name="table")
    gain = _param(rng, 4, name="gain")
    bias = _param(rng, 4, name="bias")
    x3 = _param(rng, 2, 3, 4, name="x3")
    proj = {}

    def project(out: Tensor) -> Tensor:
        key = out.shape
        if key not in proj:
            proj[key] = rng.normal(size=key)
        return (out * proj[key]).sum()

    ids = np.array([[0, 5, 2], [3, 3, 1]])
    cases = {
        "add": (lambda: project(a + row), [a, row]),
        "sub": (lambda: project(a - b), [a, b]),
        "mul": (lambda: project(a * b), [a, b]),
        "scale": (lambda: project(nx.scale(a, -2.5)), [a]),
        "tanh": (lambda: project(nx.tanh(a)), [a]),
        "exp": (lambda: project(nx.exp(a)), [a]),
        "log": (lambda: project(nx.log(pos)), [pos]),
        "gelu": (lambda: project(nx.gelu(a)), [a]),
        "matmul": (lambda: project(a @ w), [a, w]),
        "matmul_batched": (lambda: project(x3 @ w), [x3, w]),
        "reshape": (lambda: project(nx.reshape(a, (2, 6))), [a]),
        "transpose": (lambda: project(nx.transpose(x3, (2, 0, 1))), [x3]),
        "concat": (lambda: project(nx.concat([a, b], axis=1)), [a, b]),
        "take": (lambda: project(a[np.array([2, 0, 2]), 1:3]), [a]),
        "gather": (lambda: project(nx.gather(table, ids)), [table]),
        "sum": (lambda: project(nx.sum_(x3, axis=1)), [x3]),
        "mean": (lambda: project(nx.mean(x3, axis=0)), [x3]),
        "logsumexp": (lambda: project(nx.logsumexp(a, axis=1)), [a]),
        "softmax": (lambda: project(nx.softmax(a, axis=-1)), [a]),
        "log_softmax": (lambda: project(nx.log_softmax(a, axis=0)), [a]),
        "cross_entropy": (lambda: nx.cross_entropy(a, np.array([1, 3, 0])), [a]),
        "layer_norm": (lambda: project(nx.layer_norm(x3, gain, bias)), [x3, gain, bias]),
    }
    return {name: gradcheck(f, ps) for name, (f, ps) in cases.items()}


def crf_suite(seed: int = 0) -> dict[str, GradcheckReport]:
    rng = nx.make_rng(seed)
    phi = _param(rng, 3, 4, name="phi")
    psi = _param(rng, 5, 4, name="psi")
    gold = [1, 3, 0]
    out = {"nll_free": gradcheck(lambda: crf.nll(phi, psi, gold), [phi, psi])}

    prior = crf.init_prior([[0, 1, 1], [0, 1, 2], [3, 2, 2]], 4)
    phi2 = _param(rng, 3, 4, name="phi")
    out["nll_prior"] = gradcheck(lambda: crf.nll(phi2, prior, [0, 1, 2]), [phi2, prior.scores])
    out["stepwise"] = gradcheck(lambda: crf.stepwise_nll(phi, gold), [phi])
    return out


def procedural_fixture() -> ProceduralExample:
    sentences = ["Water enters the root .", "The water moves to the leaf ."]
    root = EntityState(StateTag.LOCATION, resolve_span(sentences, "root", 1))
    leaf = EntityState(StateTag.LOCATION, resolve_span(sentences, "leaf", 2))
    water = EntityTimeline.from_states("water", [root, root, leaf])
    sugar = EntityTimeline.from_states("sugar", [NONE_STATE, NONE_STATE, leaf])
    return ProceduralExample("fixture", sentences, [EntityRecord("water", water), EntityRecord("sugar", sugar)])


def encoder_suite(seed: int = 0, max_entries: int = 6, ablations: Ablations = Ablations()) -> dict[str, GradcheckReport]:
    """Full procedural loss (location + action) w.r.t. every parameter tensor (sampled coordinates)."""
    from .trainer import GoldTargets, ProceduralModel, entity_loss

    ex = procedural_fixture()
    model = ProceduralModel.create([ex], TINY, ablations, seed)
    out = {}
    for rec in ex.entities:
        inputs = model.step_inputs(ex, rec.name)
        gold = GoldTargets.build(inputs, rec.timeline)
        names = sorted(model.params)
        params = [model.params[k] for k in names]
        out[f"procedural_loss[{rec.name}]"] = gradcheck(
            lambda: entity_loss(model, inputs, gold)[0], params, max_entries=max_entries, rng=nx.make_rng(seed), names=names
        )
    return out


STORY_FIXTURE_ATTRIBUTES = [Attribute("wetness", 3), Attribute("location", 2)]


def story_fixture() -> StoryPair:
    plausible = ["Ann dried the cup .", "Ann washed the cup ."]
    implausible = ["Ann broke the cup .", "Ann washed the cup ."]
    ent_ok = StoryEntity("cup", pre=[[1, 0], [0, 0]], eff=[[2, 0], [1, 1]])
    ent_bad = StoryEntity("cup", pre=[[0, 1], [0, 0]], eff=[[0, 0], [1, 1]])
    return StoryPair("fixture", (plausible, implausible), 0, (1, 2), ([ent_ok], [ent_bad]))


def story_suite(seed: int = 0, max_entries: int = 6) -> dict[str, GradcheckReport]:
    from .story import StoryModel, story_loss

    pair = story_fixture()
    out = {}
    for no_crf in (False, True):
        model = StoryModel.create([pair], STORY_FIXTURE_ATTRIBUTES, TINY, Ablations(), seed, no_crf=no_crf)
        names = sorted(model.params)
        params = [model.params[k] for k in names]
        label = "story_loss[stepwise]" if no_crf else "story_loss[crf]"
        out[label] = gradcheck(
            lambda: story_loss(model, pair), params, max_entries=max_entries, rng=nx.make_rng(seed), names=names
        )
    return out


SUITES = {"numerics": numerics_suite, "crf": crf_suite, "encoder": encoder_suite, "story": story_suite}


def run(modules: list[str]) -> dict:
    report = {"ok": True, "max_rel_err": 0.0, "suites": {}}
    for mod in modules:
        results = SUITES[mod]()
        report["suites"][mod] = {k: r.to_dict() for k, r in results.items()}
        for r in results.values():
            report["ok"] = report["ok"] and r.ok
            report["max_rel_err"] = max(report["max_rel_err"], r.max_rel_err)
    return report
