"""Entity- and timestep-aware step inputs, a small pre-norm transformer, and the span head.

Every (entity, step) pair gets its own input ``[CLS] where is {entity} [SEP]
paragraph [SEP]`` whose paragraph tokens carry a timestep id relative to the
queried step (1 past, 2 current, 3 future; 0 padding). Tokens are rows and
features are columns throughout: encodings have shape ``[m, d]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .ingest import CLS, PAD, SEP, Vocab, split_tokens
from .numerics import Tensor
from .schema import Span

TS_PAD, TS_PAST, TS_CURRENT, TS_FUTURE = 0, 1, 2, 3
# [CLS], question and separator tokens are anchored to the queried step.
TS_SPECIAL = TS_CURRENT


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 4096
    d: int = 64
    layers: int = 2
    heads: int = 4
    ff: int = 128
    m_max: int = 256
    max_span_len: int = 8

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if self.m_max < 4:
            raise ValueError("m_max too small")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Ablations:
    no_go: bool = False  # per-step classification instead of the CRF
    no_gc: bool = False  # step t sees sentences 1..t only
    no_t: bool = False  # no timestep embeddings
    no_e: bool = False  # question omits the entity name

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepInput:
    token_ids: np.ndarray
    timestep_ids: np.ndarray
    sentence_map: np.ndarray  # 1-based sentence per token, -1 for [CLS]/question/[SEP]
    char_spans: np.ndarray  # [m, 2] paragraph character offsets, -1 outside the paragraph
    step: int
    entity: str
    para_start: int
    para_end: int  # exclusive
    truncated: int = 0
    paragraph: str = field(default="", repr=False)

    @property
    def length(self) -> int:
        return len(self.token_ids)


def question_text(entity: str, no_e: bool = False) -> str:
    return "where is" if no_e else f"where is {entity}"


def build_step_input(
    sentences: list[str],
    entity: str,
    t: int,
    vocab: Vocab,
    m_max: int = 256,
    ablations: Ablations = Ablations(),
) -> StepInput:
    n = len(sentences)
    if not 0 <= t <= n:
        raise ValueError(f"step {t} outside [0, {n}]")
    q_ids = vocab.tokenize(question_text(entity, ablations.no_e))
    visible = t if ablations.no_gc else n

    ids = [CLS] + q_ids + [SEP]
    ts = [TS_SPECIAL] * len(ids)
    sent_map = [-1] * len(ids)
    chars = [(-1, -1)] * len(ids)
    para_start = len(ids)
    offset = 0
    for k, sentence in enumerate(sentences, start=1):
        if k <= visible:
            for tok, a, b in split_tokens(sentence):
                ids.append(vocab.token_id(tok))
                if t == 0 or k > t:
                    ts.append(TS_FUTURE)
                elif k < t:
                    ts.append(TS_PAST)
                else:
                    ts.append(TS_CURRENT)
                sent_map.append(k)
                chars.append((offset + a, offset + b))
        offset += len(sentence) + 1

    truncated = 0
    if len(ids) + 1 > m_max:
        keep = max(m_max - 1, para_start)
        truncated = len(ids) - keep
        ids, ts, sent_map, chars = ids[:keep], ts[:keep], sent_map[:keep], chars[:keep]
    para_end = len(ids)
    ids.append(SEP)
    ts.append(TS_SPECIAL)
    sent_map.append(-1)
    chars.append((-1, -1))
    return StepInput(
        token_ids=np.array(ids, dtype=np.int64),
        timestep_ids=np.array(ts, dtype=np.int64),
        sentence_map=np.array(sent_map, dtype=np.int64),
        char_spans=np.array(chars, dtype=np.int64).reshape(-1, 2),
        step=t,
        entity=entity,
        para_start=para_start,
        para_end=para_end,
        truncated=truncated,
        paragraph=" ".join(sentences),
    )


def pad_batch(inputs: list[StepInput]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack step inputs to ``[S, m]`` ids, timestep ids and a real-token mask."""
    m = max(x.length for x in inputs)
    ids = np.full((len(inputs), m), PAD, dtype=np.int64)
    ts = np.full((len(inputs), m), TS_PAD, dtype=np.int64)
    mask = np.zeros((len(inputs), m), dtype=bool)
    for i, x in enumerate(inputs):
        ids[i, : x.length] = x.token_ids
        ts[i, : x.length] = x.timestep_ids
        mask[i, : x.length] = True
    return ids, ts, mask


# ---------------------------------------------------------------------------
# parameters


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc") -> dict[str, Tensor]:
    d, f = cfg.d, cfg.ff
    p: dict[str, Tensor] = {}

    def add(name, shape):
        p[f"{prefix}.{name}"] = nx.uniform_param(rng, shape, f"{prefix}.{name}")

    def add_const(name, value, shape):
        p[f"{prefix}.{name}"] = Tensor(np.full(shape, value, dtype=nx.DTYPE), requires_grad=True, name=f"{prefix}.{name}")

    add("tok", (cfg.vocab_size, d))
    add("pos", (cfg.m_max, d))
    add("timestep", (4, d))
    for layer in range(cfg.layers):
        b = f"block{layer}"
        add_const(f"{b}.ln1.g", 1.0, (d,))
        add_const(f"{b}.ln1.b", 0.0, (d,))
        for w in ("q", "k", "v", "o"):
            add(f"{b}.w{w}", (d, d))
            add_const(f"{b}.b{w}", 0.0, (d,))
        add_const(f"{b}.ln2.g", 1.0, (d,))
        add_const(f"{b}.ln2.b", 0.0, (d,))
        add(f"{b}.w1", (d, f))
        add_const(f"{b}.b1", 0.0, (f,))
        add(f"{b}.w2", (f, d))
        add_const(f"{b}.b2", 0.0, (d,))
    add_const("lnf.g", 1.0, (d,))
    add_const("lnf.b", 0.0, (d,))
    return p


def init_span_head(cfg: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    return {
        "span.w_start": nx.uniform_param(rng, (cfg.d,), "span.w_start"),
        "span.w_end": nx.uniform_param(rng, (cfg.d,), "span.w_end"),
    }


# ---------------------------------------------------------------------------
# forward


@dataclass
class EncodedSteps:
    tokens: Tensor  # [S, m, d]
    mask: np.ndarray  # [S, m] real tokens
    inputs: list[StepInput]
    attention: list[np.ndarray] | None = None

    @property
    def cls(self) -> Tensor:
        """Stacked [CLS] rows, one per step: ``[S, d]``."""
        return self.tokens[:, 0, :]


def _attention(x: Tensor, p: dict, b: str, cfg: EncoderConfig, key_mask: np.ndarray, keep: list | None) -> Tensor:
    S, m, d = x.shape
    H = cfg.heads
    dh = d // H

    def heads(t: Tensor) -> Tensor:
        return nx.transpose(nx.reshape(t, (S, m, H, dh)), (0, 2, 1, 3))

    q = heads(x @ p[f"{b}.wq"] + p[f"{b}.bq"])
    k = heads(x @ p[f"{b}.wk"] + p[f"{b}.bk"])
    v = heads(x @ p[f"{b}.wv"] + p[f"{b}.bv"])
    scores = nx.scale(q @ nx.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    bias = np.where(key_mask, 0.0, nx.MASK_VALUE)[:, None, None, :]
    probs = nx.softmax(scores + bias, axis=-1)
    if keep is not None:
        keep.append(probs.data)
    ctx = nx.reshape(nx.transpose(probs @ v, (0, 2, 1, 3)), (S, m, d))
    return ctx @ p[f"{b}.wo"] + p[f"{b}.bo"]


def encode(
    inputs: list[StepInput],
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    no_t: bool = False,
    prefix: str = "enc",
    keep_attention: bool = False,
) -> EncodedSteps:
    """Run the encoder over a batch of step inputs (padded to a common length)."""
    ids, ts, mask = pad_batch(inputs)
    S, m = ids.shape
    if m > cfg.m_max:
        raise ValueError(f"input length {m} exceeds m_max={cfg.m_max}")
    p = {k[len(prefix) + 1 :]: v for k, v in params.items() if k.startswith(prefix + ".")}
    x = nx.gather(p["tok"], ids) + nx.gather(p["pos"], np.arange(m))
    if not no_t:
        x = x + nx.gather(p["timestep"], ts)
    keep = [] if keep_attention else None
    for layer in range(cfg.layers):
        b = f"block{layer}"
        h = nx.layer_norm(x, p[f"{b}.ln1.g"], p[f"{b}.ln1.b"])
        x = x + _attention(h, p, b, cfg, mask, keep)
        h = nx.layer_norm(x, p[f"{b}.ln2.g"], p[f"{b}.ln2.b"])
        x = x + (nx.gelu(h @ p[f"{b}.w1"] + p[f"{b}.b1"]) @ p[f"{b}.w2"] + p[f"{b}.b2"])
    x = nx.layer_norm(x, p["lnf.g"], p["lnf.b"])
    return EncodedSteps(x, mask, inputs, keep)


def encode_steps(
    inputs: list[StepInput],
    params: dict[str, Tensor],
    cfg: EncoderConfig,
    no_t: bool = False,
    prefix: str = "enc",
) -> EncodedSteps:
    """Encode each step on its own when lengths differ, so no step's result
    depends on another step's padding; otherwise batch them."""
    if len({x.length for x in inputs}) == 1:
        return encode(inputs, params, cfg, no_t, prefix)
    parts = [encode([x], params, cfg, no_t, prefix) for x in inputs]
    m = max(x.length for x in inputs)
    rows = []
    for part in parts:
        tok = part.tokens
        short = m - tok.shape[1]
        if short:
            tok = nx.concat([tok, Tensor(np.zeros((1, short, cfg.d)))], axis=1)
        rows.append(tok)
    _, _, mask = pad_batch(inputs)
    return EncodedSteps(nx.concat(rows, axis=0), mask, inputs)


# ---------------------------------------------------------------------------
# span head


def span_log_probs(enc: EncodedSteps, params: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Log P_Start and log P_End over real tokens, each ``[S, m]``."""
    bias = np.where(enc.mask, 0.0, nx.MASK_VALUE)
    start = nx.log_softmax(enc.tokens @ params["span.w_start"] + bias, axis=-1)
    end = nx.log_softmax(enc.tokens @ params["span.w_end"] + bias, axis=-1)
    return start, end


def span_probs(enc: EncodedSteps, params: dict[str, Tensor]) -> tuple[np.ndarray, np.ndarray]:
    bias = np.where(enc.mask, 0.0, nx.MASK_VALUE)
    start = nx.softmax(enc.tokens @ params["span.w_start"] + bias, axis=-1)
    end = nx.softmax(enc.tokens @ params["span.w_end"] + bias, axis=-1)
    return start.data, end.data


def valid_span_mask(
    m: int, para_start: int, para_end: int, max_span_len: int, sentence_map: np.ndarray | None = None
) -> np.ndarray:
    """``[m, m]`` mask of decodable (start, end) pairs: the [CLS]x[CLS] pair
    or start <= end inside the paragraph with end - start < max_span_len.
    With ``sentence_map``, both ends must also fall in the same sentence."""
    i = np.arange(m)[:, None]
    j = np.arange(m)[None, :]
    inside = (i >= para_start) & (j < para_end) & (i <= j) & (j - i < max_span_len)
    if sentence_map is not None:
        sm = np.asarray(sentence_map[:m])
        inside &= sm[:, None] == sm[None, :]
    valid = inside.copy()
    valid[0, 0] = True
    return valid


def extract_span(p_start: np.ndarray, p_end: np.ndarray, x: StepInput, max_span_len: int) -> tuple[int, int, float]:
    """Best valid (start, end) by P_Start[i] * P_End[j].

    Spans never cross a sentence boundary. Ties resolve to the lowest start,
    then the lowest end. (0, 0) is the [CLS] answer: no concrete location.
    """
    m = x.length
    scores = np.outer(p_start[:m], p_end[:m])
    valid = valid_span_mask(m, x.para_start, x.para_end, max_span_len, x.sentence_map)
    scores = np.where(valid, scores, -1.0)
    flat = int(np.argmax(scores))
    i, j = divmod(flat, m)
    return i, j, float(scores[i, j])


def span_from_tokens(x: StepInput, i: int, j: int) -> Span | None:
    if i == 0 and j == 0:
        return None
    a, b = int(x.char_spans[i, 0]), int(x.char_spans[j, 1])
    return Span(x.paragraph[a:b], int(x.sentence_map[i]), a, b)


def gold_token_span(x: StepInput, span: Span | None) -> tuple[int, int]:
    """Token indices covering ``span``; the [CLS] pair if absent or not visible."""
    if span is None:
        return 0, 0
    starts, ends = x.char_spans[:, 0], x.char_spans[:, 1]
    inside = np.nonzero((starts >= span.start) & (ends <= span.end) & (starts >= 0))[0]
    if len(inside) == 0:
        return 0, 0
    return int(inside[0]), int(inside[-1])
