"""Linear-chain CRF over per-step labels with a virtual START row.

Transition scores ``psi`` have shape ``[a+1, a]``: row 0 scores the first
label, row ``u+1`` scores ``u -> v``. A path ``y`` scores
``sum_t phi[t, y_t] + psi[prev(t), y_t]`` with ``prev(0) = START``.
Transitions never seen in training data are blocked: they hold ``BLOCKED``
and receive no gradient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import BlockedPathError, NumericError, ValidationError
from .numerics import Tensor

BLOCKED = -1e4


@dataclass
class TransitionMatrix:
    scores: Tensor  # [a+1, a], trainable
    blocked: np.ndarray  # [a+1, a] bool
    counts: np.ndarray  # [a+1, a] int; row 0 counts first labels
    labels: list[str] | None = None

    @property
    def num_labels(self) -> int:
        return self.blocked.shape[1]

    def effective(self) -> Tensor:
        """Scores with blocked entries pinned to BLOCKED; blocked cells get zero gradient."""
        keep = (~self.blocked).astype(nx.DTYPE)
        return self.scores * keep + BLOCKED * self.blocked.astype(nx.DTYPE)

    def to_json(self) -> dict:
        names = self.labels or [str(i) for i in range(self.num_labels)]
        return {
            "labels": names,
            "rows": ["START"] + names,
            "scores": self.scores.data.tolist(),
            "blocked": self.blocked.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict, name: str = "crf.psi") -> "TransitionMatrix":
        scores = np.array(obj["scores"], dtype=nx.DTYPE)
        blocked = np.array(obj["blocked"], dtype=bool)
        counts = np.array(obj["counts"], dtype=np.int64)
        if scores.shape != blocked.shape or scores.shape != counts.shape or scores.shape[0] != scores.shape[1] + 1:
            raise ValidationError(f"transition matrix shapes inconsistent: {scores.shape}, {blocked.shape}, {counts.shape}")
        return cls(Tensor(scores, requires_grad=True, name=name), blocked, counts, obj.get("labels"))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def count_transitions(sequences: Sequence[Sequence[int]], num_labels: int) -> np.ndarray:
    counts = np.zeros((num_labels + 1, num_labels), dtype=np.int64)
    for seq in sequences:
        if not len(seq):
            continue
        counts[0, int(seq[0])] += 1
        for u, v in zip(seq[:-1], seq[1:]):
            counts[int(u) + 1, int(v)] += 1
    return counts


def init_prior(
    sequences: Sequence[Sequence[int]],
    num_labels: int,
    labels: list[str] | None = None,
    name: str = "crf.psi",
) -> TransitionMatrix:
    """Log relative frequencies of observed transitions; unseen ones blocked.

    Each row is normalised by the number of transitions leaving that label
    (row 0: number of sequences), so unblocked entries of a row exp-sum to 1.
    """
    counts = count_transitions(sequences, num_labels)
    if counts[1:].sum() == 0:
        raise ValidationError("corpus has no adjacent label pairs; cannot estimate transitions")
    totals = counts.sum(axis=1, keepdims=True)
    blocked = counts == 0
    with np.errstate(divide="ignore"):
        scores = np.where(blocked, BLOCKED, np.log(np.where(blocked, 1, counts) / np.maximum(totals, 1)))
    return TransitionMatrix(Tensor(scores, requires_grad=True, name=name), blocked, counts, labels)


def random_transitions(num_labels: int, rng: np.random.Generator, name: str = "crf.psi") -> TransitionMatrix:
    """Unconstrained uniform-initialised transitions (no prior, nothing blocked)."""
    shape = (num_labels + 1, num_labels)
    return TransitionMatrix(
        nx.uniform_param(rng, shape, name), np.zeros(shape, dtype=bool), np.zeros(shape, dtype=np.int64)
    )


# ---------------------------------------------------------------------------
# emission head


@dataclass
class CrfHead:
    w_d: Tensor  # [in, d]
    w_a: Tensor  # [d, a]
    transitions: TransitionMatrix

    @classmethod
    def create(cls, in_dim: int, hidden: int, transitions: TransitionMatrix, rng: np.random.Generator, prefix: str = "crf") -> "CrfHead":
        return cls(
            nx.uniform_param(rng, (in_dim, hidden), f"{prefix}.w_d"),
            nx.uniform_param(rng, (hidden, transitions.num_labels), f"{prefix}.w_a"),
            transitions,
        )

    def params(self, prefix: str = "crf") -> dict[str, Tensor]:
        return {f"{prefix}.w_d": self.w_d, f"{prefix}.w_a": self.w_a, f"{prefix}.psi": self.transitions.scores}

    def emissions_from_rows(self, rows: Tensor) -> Tensor:
        """``tanh(rows @ W_d) @ W_a`` for rows already assembled: ``[n, in] -> [n, a]``."""
        return nx.tanh(rows @ self.w_d) @ self.w_a


def pair_consecutive(cls_rows: Tensor) -> Tensor:
    """``[n+1, d] -> [n, 2d]``: row t is concat(state t, state t+1)."""
    n1 = cls_rows.shape[0]
    if n1 < 2:
        raise ValidationError("need at least two step encodings to form transitions")
    return nx.concat([cls_rows[: n1 - 1], cls_rows[1:]], axis=1)


def emissions(cls_rows: Tensor, head: CrfHead) -> Tensor:
    """Action scores from consecutive [CLS] encodings: ``[n+1, d] -> [n, a]``."""
    return head.emissions_from_rows(pair_consecutive(cls_rows))


# ---------------------------------------------------------------------------
# likelihood (tape-recorded)


def path_score(phi: Tensor, psi: Tensor, labels: Sequence[int]) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    n = phi.shape[0]
    prev = np.concatenate([[0], labels[:-1] + 1])
    return phi[np.arange(n), labels].sum() + psi[prev, labels].sum()


def log_partition(phi: Tensor, psi: Tensor) -> Tensor:
    """Forward algorithm in log space."""
    n, a = phi.shape
    alpha = phi[0] + psi[0]
    trans = psi[1:]
    for t in range(1, n):
        alpha = nx.logsumexp(nx.reshape(alpha, (a, 1)) + trans, axis=0) + phi[t]
    return nx.logsumexp(alpha, axis=0)


def nll(phi: Tensor, transitions: TransitionMatrix | Tensor, gold: Sequence[int], strict: bool = True) -> Tensor:
    """``logZ - score(gold)``.

    With ``strict`` a gold path through a blocked transition is an error;
    otherwise it proceeds with the finite sentinel.
    """
    gold = [int(g) for g in gold]
    if len(gold) != phi.shape[0]:
        raise ValidationError(f"gold length {len(gold)} != emission rows {phi.shape[0]}")
    if isinstance(transitions, TransitionMatrix):
        if strict:
            prev = [0] + [g + 1 for g in gold[:-1]]
            for t, (u, v) in enumerate(zip(prev, gold)):
                if transitions.blocked[u, v]:
                    raise BlockedPathError(f"gold path uses blocked transition at step {t + 1} (row {u} -> {v})")
        psi = transitions.effective()
    else:
        psi = transitions
    return log_partition(phi, psi) - path_score(phi, psi, gold)


def stepwise_nll(phi: Tensor, gold: Sequence[int]) -> Tensor:
    """Independent per-step cross-entropy over emission rows (summed)."""
    return nx.cross_entropy(phi, np.asarray(gold, dtype=np.int64), reduction="sum")


# ---------------------------------------------------------------------------
# inference (plain arrays)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=nx.DTYPE)


def effective_scores(transitions: TransitionMatrix) -> np.ndarray:
    return np.where(transitions.blocked, BLOCKED, transitions.scores.data)


def forward_logz(phi, psi) -> float:
    phi, psi = _arr(phi), _arr(psi)
    alpha = phi[0] + psi[0]
    for t in range(1, phi.shape[0]):
        z = alpha[:, None] + psi[1:]
        m = z.max(axis=0)
        alpha = m + np.log(np.exp(z - m).sum(axis=0)) + phi[t]
    m = alpha.max()
    return float(m + np.log(np.exp(alpha - m).sum()))


def marginals(phi, psi) -> np.ndarray:
    """Per-step label marginals ``[n, a]`` by forward-backward."""
    phi, psi = _arr(phi), _arr(psi)
    n, a = phi.shape
    trans = psi[1:]
    fwd = np.zeros((n, a))
    bwd = np.zeros((n, a))
    fwd[0] = phi[0] + psi[0]
    for t in range(1, n):
        z = fwd[t - 1][:, None] + trans
        m = z.max(axis=0)
        fwd[t] = m + np.log(np.exp(z - m).sum(axis=0)) + phi[t]
    for t in range(n - 2, -1, -1):
        z = trans + (phi[t + 1] + bwd[t + 1])[None, :]
        m = z.max(axis=1)
        bwd[t] = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    logz = forward_logz(phi, psi)
    return np.exp(fwd + bwd - logz)


def viterbi(phi, psi, blocked: np.ndarray | None = None) -> tuple[list[int], float]:
    """Highest-scoring path. Ties go to the lower label index at every backtrack step.

    If ``blocked`` is given and the best path still crosses a blocked cell,
    every path is blocked and BlockedPathError is raised.
    """
    phi, psi = _arr(phi), _arr(psi)
    if not np.all(np.isfinite(phi)):
        raise NumericError("non-finite emission scores")
    n, a = phi.shape
    delta = phi[0] + psi[0]
    back = np.zeros((n, a), dtype=np.int64)
    for t in range(1, n):
        z = delta[:, None] + psi[1:]
        back[t] = np.argmax(z, axis=0)
        delta = z[back[t], np.arange(a)] + phi[t]
    last = int(np.argmax(delta))
    path = [last]
    for t in range(n - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    path.reverse()
    score = float(delta[last])
    if blocked is not None and uses_blocked(path, blocked):
        raise BlockedPathError("every label path crosses a blocked transition")
    return path, score


def uses_blocked(path: Sequence[int], blocked: np.ndarray) -> bool:
    prev = 0
    for v in path:
        if blocked[prev, v]:
            return True
        prev = int(v) + 1
    return False


def stepwise_argmax(phi) -> list[int]:
    return [int(i) for i in np.argmax(_arr(phi), axis=1)]
