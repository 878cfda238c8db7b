"""Exact inference over linear-chain CRF lattices.

A lattice holds per-token emission scores and transition scores; the score of
a labeling is the sum of the log potentials along its path, and all quantities
(partition function, sequence probabilities, Viterbi and k-best decoding,
forward/backward scores, token marginals, gradients) are computed in log-space
with the log-sum-exp trick.

Transitions are normally a single ``(V+1, V)`` matrix shared across positions
(row ``V`` is the start symbol, used only when entering position 0).  A lattice
may instead carry an ``(n, V+1, V)`` stack of per-position transition scores;
this is required to represent an arbitrary table of pairwise potentials, which
is generally not factorizable into shared transitions plus emissions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "Tagset",
    "Lattice",
    "ScoredSequence",
    "KBestList",
    "LatticeGrad",
    "log_potential",
    "log_partition",
    "sequence_log_prob",
    "sequence_score",
    "viterbi",
    "kbest_viterbi",
    "forward_scores",
    "backward_scores",
    "posteriors",
    "pairwise_marginals",
    "nll_and_grad",
    "weighted_log_marginal_grad",
    "from_potential_tables",
]


@dataclass(frozen=True)
class Tagset:
    """An ordered label inventory plus the distinguished start symbol.

    The start symbol is not a predictable label; its index is ``len(labels)``
    and is only valid as the *previous* label when entering position 0.
    """

    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.labels) == 0:
            raise ValueError("tagset must contain at least one label")
        if any(not lab for lab in self.labels):
            raise ValueError("label names must be non-empty")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("label names must be unique")
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def start_id(self) -> int:
        return len(self.labels)

    def index(self, label: str) -> int:
        return self.labels.index(label)


def _as_scores(a, name: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} must be finite")
    return a


@dataclass(frozen=True)
class Lattice:
    """Per-sentence emission scores plus transition scores, all logarithmic.

    ``emissions`` is ``(n, V)``; ``transitions`` is either a shared ``(V+1, V)``
    matrix or an ``(n, V+1, V)`` per-position stack.  The pair potential is
    ``exp(emissions[i, y] + transitions[y', y])`` and is never materialized in
    exponentiated form.
    """

    emissions: np.ndarray
    transitions: np.ndarray

    def __post_init__(self):
        em = _as_scores(self.emissions, "emissions")
        tr = _as_scores(self.transitions, "transitions")
        if em.ndim != 2 or em.shape[0] < 1:
            raise ValueError("emissions must be (n, V) with n >= 1")
        n, v = em.shape
        if tr.ndim == 2:
            if tr.shape != (v + 1, v):
                raise ValueError(f"shared transitions must be ({v + 1}, {v})")
        elif tr.ndim == 3:
            if tr.shape != (n, v + 1, v):
                raise ValueError(f"per-position transitions must be ({n}, {v + 1}, {v})")
        else:
            raise ValueError("transitions must have 2 or 3 dimensions")
        object.__setattr__(self, "emissions", em)
        object.__setattr__(self, "transitions", tr)

    @property
    def n(self) -> int:
        return self.emissions.shape[0]

    @property
    def num_labels(self) -> int:
        return self.emissions.shape[1]

    @property
    def shared_transitions(self) -> bool:
        return self.transitions.ndim == 2


class ScoredSequence(NamedTuple):
    labels: tuple[int, ...]
    log_joint_score: float
    normalized_weight: float


@dataclass(frozen=True)
class KBestList:
    """Distinct label sequences in non-increasing score order.

    ``normalized_weight`` renormalizes the sequence probabilities over the
    list, so the weights always sum to one.
    """

    sequences: tuple[ScoredSequence, ...]

    def __len__(self) -> int:
        return len(self.sequences)

    def __iter__(self):
        return iter(self.sequences)

    def weights(self) -> np.ndarray:
        return np.array([s.normalized_weight for s in self.sequences])


@dataclass(frozen=True)
class LatticeGrad:
    """Gradient of a scalar loss w.r.t. a lattice's scores.

    ``transitions`` matches the shape of the lattice's transition array
    (shared matrix or per-position stack).
    """

    emissions: np.ndarray
    transitions: np.ndarray

    def __add__(self, other: "LatticeGrad") -> "LatticeGrad":
        return LatticeGrad(self.emissions + other.emissions,
                           self.transitions + other.transitions)

    def scaled(self, c: float) -> "LatticeGrad":
        return LatticeGrad(c * self.emissions, c * self.transitions)


def zero_grad(lattice: Lattice) -> LatticeGrad:
    return LatticeGrad(np.zeros_like(lattice.emissions),
                       np.zeros_like(lattice.transitions))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.sum(np.exp(a - m), axis=axis))
    return out


def _pair_scores(lattice: Lattice) -> np.ndarray:
    """Log pair potentials M[i, prev, cur], shape (n, V+1, V)."""
    if lattice.shared_transitions:
        return lattice.emissions[:, None, :] + lattice.transitions[None, :, :]
    return lattice.emissions[:, None, :] + lattice.transitions


def from_potential_tables(tables: Sequence, start_row: Sequence) -> Lattice:
    """Build a lattice from explicit raw (non-log) pair potentials.

    ``start_row`` holds psi(start, y) for position 0 (length V); ``tables`` is
    one VxV matrix per position 1..n-1 with psi(prev, cur).  Potentials must be
    strictly positive; they are stored as per-position log transition scores
    with all emissions zero.
    """
    start = np.asarray(start_row, dtype=np.float64)
    if start.ndim != 1:
        raise ValueError("start_row must be a vector of potentials")
    v = start.shape[0]
    mats = [np.asarray(t, dtype=np.float64) for t in tables]
    n = len(mats) + 1
    for t in mats:
        if t.shape != (v, v):
            raise ValueError("each pair table must be VxV")
    stacked = np.zeros((n, v + 1, v))
    if np.any(start <= 0) or any(np.any(t <= 0) for t in mats):
        raise ValueError("raw potentials must be strictly positive")
    stacked[0, v, :] = np.log(start)
    for i, t in enumerate(mats):
        stacked[i + 1, :v, :] = np.log(t)
    return Lattice(emissions=np.zeros((n, v)), transitions=stacked)


def _check_sequence(lattice: Lattice, y: Sequence[int]) -> np.ndarray:
    y = np.asarray(y, dtype=np.intp)
    if y.ndim != 1 or y.shape[0] != lattice.n:
        raise ValueError(f"label sequence length {y.shape} does not match lattice length {lattice.n}")
    if np.any(y < 0) or np.any(y >= lattice.num_labels):
        raise ValueError("label index out of range")
    return y


def log_potential(lattice: Lattice, prev: int, cur: int, pos: int) -> float:
    """Log of psi(prev, cur, r_pos); ``prev`` may be the start id at pos 0 only."""
    n, v = lattice.n, lattice.num_labels
    if not 0 <= pos < n:
        raise IndexError(f"position {pos} out of range for lattice of length {n}")
    if not 0 <= cur < v:
        raise IndexError(f"label {cur} out of range")
    if prev == v:
        if pos != 0:
            raise ValueError("start symbol is only legal as the predecessor of position 0")
    elif not 0 <= prev < v:
        raise IndexError(f"previous label {prev} out of range")
    trans = lattice.transitions if lattice.shared_transitions else lattice.transitions[pos]
    return float(lattice.emissions[pos, cur] + trans[prev, cur])


def forward_scores(lattice: Lattice) -> np.ndarray:
    """Log alpha(y_k): sum over prefix paths, including the potential at k."""
    m = _pair_scores(lattice)
    n, v = lattice.n, lattice.num_labels
    la = np.empty((n, v))
    la[0] = m[0, v, :]
    for i in range(1, n):
        la[i] = _logsumexp(la[i - 1][:, None] + m[i, :v, :], axis=0)
    return la


def backward_scores(lattice: Lattice) -> np.ndarray:
    """Log beta(y_k): sum over suffix paths starting at k+1; beta(y_n) = 1."""
    m = _pair_scores(lattice)
    n, v = lattice.n, lattice.num_labels
    lb = np.empty((n, v))
    lb[n - 1] = 0.0
    for i in range(n - 2, -1, -1):
        lb[i] = _logsumexp(m[i + 1, :v, :] + lb[i + 1][None, :], axis=1)
    return lb


def log_partition(lattice: Lattice) -> float:
    la = forward_scores(lattice)
    return float(_logsumexp(la[-1], axis=0))


def sequence_score(lattice: Lattice, y: Sequence[int]) -> float:
    """Unnormalized log score: sum of log potentials along the path."""
    y = _check_sequence(lattice, y)
    m = _pair_scores(lattice)
    v = lattice.num_labels
    total = m[0, v, y[0]]
    for i in range(1, lattice.n):
        total += m[i, y[i - 1], y[i]]
    return float(total)


def sequence_log_prob(lattice: Lattice, y: Sequence[int]) -> float:
    return sequence_score(lattice, y) - log_partition(lattice)


def posteriors(lattice: Lattice) -> np.ndarray:
    """Token marginals q(y_k | x) = alpha * beta / Z, one stochastic row per token."""
    la = forward_scores(lattice)
    lb = backward_scores(lattice)
    logz = _logsumexp(la[-1], axis=0)
    q = np.exp(la + lb - logz)
    return q


def viterbi(lattice: Lattice) -> list[int]:
    """Highest-probability labeling.

    Score ties are broken toward the lower label index at the latest position
    where the tied paths differ (np.argmax picks the first maximum, which
    realizes exactly that rule under the left-to-right recursion).
    """
    m = _pair_scores(lattice)
    n, v = lattice.n, lattice.num_labels
    score = m[0, v, :].copy()
    back = np.empty((n, v), dtype=np.intp)
    for i in range(1, n):
        cand = score[:, None] + m[i, :v, :]
        back[i] = np.argmax(cand, axis=0)
        score = cand[back[i], np.arange(v)]
    best = int(np.argmax(score))
    path = [best]
    for i in range(n - 1, 0, -1):
        best = int(back[i, best])
        path.append(best)
    path.reverse()
    return path


def kbest_viterbi(lattice: Lattice, k: int) -> KBestList:
    """The min(k, V^n) best distinct labelings with renormalized weights.

    Per-state candidate lists are merged with a stable sort on descending
    score; candidates are enumerated in (previous label, previous rank) order,
    so equal scores fall back to the same tie-break rule as :func:`viterbi`.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n, v = lattice.n, lattice.num_labels
    total = v ** n if n * np.log2(v) < 62 else None
    k_eff = k if total is None else min(k, total)
    m = _pair_scores(lattice)

    # scores[i]: (V, K_i); back[i]: (V, K_i) flat index prev_label * K_{i-1} + prev_rank
    scores = [m[0, v, :][:, None]]
    back: list[np.ndarray | None] = [None]
    for i in range(1, n):
        prev = scores[i - 1]                       # (V, K_prev)
        k_prev = prev.shape[1]
        cand = prev[:, :, None] + m[i, :v, None, :]  # (V_prev, K_prev, V_cur)
        flat = cand.reshape(v * k_prev, v)           # row index = p * K_prev + r
        order = np.argsort(-flat, axis=0, kind="stable")[: k_eff]  # (K_i, V_cur)
        scores.append(np.take_along_axis(flat, order, axis=0).T)
        back.append(order.T)                         # (V_cur, K_i)

    final = scores[-1]                               # (V, K_last)
    k_last = final.shape[1]
    flat = final.reshape(-1)                         # index = y * K_last + r
    order = np.argsort(-flat, kind="stable")[: k_eff]

    paths = np.empty((order.shape[0], n), dtype=np.intp)
    paths[:, n - 1] = order // k_last
    ranks = order % k_last
    for i in range(n - 1, 0, -1):
        ptr = back[i][paths[:, i], ranks]
        k_prev = scores[i - 1].shape[1]
        paths[:, i - 1] = ptr // k_prev
        ranks = ptr % k_prev
    path_scores = flat[order]

    log_norm = _logsumexp(path_scores, axis=0)
    weights = np.exp(path_scores - log_norm)
    weights = weights / weights.sum()
    seqs = tuple(
        ScoredSequence(tuple(int(t) for t in paths[j]), float(path_scores[j]), float(weights[j]))
        for j in range(order.shape[0])
    )
    return KBestList(seqs)


def pairwise_marginals(lattice: Lattice) -> np.ndarray:
    """xi[i, prev, cur]: probability of the (prev, cur) transition into position i.

    Shape (n, V+1, V); the start row is populated only at i = 0, where
    xi[0, start, y] equals the token marginal q(y_0 = y | x).
    """
    m = _pair_scores(lattice)
    n, v = lattice.n, lattice.num_labels
    la = forward_scores(lattice)
    lb = backward_scores(lattice)
    logz = _logsumexp(la[-1], axis=0)
    xi = np.zeros((n, v + 1, v))
    xi[0, v, :] = np.exp(m[0, v, :] + lb[0] - logz)
    for i in range(1, n):
        xi[i, :v, :] = np.exp(la[i - 1][:, None] + m[i, :v, :] + lb[i][None, :] - logz)
    return xi


def _fold_transition_grad(lattice: Lattice, g_pair: np.ndarray) -> np.ndarray:
    """Collapse per-position pair-score gradients onto the transition array."""
    if lattice.shared_transitions:
        return g_pair.sum(axis=0)
    return g_pair


def nll_and_grad(lattice: Lattice, gold: Sequence[int]) -> tuple[float, LatticeGrad]:
    """Negative log-likelihood of ``gold`` and its exact gradient.

    d(loss)/d(emissions[i, j]) = q(y_i = j | x) - 1[gold_i = j]; the transition
    gradient is the pairwise marginal minus the gold transition indicator.
    """
    gold = _check_sequence(lattice, gold)
    n, v = lattice.n, lattice.num_labels
    loss = -sequence_log_prob(lattice, gold)
    xi = pairwise_marginals(lattice)
    g_pair = xi.copy()
    g_pair[0, v, gold[0]] -= 1.0
    for i in range(1, n):
        g_pair[i, gold[i - 1], gold[i]] -= 1.0
    demissions = g_pair.sum(axis=1)
    return loss, LatticeGrad(demissions, _fold_transition_grad(lattice, g_pair))


def weighted_log_marginal_grad(lattice: Lattice, weights: np.ndarray) -> LatticeGrad:
    """Gradient of sum_ij weights[i, j] * log q(y_i = j | x) w.r.t. the lattice.

    Reverse-mode through the forward/backward recursions; this is the backbone
    of the posterior-distillation gradient (weights = -q_teacher).
    """
    weights = np.asarray(weights, dtype=np.float64)
    n, v = lattice.n, lattice.num_labels
    if weights.shape != (n, v):
        raise ValueError("weights must match the lattice emission shape")
    m = _pair_scores(lattice)
    la = forward_scores(lattice)
    lb = backward_scores(lattice)
    logz = _logsumexp(la[-1], axis=0)

    g_pair = np.zeros((n, v + 1, v))

    # alpha chain: log q picks up +w from la, and -sum(w) through logZ.
    gla = weights.copy()
    gla[n - 1] += (-weights.sum()) * np.exp(la[n - 1] - logz)
    for i in range(n - 1, 0, -1):
        a = np.exp(la[i - 1][:, None] + m[i, :v, :] - la[i][None, :])  # (V_prev, V_cur)
        contrib = a * gla[i][None, :]
        g_pair[i, :v, :] += contrib
        gla[i - 1] += contrib.sum(axis=1)
    g_pair[0, v, :] += gla[0]

    # beta chain, visited in reverse order of its (backward) computation.
    glb = np.zeros((n, v))
    glb[0] = weights[0]
    for i in range(0, n - 1):
        b = np.exp(m[i + 1, :v, :] + lb[i + 1][None, :] - lb[i][:, None])  # (V, V_next)
        contrib = b * glb[i][:, None]
        g_pair[i + 1, :v, :] += contrib
        glb[i + 1] = contrib.sum(axis=0) + weights[i + 1]

    demissions = g_pair.sum(axis=1)
    return LatticeGrad(demissions, _fold_transition_grad(lattice, g_pair))
