"""Training objectives: gold NLL companions and the distillation losses.

Distillation variants
---------------------
``token``      cross-entropy between per-token label distributions (softmax model)
``emission``   cross-entropy between softmax-normalized emission rows
``topk``       mean student NLL over the teacher's k best sequences
``topwk``      teacher-probability-weighted student NLL over the k best
``posterior``  cross-entropy between forward-backward token marginals
``pos_topwk``  arithmetic mean of ``topwk`` and ``posterior``

Every loss has a gradient twin used by the trainer (``kd_loss_and_grad``),
returning the exact gradient w.r.t. the student lattice scores.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .lattice import (
    KBestList,
    Lattice,
    LatticeGrad,
    log_partition,
    pairwise_marginals,
    posteriors,
    sequence_log_prob,
    sequence_score,
    weighted_log_marginal_grad,
    zero_grad,
)

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

KD_VARIANTS = ("token", "emission", "topk", "topwk", "posterior", "pos_topwk")
_NEEDS_K = ("topk", "topwk", "pos_topwk")


@dataclass(frozen=True)
class KDLossKind:
    variant: str
    k: int | None = None

    def __post_init__(self):
        if self.variant not in KD_VARIANTS:
            raise ValueError(f"unknown KD variant {self.variant!r}; expected one of {KD_VARIANTS}")
        if self.variant in _NEEDS_K:
            if self.k is None or self.k < 1:
                raise ValueError(f"variant {self.variant!r} requires k >= 1")
        elif self.k is not None:
            raise ValueError(f"variant {self.variant!r} does not take k")

    @property
    def needs_kbest(self) -> bool:
        return self.variant in _NEEDS_K

    @property
    def needs_posteriors(self) -> bool:
        return self.variant in ("token", "emission", "posterior", "pos_topwk")


@dataclass(frozen=True)
class InterpolationState:
    """Mixing coefficient between the KD loss and the gold NLL.

    ``lam`` starts at 1 and is decreased by ``tau`` once per epoch, clamped
    at 0, so training shifts from pure distillation to pure gold supervision.
    """

    lam: float
    tau: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")
        if self.tau < 0.0:
            raise ValueError("annealing rate must be >= 0")


def interpolated_loss(kd: float, nll: float, state: InterpolationState) -> float:
    return state.lam * kd + (1.0 - state.lam) * nll


def anneal_lambda(state: InterpolationState) -> InterpolationState:
    return replace(state, lam=max(state.lam - state.tau, 0.0))


def _check_rows(p: np.ndarray, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix")
    if np.any(p < -1e-9) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError(f"{name} rows must be probability distributions")
    return p


def _safe_log(p: np.ndarray) -> np.ndarray:
    if np.any(p < PROB_FLOOR):
        log.warning("clamping %d probabilities below %g before log", int((p < PROB_FLOOR).sum()), PROB_FLOOR)
    return np.log(np.maximum(p, PROB_FLOOR))


def token_kd_loss(teacher_probs: np.ndarray, student_probs: np.ndarray) -> float:
    """Cross-entropy summed over tokens: -sum_i sum_j p_t(i,j) log p_s(i,j)."""
    t = _check_rows(teacher_probs, "teacher_probs")
    s = _check_rows(student_probs, "student_probs")
    if t.shape != s.shape:
        raise ValueError(f"shape mismatch: teacher {t.shape} vs student {s.shape}")
    return float(-(t * _safe_log(s)).sum())


def softmax_rows(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def emission_kd_loss(teacher_lattice: Lattice, student_lattice: Lattice) -> float:
    """Token KD over softmax-normalized emission rows; transitions are ignored."""
    if teacher_lattice.emissions.shape != student_lattice.emissions.shape:
        raise ValueError("teacher and student lattices must share (n, V)")
    return token_kd_loss(softmax_rows(teacher_lattice.emissions),
                         softmax_rows(student_lattice.emissions))


def topk_kd_loss(teacher_kbest: KBestList, student_lattice: Lattice) -> float:
    """Mean student NLL over the teacher's k best sequences."""
    seqs = teacher_kbest.sequences
    return float(-np.mean([sequence_log_prob(student_lattice, s.labels) for s in seqs]))


def topwk_kd_loss(teacher_kbest: KBestList, student_lattice: Lattice) -> float:
    """Student NLL weighted by the teacher's renormalized sequence probabilities."""
    total = 0.0
    for s in teacher_kbest.sequences:
        total -= s.normalized_weight * sequence_log_prob(student_lattice, s.labels)
    return float(total)


def posterior_kd_loss(teacher_post: np.ndarray, student_post: np.ndarray) -> float:
    """Cross-entropy between teacher and student token marginals."""
    return token_kd_loss(teacher_post, student_post)


def pos_topwk_loss(teacher_kbest: KBestList, teacher_post: np.ndarray,
                   student_lattice: Lattice) -> float:
    """Unweighted average of the weighted-top-k and posterior losses."""
    a = topwk_kd_loss(teacher_kbest, student_lattice)
    b = posterior_kd_loss(teacher_post, posteriors(student_lattice))
    return 0.5 * (a + b)


# ---------------------------------------------------------------------------
# Gradients w.r.t. the student lattice
# ---------------------------------------------------------------------------

def _emission_kd_grad(teacher_probs: np.ndarray, lattice: Lattice) -> tuple[float, LatticeGrad]:
    s = softmax_rows(lattice.emissions)
    loss = token_kd_loss(teacher_probs, s)
    grad = zero_grad(lattice)
    # d/d e of -sum t log softmax(e) per row is softmax(e) - t
    return loss, LatticeGrad(s - teacher_probs, grad.transitions)


def _weighted_sequences_grad(pairs, lattice: Lattice) -> tuple[float, LatticeGrad]:
    """Loss and gradient of -sum_w w * log p_s(y) for weighted sequences.

    The gradient is the model expectation (token and pairwise marginals) minus
    the weighted empirical counts of the target sequences.
    """
    n, v = lattice.n, lattice.num_labels
    xi = pairwise_marginals(lattice)
    logz = log_partition(lattice)

    total_w = 0.0
    loss = 0.0
    counts = np.zeros((n, v + 1, v))
    for labels, w in pairs:
        score = sequence_score(lattice, labels)
        loss -= w * (score - logz)
        counts[0, v, labels[0]] += w
        for i in range(1, n):
            counts[i, labels[i - 1], labels[i]] += w
        total_w += w
    g_pair = total_w * xi - counts
    demissions = g_pair.sum(axis=1)
    if lattice.shared_transitions:
        dtrans = g_pair.sum(axis=0)
    else:
        dtrans = g_pair
    return float(loss), LatticeGrad(demissions, dtrans)


def _posterior_kd_grad(teacher_post: np.ndarray, lattice: Lattice) -> tuple[float, LatticeGrad]:
    q = posteriors(lattice)
    loss = posterior_kd_loss(teacher_post, q)
    grad = weighted_log_marginal_grad(lattice, -np.asarray(teacher_post, dtype=np.float64))
    return loss, grad


def kd_loss_and_grad(kind: KDLossKind, student_lattice: Lattice, *,
                     kbest: KBestList | None = None,
                     teacher_posteriors: np.ndarray | None = None) -> tuple[float, LatticeGrad]:
    """Evaluate a KD loss and its gradient w.r.t. the student lattice scores.

    ``teacher_posteriors`` carries whichever per-token teacher distribution the
    variant consumes: softmax emission rows for token/emission, forward-backward
    marginals for posterior-based variants.
    """
    if kind.needs_kbest and kbest is None:
        raise ValueError(f"variant {kind.variant!r} requires a teacher k-best list")
    if kind.needs_posteriors and teacher_posteriors is None:
        raise ValueError(f"variant {kind.variant!r} requires teacher token distributions")

    if kind.variant in ("token", "emission"):
        return _emission_kd_grad(np.asarray(teacher_posteriors, dtype=np.float64), student_lattice)
    if kind.variant == "topk":
        k = len(kbest.sequences)
        pairs = [(s.labels, 1.0 / k) for s in kbest.sequences]
        return _weighted_sequences_grad(pairs, student_lattice)
    if kind.variant == "topwk":
        pairs = [(s.labels, s.normalized_weight) for s in kbest.sequences]
        return _weighted_sequences_grad(pairs, student_lattice)
    if kind.variant == "posterior":
        return _posterior_kd_grad(np.asarray(teacher_posteriors, dtype=np.float64), student_lattice)
    # pos_topwk
    pairs = [(s.labels, s.normalized_weight) for s in kbest.sequences]
    l1, g1 = _weighted_sequences_grad(pairs, student_lattice)
    l2, g2 = _posterior_kd_grad(np.asarray(teacher_posteriors, dtype=np.float64), student_lattice)
    return 0.5 * (l1 + l2), (g1 + g2).scaled(0.5)
