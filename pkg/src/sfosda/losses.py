"""Objective terms for target adaptation, each returning (loss, gradient w.r.t. its inputs).

All gradients are with respect to student outputs; teacher quantities enter as
constants.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from sfosda.errors import InvalidInputError
from sfosda.numerics import EPS, entropy_rows, kl_rows, log_softmax, softmax, xlogy

NORM_EPS = 1e-12
IM_DIVERSITY = ("kl_to_mean", "uniform")


# ----------------------------------------------------------------------------
# cross-entropy and curriculum
# ----------------------------------------------------------------------------

def smoothed_targets(labels: np.ndarray, n_classes: int, alpha: float) -> np.ndarray:
    q = np.full((len(labels), n_classes), alpha / n_classes)
    q[np.arange(len(labels)), labels] += 1.0 - alpha
    return q


def ce_label_smoothed(logits: np.ndarray, labels, weights=None, alpha: float = 0.1,
                      n_classes: int | None = None) -> tuple[float, np.ndarray]:
    """Instance-weighted label-smoothed cross-entropy, averaged over the batch."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    n_classes = c if n_classes is None else n_classes
    if n_classes != c:
        raise InvalidInputError(f"logits have {c} columns, expected {n_classes}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise InvalidInputError("label out of range")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if n == 0:
        return 0.0, np.zeros_like(logits)
    q = smoothed_targets(labels, c, alpha)
    per_sample = -np.sum(q * log_softmax(logits), axis=1)
    loss = float(np.mean(w * per_sample))
    grad = w[:, None] * (softmax(logits) - q) / n
    return loss, grad


@dataclass
class CurriculumState:
    gamma: float = 1.0
    prev_known_ce: float | None = None
    beta: float = 0.01
    iteration: int = 0
    gamma0: float = 1.0
    floor: float = 0.5


def curriculum_update(state: CurriculumState, known_ce_now: float) -> CurriculumState:
    """gamma_r = max(0.5, gamma_{r-1} * (1 - beta * exp(-L_r / L_{r-1}))).

    The first call only records the baseline loss.
    """
    if known_ce_now < 0:
        raise InvalidInputError("known-subset CE must be non-negative")
    if state.prev_known_ce is None:
        return replace(state, prev_known_ce=float(known_ce_now), iteration=state.iteration + 1)
    ratio = known_ce_now / state.prev_known_ce if state.prev_known_ce > 0 else 1.0
    gamma = max(state.floor, state.gamma * (1.0 - state.beta * math.exp(-ratio)))
    return replace(state, gamma=min(gamma, state.gamma), prev_known_ce=float(known_ce_now),
                   iteration=state.iteration + 1)


def curriculum_ce(known_loss: float, unknown_loss: float, gamma: float) -> float:
    return gamma * known_loss + (1.0 - gamma) * unknown_loss


# ----------------------------------------------------------------------------
# information maximisation
# ----------------------------------------------------------------------------

def im_loss(logits: np.ndarray, diversity: str = "kl_to_mean") -> tuple[float, float, np.ndarray]:
    """Mean entropy plus a diversity term; returns (entropy, diversity, d_logits).

    ``diversity="kl_to_mean"``: batch mean of KL(p_i || p_bar).  Note that
    entropy + this term equals H(p_bar) exactly, so minimising it rewards
    batches that all predict the same class.
    ``diversity="uniform"``: KL(p_bar || uniform) = log C - H(p_bar), which
    rewards an even spread of predictions over classes.

    Gradients include p_bar's dependence on every row.  A single-row batch
    has no diversity term (reported as 0).
    """
    if diversity not in IM_DIVERSITY:
        raise InvalidInputError(f"diversity must be one of {IM_DIVERSITY}")
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    if n == 0:
        return 0.0, 0.0, np.zeros_like(logits)
    p = softmax(logits)
    logp = np.log(np.maximum(p, EPS))
    ent = float(np.mean(entropy_rows(p)))
    # dH_i/dp_ij = -(log p_ij + 1)
    dp = -(logp + 1.0) / n
    div = 0.0
    if n >= 2:
        pbar = p.mean(axis=0)
        log_pbar = np.log(np.maximum(pbar, EPS))
        if diversity == "kl_to_mean":
            div = float(np.mean(kl_rows(p, pbar)))
            # (1/n) sum_i sum_k p_ik log p_ik - sum_k pbar_k log pbar_k
            dp += (logp - log_pbar) / n
        else:
            div = float(np.sum(xlogy(pbar, pbar)) + np.log(c))
            dp += (log_pbar + 1.0) / n
    dlogits = p * (dp - np.sum(dp * p, axis=1, keepdims=True))
    return ent, div, dlogits


# ----------------------------------------------------------------------------
# consistency
# ----------------------------------------------------------------------------

def consistency_loss(student_logits: np.ndarray, teacher_probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of sum_k p_T log(p_T / p_S), p_S the student softmax."""
    student_logits = np.asarray(student_logits, dtype=np.float64)
    pt = np.asarray(teacher_probs, dtype=np.float64)
    n = len(student_logits)
    if n == 0:
        return 0.0, np.zeros_like(student_logits)
    ls = log_softmax(student_logits)
    per = np.sum(xlogy(pt, pt), axis=1) - np.sum(pt * ls, axis=1)
    loss = max(float(np.mean(per)), 0.0)
    return loss, (np.exp(ls) - pt) / n


# ----------------------------------------------------------------------------
# cosine triplet
# ----------------------------------------------------------------------------

def cosine_distance(z1, z2) -> float:
    return float(_cos_dist_rows(np.atleast_2d(z1), np.atleast_2d(z2))[0])


def _cos_dist_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.maximum(np.linalg.norm(a, axis=1), NORM_EPS)
    nb = np.maximum(np.linalg.norm(b, axis=1), NORM_EPS)
    return 1.0 - np.sum(a * b, axis=1) / (na * nb)


def _cos_dist_grad(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise gradient of 1 - cos(a, b) with respect to b."""
    na = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), NORM_EPS)
    nb = np.maximum(np.linalg.norm(b, axis=1, keepdims=True), NORM_EPS)
    dot = np.sum(a * b, axis=1, keepdims=True)
    return -(a / (na * nb) - dot * b / (na * nb ** 3))


def triplet_loss(anchor, positive, negative) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean over rows of max(D(a, pos) - D(a, neg), 0) with zero margin.

    Returns (loss, d_positive, d_negative); the anchor is a constant.
    Accepts single vectors or aligned batches of rows.
    """
    a = np.atleast_2d(np.asarray(anchor, dtype=np.float64))
    p = np.atleast_2d(np.asarray(positive, dtype=np.float64))
    q = np.atleast_2d(np.asarray(negative, dtype=np.float64))
    if not a.shape == p.shape == q.shape:
        raise InvalidInputError("anchor, positive and negative must have the same shape")
    n = len(a)
    if n == 0:
        return 0.0, np.zeros_like(p), np.zeros_like(q)
    margin = _cos_dist_rows(a, p) - _cos_dist_rows(a, q)
    active = (margin > 0)[:, None]
    loss = float(np.mean(np.maximum(margin, 0.0)))
    dp = np.where(active, _cos_dist_grad(a, p), 0.0) / n
    dq = np.where(active, -_cos_dist_grad(a, q), 0.0) / n
    if np.ndim(positive) == 1:
        return loss, dp[0], dq[0]
    return loss, dp, dq


# ----------------------------------------------------------------------------
# combination and schedules
# ----------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    ce_known: float = 0.0
    ce_unknown: float = 0.0
    im_ent: float = 0.0
    im_div: float = 0.0
    triplet: float = 0.0
    consistency: float = 0.0
    gamma_used: float = 1.0
    zeta1: float = 0.0
    zeta2: float = 0.0
    total: float = 0.0

    @property
    def ce(self) -> float:
        return curriculum_ce(self.ce_known, self.ce_unknown, self.gamma_used)

    @property
    def im(self) -> float:
        return self.im_ent + self.im_div

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def total_loss(ce_known: float, ce_unknown: float, im_ent: float, im_div: float, triplet: float,
               consistency: float, gamma: float, zeta1: float, zeta2: float) -> LossBreakdown:
    parts = (ce_known, ce_unknown, im_ent, im_div, triplet, consistency)
    if not all(math.isfinite(v) for v in parts):
        raise InvalidInputError("loss parts must be finite")
    total = curriculum_ce(ce_known, ce_unknown, gamma) + (im_ent + im_div) + zeta1 * triplet + zeta2 * consistency
    return LossBreakdown(ce_known, ce_unknown, im_ent, im_div, triplet, consistency, gamma, zeta1, zeta2, total)


def mean_breakdown(items: list[LossBreakdown]) -> LossBreakdown:
    if not items:
        return LossBreakdown()
    fields = LossBreakdown().as_dict().keys()
    return LossBreakdown(**{k: float(np.mean([getattr(b, k) for b in items])) for k in fields})


def zeta2_schedule(epoch: int, total_epochs: int, zeta2_max: float = 0.5) -> float:
    """Gaussian ramp-up exp(-5 (1 - t/T)^2) reaching zeta2_max at 80% of training."""
    if total_epochs < 1:
        raise InvalidInputError("total_epochs must be at least 1")
    ramp = math.ceil(0.8 * total_epochs)
    if epoch >= ramp:
        return zeta2_max
    frac = max(epoch, 0) / ramp
    return zeta2_max * math.exp(-5.0 * (1.0 - frac) ** 2)
