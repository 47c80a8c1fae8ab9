"""Known/unknown separation of target samples.

Per epoch: ensemble pseudolabels from the student over augmented views, score
each sample against the teacher's prediction (JSD by default), fit an
equal-prior two-component 1-D GMM to the scores and threshold the posterior of
the low-mean component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from sfosda.data import AugmentPolicy, augment_batch
from sfosda.errors import InvalidInputError
from sfosda.model import ModelParams, predict_logits
from sfosda.numerics import EPS, Rng, entropy_rows, kl_rows, softmax

VAR_FLOOR = 1e-6
LOG2 = float(np.log(2.0))
CRITERIA = ("jsd", "entropy", "ce")
PSEUDOLABEL_SCHEMES = ("ensemble", "student_argmax")


# ----------------------------------------------------------------------------
# pseudolabels and scores
# ----------------------------------------------------------------------------

def known_probs(params: ModelParams, x: np.ndarray, n_known: int) -> np.ndarray:
    """Softmax restricted to the first ``n_known`` logits."""
    return softmax(predict_logits(params, x)[:, :n_known])


def ensemble_pseudolabels(student: ModelParams, features: np.ndarray, policies: Sequence[AugmentPolicy],
                          n_known: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Average known-class softmax over one view per policy; return (argmax labels, mean probs).

    ``policies`` lists the M views in order and must contain exactly one weak
    policy.
    """
    if len(policies) < 1:
        raise InvalidInputError("need at least one augmented view")
    if sum(p.kind == "weak" for p in policies) != 1:
        raise InvalidInputError("exactly one weak view is required")
    total = np.zeros((len(features), n_known))
    for policy in policies:
        total += known_probs(student, augment_batch(features, policy, rng), n_known)
    mean = total / len(policies)
    return np.argmax(mean, axis=1), mean


def onehot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def jsd_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m = 0.5 * (a + b)
    return np.clip(0.5 * kl_rows(a, m) + 0.5 * kl_rows(b, m), 0.0, LOG2)


def compute_jsd(pseudo_onehot, teacher_probs) -> float:
    """Jensen-Shannon divergence in nats, bounded by log 2."""
    a = np.asarray(pseudo_onehot, dtype=np.float64)
    b = np.asarray(teacher_probs, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError("distributions differ in length")
    return float(jsd_rows(a, b))


def entropy_criterion(probs: np.ndarray, n_known: int) -> np.ndarray:
    """Per-sample entropy divided by log(n_known), in [0, 1]."""
    return np.clip(entropy_rows(np.asarray(probs)) / np.log(n_known), 0.0, 1.0)


def ce_criterion(pseudo: np.ndarray, probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs)
    return -np.log(np.maximum(probs[np.arange(len(probs)), np.asarray(pseudo)], EPS))


# ----------------------------------------------------------------------------
# equal-prior two-component GMM
# ----------------------------------------------------------------------------

@dataclass
class GmmFit:
    mu_low: float
    mu_high: float
    var_low: float
    var_high: float
    iterations: int
    converged: bool
    log_likelihood: float
    degenerate: bool = False
    history: list[float] = field(default_factory=list, repr=False)
    prior: float = 0.5

    def log_densities(self, x) -> tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        return _log_normal(x, self.mu_low, self.var_low), _log_normal(x, self.mu_high, self.var_high)

    def posterior_known(self, x) -> np.ndarray:
        if self.degenerate:
            return np.ones_like(np.asarray(x, dtype=np.float64))
        lo, hi = self.log_densities(x)
        return _sigmoid(lo - hi)

    def posterior_unknown(self, x) -> np.ndarray:
        if self.degenerate:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        lo, hi = self.log_densities(x)
        return _sigmoid(hi - lo)

    def as_dict(self) -> dict:
        return {
            "mu_low": self.mu_low, "mu_high": self.mu_high, "var_low": self.var_low,
            "var_high": self.var_high, "iterations": self.iterations, "converged": self.converged,
            "log_likelihood": self.log_likelihood, "degenerate": self.degenerate,
        }


def _sigmoid(d):
    # logistic of the log-density difference; both posteriors share one d so they sum to 1
    return np.exp(-np.logaddexp(0.0, -d))


def _log_normal(x, mu, var):
    return -0.5 * (np.log(2.0 * np.pi * var) + (x - mu) ** 2 / var)


def _log_likelihood(x, mu, var) -> tuple[float, np.ndarray, np.ndarray]:
    l0 = np.log(0.5) + _log_normal(x, mu[0], var[0])
    l1 = np.log(0.5) + _log_normal(x, mu[1], var[1])
    norm = np.logaddexp(l0, l1)
    return float(norm.sum()), np.exp(l0 - norm), np.exp(l1 - norm)


def fit_gmm_1d(values, tol: float = 1e-8, max_iter: int = 500,
               init: GmmFit | None = None) -> GmmFit:
    """EM for a 1-D two-component mixture with both priors fixed at 0.5.

    Starts from the 25th/75th percentiles with their pooled within-group
    variance, or from ``init`` when warm-starting.  Variances are floored at
    ``VAR_FLOOR``; the floored M-step is still a constrained maximiser, so the
    log-likelihood never decreases.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if len(x) < 4:
        raise InvalidInputError("GMM fit needs at least 4 values")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("GMM input has non-finite values")

    if init is not None and not init.degenerate:
        mu = np.array([init.mu_low, init.mu_high])
        var = np.array([init.var_low, init.var_high])
    else:
        mu = np.percentile(x, [25.0, 75.0])
        nearest = np.abs(x - mu[0]) <= np.abs(x - mu[1])
        pooled = np.mean(np.where(nearest, (x - mu[0]) ** 2, (x - mu[1]) ** 2))
        var = np.full(2, max(pooled, VAR_FLOOR))

    ll, r0, r1 = _log_likelihood(x, mu, var)
    history = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        for k, r in enumerate((r0, r1)):
            s = r.sum()
            if s > 0:
                mu[k] = np.dot(r, x) / s
                var[k] = max(np.dot(r, (x - mu[k]) ** 2) / s, VAR_FLOOR)
        ll_new, r0, r1 = _log_likelihood(x, mu, var)
        history.append(ll_new)
        if abs(ll_new - ll) < tol:
            ll = ll_new
            converged = True
            break
        ll = ll_new

    lo, hi = (0, 1) if mu[0] <= mu[1] else (1, 0)
    degenerate = bool(abs(mu[1] - mu[0]) < 1e-9 and min(var) <= VAR_FLOOR * (1 + 1e-9))
    if np.ptp(x) == 0:
        degenerate = True
        mu[:] = x[0]
    return GmmFit(float(mu[lo]), float(mu[hi]), float(var[lo]), float(var[hi]), it, converged, ll,
                  degenerate, history)


def posterior_known(value: float, fit: GmmFit) -> float:
    """Posterior of the low-mean component; 1.0 for a degenerate fit."""
    return float(fit.posterior_known(np.asarray([value]))[0])


def kmeans_split_1d(values, max_iter: int = 100) -> np.ndarray:
    """Two-means clustering on a scalar; True marks the low-mean cluster."""
    x = np.asarray(values, dtype=np.float64)
    c = np.array([x.min(), x.max()])
    low = np.ones(len(x), dtype=bool)
    for _ in range(max_iter):
        new_low = np.abs(x - c[0]) <= np.abs(x - c[1])
        if np.array_equal(new_low, low) and _ > 0:
            break
        low = new_low
        if low.any():
            c[0] = x[low].mean()
        if (~low).any():
            c[1] = x[~low].mean()
    return low


# ----------------------------------------------------------------------------
# full separation step
# ----------------------------------------------------------------------------

@dataclass
class SeparationResult:
    scores: np.ndarray  # criterion value per sample (JSD unless ablated)
    w_known: np.ndarray
    pseudo: np.ndarray  # final labels over C_t; n_known marks unknown
    weights: np.ndarray  # instance weights for the CE term
    known_idx: np.ndarray
    unknown_idx: np.ndarray
    fit: GmmFit
    mean_probs: np.ndarray
    n_known: int

    @property
    def jsd(self) -> np.ndarray:
        return self.scores

    @property
    def degenerate(self) -> bool:
        return self.fit.degenerate

    @property
    def is_known(self) -> np.ndarray:
        mask = np.zeros(len(self.pseudo), dtype=bool)
        mask[self.known_idx] = True
        return mask


def split_by_threshold(w_known: np.ndarray, base_labels: np.ndarray, delta_t: float, n_known: int):
    known = w_known >= delta_t
    pseudo = np.where(known, base_labels, n_known)
    weights = np.where(known, w_known, 1.0 - w_known)
    return np.flatnonzero(known), np.flatnonzero(~known), pseudo, weights


def separate(features: np.ndarray, student: ModelParams, teacher: ModelParams, n_known: int,
             policies: Sequence[AugmentPolicy], rng: Rng, delta_t: float = 0.8,
             criterion: str = "jsd", pseudolabel: str = "ensemble",
             gmm_init: GmmFit | None = None,
             fit_fn: Callable[[np.ndarray], GmmFit] | None = None) -> SeparationResult:
    """Split target samples into known and unknown subsets.

    ``fit_fn`` replaces the GMM (e.g. a beta mixture); it must return an object
    with ``posterior_known(values)`` and a ``degenerate`` attribute.  A
    degenerate fit marks every sample known with weight 1.
    """
    if not 0.0 <= delta_t < 1.0:
        raise InvalidInputError("delta_t must lie in [0, 1)")
    if criterion not in CRITERIA:
        raise InvalidInputError(f"criterion must be one of {CRITERIA}")
    if pseudolabel not in PSEUDOLABEL_SCHEMES:
        raise InvalidInputError(f"pseudolabel scheme must be one of {PSEUDOLABEL_SCHEMES}")

    if pseudolabel == "ensemble":
        labels, mean_probs = ensemble_pseudolabels(student, features, policies, n_known, rng)
    else:
        mean_probs = known_probs(student, features, n_known)
        labels = np.argmax(mean_probs, axis=1)

    p_teacher = known_probs(teacher, features, n_known)
    if criterion == "jsd":
        scores = jsd_rows(onehot(labels, n_known), p_teacher)
    elif criterion == "entropy":
        scores = entropy_criterion(p_teacher, n_known)
    else:
        scores = ce_criterion(labels, p_teacher)

    fit = fit_fn(scores) if fit_fn is not None else fit_gmm_1d(scores, init=gmm_init)
    w = np.asarray(fit.posterior_known(scores), dtype=np.float64)
    known_idx, unknown_idx, pseudo, weights = split_by_threshold(w, labels, delta_t, n_known)
    return SeparationResult(scores, w, pseudo, weights, known_idx, unknown_idx, fit, mean_probs, n_known)


# ----------------------------------------------------------------------------
# diagnostics
# ----------------------------------------------------------------------------

DIAG_HEADER = "# sfosda-separation v1"
HIST_HEADER = "# sfosda-histogram v1"


def write_diagnostics(path, result: SeparationResult, hidden_labels: np.ndarray | None = None) -> None:
    lines = [DIAG_HEADER, "sample_index,jsd,w_known,pseudo_class,hidden_label"]
    for i in range(len(result.pseudo)):
        hidden = "" if hidden_labels is None else str(int(hidden_labels[i]))
        lines.append(f"{i},{float(result.scores[i])!r},{float(result.w_known[i])!r},{int(result.pseudo[i])},{hidden}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_diagnostics(path) -> dict[str, np.ndarray]:
    rows = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    body = [r.split(",") for r in rows[1:]]
    return {
        "sample_index": np.array([int(r[0]) for r in body]),
        "jsd": np.array([float(r[1]) for r in body]),
        "w_known": np.array([float(r[2]) for r in body]),
        "pseudo_class": np.array([int(r[3]) for r in body]),
        "hidden_label": np.array([int(r[4]) if r[4] else -1 for r in body]),
    }


def histogram(values, bins: int = 50, upper: float = LOG2) -> tuple[np.ndarray, np.ndarray]:
    hi = max(upper, float(np.max(values))) if len(values) else upper
    return np.histogram(values, bins=bins, range=(0.0, hi))


def write_histogram(path, values, bins: int = 50, upper: float = LOG2) -> None:
    counts, edges = histogram(values, bins, upper)
    lines = [HIST_HEADER, "bin_low,bin_high,count"]
    lines += [f"{float(edges[i])!r},{float(edges[i + 1])!r},{int(counts[i])}" for i in range(len(counts))]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_histogram(path) -> np.ndarray:
    rows = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln and not ln.startswith("#")]
    return np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
