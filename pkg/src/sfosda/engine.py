"""Source training and the teacher/student adaptation loop.

Each adaptation epoch: separate target samples (teacher scores the student's
ensembled pseudolabels), run one pass of minibatch SGD on the student, then
move the teacher towards the student by EMA.  Random draws come from streams
derived from (seed, epoch), so a run resumed from an epoch-boundary checkpoint
follows the uninterrupted trajectory exactly.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from sfosda import checkpoint
from sfosda.config import RunConfig
from sfosda.data import AugmentPolicy, LabeledSet, UnlabeledSet, augment_batch, strong_policy, weak_policy
from sfosda.errors import IntegrityError, InvalidInputError, NumericAbort
from sfosda.losses import (
    CurriculumState,
    LossBreakdown,
    ce_label_smoothed,
    consistency_loss,
    curriculum_update,
    im_loss,
    mean_breakdown,
    total_loss,
    triplet_loss,
    zeta2_schedule,
)
from sfosda.metrics import evaluate
from sfosda.model import (
    SGD,
    ModelParams,
    backward,
    ema_momentum_schedule,
    ema_update,
    forward,
    init_source_model,
    init_target_models,
    predict_logits,
)
from sfosda.numerics import Rng, softmax
from sfosda.separation import (
    GmmFit,
    SeparationResult,
    entropy_criterion,
    kmeans_split_1d,
    known_probs,
    separate,
)

log = logging.getLogger(__name__)

MODEL_ACTIVATIONS_KEY = "activations"


# ----------------------------------------------------------------------------
# source training
# ----------------------------------------------------------------------------

def split_train_val(n: int, val_fraction: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(predict_logits(params, x), axis=1) == y))


def train_source(config: RunConfig, source: LabeledSet) -> ModelParams:
    """Label-smoothed CE minibatch SGD on the training split of ``source``."""
    st = config.source_training
    rng = Rng(config.seed).stream("source-train")
    params = init_source_model(source.features.shape[1], source.class_count, rng.stream("init"),
                               config.model.hidden, config.model.n_hidden, config.model.bottleneck)
    train_idx, _ = split_train_val(len(source), st.val_fraction, rng.stream("split"))
    x, y = source.features[train_idx], source.labels[train_idx]
    opt = SGD(params, st.momentum, st.weight_decay)
    for epoch in range(1, st.epochs + 1):
        order = rng.stream(f"shuffle-{epoch}").permutation(len(x))
        for start in range(0, len(x), st.batch_size):
            b = order[start:start + st.batch_size]
            logits, trace = forward(params, x[b])
            loss, d = ce_label_smoothed(logits, y[b], None, st.alpha)
            if not np.isfinite(loss):
                raise NumericAbort("source loss is not finite", epoch=epoch)
            params = opt.step(params, backward(trace, d), st.lr)
    return params


def source_only_baseline(source_model: ModelParams, features: np.ndarray) -> np.ndarray:
    """Source predictions with unknowns flagged by two-means on normalized entropy."""
    n_known = source_model.n_classes
    probs = softmax(predict_logits(source_model, features))
    pred = np.argmax(probs, axis=1)
    low = kmeans_split_1d(entropy_criterion(probs, n_known))
    return np.where(low, pred, n_known)


# ----------------------------------------------------------------------------
# adaptation
# ----------------------------------------------------------------------------

@dataclass
class EpochReport:
    epoch: int
    n_known: int
    n_unknown: int
    gmm: dict
    degenerate: bool
    losses: dict
    metrics: dict | None
    separation_balanced_acc: float | None
    gamma: float
    m: float | None
    zeta2: float
    lr: float
    triplet_skipped: int
    wall_clock: float = 0.0

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EpochReport":
        return cls(**d)


@dataclass
class AdaptState:
    epoch: int  # epochs completed
    iteration: int
    student: ModelParams
    teacher: ModelParams
    optimizer: SGD
    curriculum: CurriculumState
    prev_fit: GmmFit | None = None
    reports: list[EpochReport] = field(default_factory=list)


@dataclass
class AdaptResult:
    student: ModelParams
    teacher: ModelParams
    reports: list[EpochReport]
    state: AdaptState


@dataclass
class Schedules:
    lr: float
    zeta2: float


def policies_for(config: RunConfig, features: np.ndarray) -> tuple[AugmentPolicy, AugmentPolicy]:
    std = features.std(axis=0)
    aug = config.augment
    return (weak_policy(std, aug.weak_sigma),
            strong_policy(std, aug.strong_sigma, aug.strong_dropout, aug.strong_jitter))


def lr_at(config: RunConfig, iteration: int, max_iter: int) -> float:
    a = config.adapt
    if not a.lr_decay or max_iter <= 0:
        return a.lr
    return a.lr * (1.0 + 10.0 * iteration / max_iter) ** (-0.75)


def init_adapt_state(config: RunConfig, source_model: ModelParams) -> AdaptState:
    student, teacher = init_target_models(source_model, config.model.freeze_known_bias)
    a = config.adapt
    return AdaptState(0, 0, student, teacher, SGD(student, a.momentum, a.weight_decay),
                      CurriculumState(gamma=a.gamma0, beta=a.beta, gamma0=a.gamma0))


def _separation_balanced_acc(sep: SeparationResult, hidden: np.ndarray) -> float | None:
    is_unk = hidden == sep.n_known
    if is_unk.all() or (~is_unk).all():
        return None
    flagged = ~sep.is_known
    return 0.5 * (float(np.mean(flagged[is_unk])) + float(np.mean(~flagged[~is_unk])))


def all_known_separation(student: ModelParams, features: np.ndarray, n_known: int) -> SeparationResult:
    """Warm-up path: every sample known, student argmax labels, unit weights."""
    probs = known_probs(student, features, n_known)
    n = len(features)
    fit = GmmFit(0.0, 0.0, 1.0, 1.0, 0, False, 0.0, degenerate=True)
    return SeparationResult(np.zeros(n), np.ones(n), np.argmax(probs, axis=1), np.ones(n),
                            np.arange(n), np.array([], dtype=np.int64), fit, probs, n_known)


def run_separation(config: RunConfig, state: AdaptState, features: np.ndarray, epoch: int,
                   weak: AugmentPolicy, strong: AugmentPolicy, seed_rng: Rng) -> SeparationResult:
    a = config.adapt
    n_known = state.student.n_classes - 1
    if epoch <= a.warmup_epochs:
        return all_known_separation(state.student, features, n_known)
    scorer = state.teacher if config.toggles.co_training else state.student
    views = [weak] + [strong] * config.augment.strong_views
    init = state.prev_fit if a.gmm_warm_start else None
    return separate(features, state.student, scorer, n_known, views, seed_rng.stream(f"separate-{epoch}"),
                    a.delta_t, a.criterion, a.pseudolabel, gmm_init=init)


def minibatch_step(config: RunConfig, student: ModelParams, teacher: ModelParams, optimizer: SGD,
                   x: np.ndarray, sep_labels: np.ndarray, sep_weights: np.ndarray,
                   curriculum: CurriculumState, schedules: Schedules, weak: AugmentPolicy,
                   strong: AugmentPolicy, rng: Rng) -> tuple[ModelParams, CurriculumState, LossBreakdown, bool]:
    """One student update on a minibatch; returns (student', curriculum', losses, triplet_skipped).

    ``teacher`` is only read.  With co-training disabled, pass the student as
    the teacher: its weak-view outputs then serve as (constant) targets.
    """
    a, tg = config.adapt, config.toggles
    n_known = student.n_classes - 1
    n_cls = student.n_classes
    if len(x) == 0:
        raise InvalidInputError("empty minibatch")
    x_weak = _augment(x, weak, rng, "weak")
    x_strong = _augment(x, strong, rng, "strong")

    t_logits, t_trace = forward(teacher, x_weak)
    s_logits, s_trace = forward(student, x_strong)
    if not (np.all(np.isfinite(t_logits)) and np.all(np.isfinite(s_logits))):
        raise NumericAbort("network outputs are not finite")
    known = sep_labels < n_known
    unknown = ~known
    d_logits = np.zeros_like(s_logits)
    d_feat = None

    # cross-entropy on the known/unknown split; without curriculum gamma stays at its floor
    ce_k = ce_u = 0.0
    gamma = curriculum.gamma if tg.curriculum else curriculum.floor
    if known.any():
        ce_k, g = ce_label_smoothed(s_logits[known], sep_labels[known], sep_weights[known], a.alpha, n_cls)
        d_logits[known] += gamma * g
    if unknown.any():
        ce_u, g = ce_label_smoothed(s_logits[unknown], sep_labels[unknown], sep_weights[unknown], a.alpha, n_cls)
        d_logits[unknown] += (1.0 - gamma) * g

    ent = div = 0.0
    if tg.im and known.any():
        ent, div, g = im_loss(s_logits[known], a.im_diversity)
        d_logits[known] += g

    cons = 0.0
    if tg.consistency and schedules.zeta2 > 0:
        cons, g = consistency_loss(s_logits, softmax(t_logits))
        d_logits += schedules.zeta2 * g

    trip = 0.0
    skipped = False
    if tg.triplet and a.zeta1 > 0:
        if known.any() and unknown.any():
            k_idx, u_idx = np.flatnonzero(known), np.flatnonzero(unknown)
            neg = u_idx[rng.stream("negatives").integers(0, len(u_idx), size=len(k_idx))]
            if a.triplet_space == "logits":
                z_t, z_s = t_logits, s_logits
            else:
                z_t, z_s = t_trace.features, s_trace.features
            trip, d_pos, d_neg = triplet_loss(z_t[k_idx], z_s[k_idx], z_s[neg])
            dz = np.zeros_like(z_s)
            np.add.at(dz, k_idx, a.zeta1 * d_pos)
            np.add.at(dz, neg, a.zeta1 * d_neg)
            if a.triplet_space == "logits":
                d_logits += dz
            else:
                d_feat = dz
        else:
            skipped = True

    zeta1 = a.zeta1 if tg.triplet else 0.0
    zeta2 = schedules.zeta2 if tg.consistency else 0.0
    parts = total_loss(ce_k, ce_u, ent, div, trip, cons, gamma, zeta1, zeta2)
    if not np.isfinite(parts.total):
        raise NumericAbort("adaptation loss is not finite")
    grads = backward(s_trace, d_logits, d_feat)
    if schedules.lr > 0:
        student = optimizer.step(student, grads, schedules.lr)
    if tg.curriculum and a.curriculum_granularity == "iteration" and known.any():
        curriculum = curriculum_update(curriculum, ce_k)
    return student, curriculum, parts, skipped


def _augment(x, policy, rng, name):
    return augment_batch(x, policy, rng.stream(name))


def adapt(config: RunConfig, source_model: ModelParams, target: UnlabeledSet,
          state: AdaptState | None = None, stop_after: int | None = None,
          checkpoint_path=None,
          on_epoch: Callable[[int, SeparationResult, AdaptState], None] | None = None) -> AdaptResult:
    """Run (or continue) adaptation through ``config.adapt.epochs`` epochs.

    ``stop_after`` halts after that many completed epochs (used to produce a
    checkpoint mid-run); ``checkpoint_path`` receives the state after every
    epoch.  Hidden target labels are consulted only for the per-epoch metric
    snapshot.
    """
    a, tg = config.adapt, config.toggles
    features = target.features
    n = len(features)
    if source_model.n_classes != target.n_known and state is None:
        raise InvalidInputError(
            f"source model has {source_model.n_classes} classes, target declares {target.n_known} known")
    state = state or init_adapt_state(config, source_model)
    n_known = state.student.n_classes - 1
    weak, strong = policies_for(config, features)
    root = Rng(config.seed).stream("adapt")
    n_batches = -(-n // a.batch_size)
    max_iter = a.epochs * n_batches
    last = a.epochs if stop_after is None else min(a.epochs, stop_after)

    for epoch in range(state.epoch + 1, last + 1):
        t0 = time.perf_counter()
        try:
            sep = run_separation(config, state, features, epoch, weak, strong, root)
        except InvalidInputError as exc:
            if state.student.all_finite() and np.all(np.isfinite(predict_logits(state.student, features))):
                raise
            raise NumericAbort(f"model outputs became non-finite: {exc}", epoch=epoch) from None
        state.prev_fit = sep.fit if not sep.fit.degenerate else state.prev_fit
        if on_epoch is not None:
            on_epoch(epoch, sep, state)
        teacher_before = state.teacher.copy()

        erng = root.stream(f"epoch-{epoch}")
        order = erng.stream("shuffle").permutation(n)
        zeta2 = zeta2_schedule(epoch, a.epochs, a.zeta2_max)
        breakdowns: list[LossBreakdown] = []
        skipped = 0
        known_ce_epoch: list[float] = []
        lr = a.lr
        for b in range(n_batches):
            idx = order[b * a.batch_size:(b + 1) * a.batch_size]
            lr = lr_at(config, state.iteration, max_iter)
            peer = state.teacher if tg.co_training else state.student
            try:
                student, curriculum, parts, was_skipped = minibatch_step(
                    config, state.student, peer, state.optimizer, features[idx], sep.pseudo[idx],
                    sep.weights[idx], state.curriculum, Schedules(lr, zeta2), weak, strong,
                    erng.stream(f"batch-{b}"))
            except NumericAbort as exc:
                raise NumericAbort(str(exc), epoch=epoch, iteration=state.iteration) from None
            if not student.all_finite():
                raise NumericAbort("student parameters became non-finite", epoch=epoch, iteration=state.iteration)
            state.student, state.curriculum = student, curriculum
            state.iteration += 1
            breakdowns.append(parts)
            skipped += int(was_skipped)
            if (sep.pseudo[idx] < n_known).any():
                known_ce_epoch.append(parts.ce_known)
        if not state.teacher.same_as(teacher_before):
            raise RuntimeError("teacher parameters changed inside an epoch")

        if tg.curriculum and a.curriculum_granularity == "epoch" and known_ce_epoch:
            state.curriculum = curriculum_update(state.curriculum, float(np.mean(known_ce_epoch)))

        m = None
        if tg.co_training:
            m = ema_momentum_schedule(epoch, a.m_max, a.ema_schedule)
            state.teacher = ema_update(state.teacher, state.student, m)
        else:
            state.teacher = state.student.copy()
        state.epoch = epoch

        metrics = None
        sep_acc = None
        if target.hidden_labels is not None:
            metrics = evaluate(state.student, features, target.hidden_labels, n_known).as_dict()
            sep_acc = _separation_balanced_acc(sep, target.hidden_labels)
        report = EpochReport(
            epoch=epoch, n_known=int(len(sep.known_idx)), n_unknown=int(len(sep.unknown_idx)),
            gmm=sep.fit.as_dict(), degenerate=bool(sep.fit.degenerate),
            losses=mean_breakdown(breakdowns).as_dict(), metrics=metrics,
            separation_balanced_acc=sep_acc, gamma=float(state.curriculum.gamma), m=m,
            zeta2=float(zeta2), lr=float(lr), triplet_skipped=skipped,
            wall_clock=time.perf_counter() - t0,
        )
        state.reports.append(report)
        if metrics is not None:
            log.info("epoch %d  known %d  unknown %d  OS* %.3f  UNK %s  HOS %s", epoch, report.n_known,
                     report.n_unknown, metrics["os_star"], metrics["unk"], metrics["hos"])
        if checkpoint_path is not None:
            save_adapt_state(checkpoint_path, state, config)

    return AdaptResult(state.student, state.teacher, state.reports, state)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def save_model(path, params: ModelParams, seed: int, meta: dict | None = None) -> None:
    info = {MODEL_ACTIVATIONS_KEY: params.activations}
    info.update(meta or {})
    checkpoint.save(path, params.arrays(), "model", seed, info)


def load_model(path) -> tuple[ModelParams, dict]:
    arrays, header = checkpoint.load(path, kind="model")
    return ModelParams.from_arrays(arrays, header["meta"][MODEL_ACTIVATIONS_KEY]), header


def save_adapt_state(path, state: AdaptState, config: RunConfig) -> None:
    arrays = {}
    arrays.update({f"student/{k}": v for k, v in state.student.arrays().items()})
    arrays.update({f"teacher/{k}": v for k, v in state.teacher.arrays().items()})
    arrays.update({f"optim/{k}": v for k, v in state.optimizer.state_arrays().items()})
    meta = {
        "config_hash": config.hash(),
        "epoch": state.epoch,
        "iteration": state.iteration,
        MODEL_ACTIVATIONS_KEY: state.student.activations,
        "curriculum": dataclasses.asdict(state.curriculum),
        "prev_fit": None if state.prev_fit is None else state.prev_fit.as_dict(),
        "reports": [r.as_dict() for r in state.reports],
    }
    checkpoint.save(path, arrays, "adapt-state", config.seed, meta)


def load_adapt_state(path, config: RunConfig) -> AdaptState:
    arrays, header = checkpoint.load(path, kind="adapt-state")
    meta = header["meta"]
    if meta["config_hash"] != config.hash():
        raise IntegrityError(
            f"{path}: checkpoint config hash {meta['config_hash']} does not match {config.hash()}; refusing to resume")

    def sub(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    acts = meta[MODEL_ACTIVATIONS_KEY]
    student = ModelParams.from_arrays(sub("student/"), acts)
    teacher = ModelParams.from_arrays(sub("teacher/"), acts)
    opt = SGD(student, config.adapt.momentum, config.adapt.weight_decay)
    opt.load_state_arrays(sub("optim/"))
    pf = meta["prev_fit"]
    prev_fit = None if pf is None else GmmFit(**pf)
    return AdaptState(meta["epoch"], meta["iteration"], student, teacher, opt,
                      CurriculumState(**meta["curriculum"]), prev_fit,
                      [EpochReport.from_dict(r) for r in meta["reports"]])
