"""Synthetic open-set domain-shift data, delimited-text dataset files and feature-space augmentation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from sfosda.errors import GenerationError, InvalidInputError, ParseError, SchemaError
from sfosda.numerics import Rng

DATASET_HEADER = "# sfosda-dataset v1"


@dataclass
class LabeledSet:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise InvalidInputError("a labeled set needs at least one sample")
        if len(self.labels) != len(self.features):
            raise InvalidInputError("features and labels differ in length")
        if np.any(np.isnan(self.features)):
            raise InvalidInputError("features contain NaN")
        if np.any(self.labels < 0) or np.any(self.labels >= self.class_count):
            raise SchemaError(f"labels must lie in [0, {self.class_count - 1}]")

    def __len__(self):
        return len(self.features)


@dataclass
class UnlabeledSet:
    """Target-domain samples.

    ``hidden_labels`` (known class id, or ``n_known`` for unknown) exists for
    evaluation only; adaptation code reads ``features`` and nothing else.
    """

    features: np.ndarray
    n_known: int
    hidden_labels: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) < 1:
            raise InvalidInputError("an unlabeled set needs at least one sample")
        if np.any(np.isnan(self.features)):
            raise InvalidInputError("features contain NaN")
        if self.hidden_labels is not None:
            self.hidden_labels = np.asarray(self.hidden_labels, dtype=np.int64)
            if len(self.hidden_labels) != len(self.features):
                raise InvalidInputError("features and hidden labels differ in length")
            if np.any(self.hidden_labels < 0) or np.any(self.hidden_labels > self.n_known):
                raise SchemaError(f"hidden labels must lie in [0, {self.n_known}]")

    def __len__(self):
        return len(self.features)

    @property
    def unknown_label(self) -> int:
        return self.n_known


# ----------------------------------------------------------------------------
# synthetic generation
# ----------------------------------------------------------------------------

@dataclass
class SourceSpec:
    n_classes: int = 4
    dim: int = 2
    n: int = 800
    radius: float = 4.0
    sigma: float = 0.4
    seed: int = 0


@dataclass
class ShiftSpec:
    rotation_deg: float = 25.0
    translation: list[float] = field(default_factory=lambda: [0.5, 0.0])
    scale: float = 1.0
    noise_factor: float = 1.5
    n: int = 800
    unknown_cluster_count: int = 2
    unknown_mixing_fraction: float = 0.25
    # unknown means keep at least this distance (in units of radius) from every known mean
    unknown_min_separation: float = 0.6
    # unknown means are drawn within this radius (units of radius) of the known centroid
    unknown_spread: float = 0.3
    seed: int = 1

    def validate(self):
        if not self.scale > 0:
            raise InvalidInputError("scale must be positive")
        if self.noise_factor < 0:
            raise InvalidInputError("noise factor must be non-negative")
        if self.n < 1:
            raise InvalidInputError("target size must be positive")
        if self.unknown_cluster_count < 0:
            raise InvalidInputError("unknown cluster count must be non-negative")
        if self.unknown_cluster_count > 0 and not 0.0 < self.unknown_mixing_fraction < 1.0:
            raise InvalidInputError("unknown mixing fraction must lie in (0, 1)")
        if self.unknown_cluster_count == 0 and self.unknown_mixing_fraction not in (0, 0.0):
            raise InvalidInputError("unknown mixing fraction needs at least one unknown cluster")


def class_means(spec: SourceSpec) -> np.ndarray:
    """Known-class means spaced evenly on a circle in the first two coordinates."""
    angles = 2.0 * np.pi * np.arange(spec.n_classes) / spec.n_classes
    means = np.zeros((spec.n_classes, spec.dim))
    means[:, 0] = spec.radius * np.cos(angles)
    means[:, 1] = spec.radius * np.sin(angles)
    return means


def _split_counts(total: int, parts: int) -> np.ndarray:
    counts = np.full(parts, total // parts)
    counts[: total % parts] += 1
    return counts


def generate_source(spec: SourceSpec, rng: Rng | None = None) -> LabeledSet:
    if spec.n_classes < 2 or spec.dim < 2:
        raise InvalidInputError("need at least 2 classes and 2 dimensions")
    if spec.n < 1:
        raise InvalidInputError("requested sample count must be positive")
    if spec.radius == 0 and spec.sigma == 0:
        raise InvalidInputError("radius 0 with sigma 0 collapses every class onto one point")
    if spec.sigma < 0 or spec.radius < 0:
        raise InvalidInputError("radius and sigma must be non-negative")
    rng = rng or Rng(spec.seed)
    means = class_means(spec)
    labels = np.repeat(np.arange(spec.n_classes), _split_counts(spec.n, spec.n_classes))
    noise = rng.stream("source-noise").normal(size=(spec.n, spec.dim))
    x = means[labels] + spec.sigma * noise
    order = rng.stream("source-order").permutation(spec.n)
    return LabeledSet(x[order], labels[order], spec.n_classes)


def shift_points(points: np.ndarray, shift: ShiftSpec) -> np.ndarray:
    """Rotate (first two coordinates), scale, then translate."""
    theta = np.deg2rad(shift.rotation_deg)
    out = np.array(points, dtype=np.float64, copy=True)
    c, s = np.cos(theta), np.sin(theta)
    x0, x1 = out[..., 0].copy(), out[..., 1].copy()
    out[..., 0] = c * x0 - s * x1
    out[..., 1] = s * x0 + c * x1
    out *= shift.scale
    t = np.zeros(out.shape[-1])
    tv = np.asarray(shift.translation, dtype=np.float64)
    t[: len(tv)] = tv
    return out + t


def place_unknown_means(known: np.ndarray, shift: ShiftSpec, radius: float, rng: Rng,
                        max_tries: int = 10_000) -> np.ndarray:
    centre = known.mean(axis=0)
    min_sep = shift.unknown_min_separation * radius * shift.scale
    spread = shift.unknown_spread * radius * shift.scale
    placed: list[np.ndarray] = []
    for _ in range(max_tries):
        if len(placed) == shift.unknown_cluster_count:
            break
        ang = rng.uniform(0.0, 2.0 * np.pi)
        r = spread * np.sqrt(rng.uniform())
        cand = centre.copy()
        cand[0] += r * np.cos(ang)
        cand[1] += r * np.sin(ang)
        if np.min(np.linalg.norm(known - cand, axis=1)) >= min_sep:
            placed.append(cand)
    if len(placed) < shift.unknown_cluster_count:
        raise GenerationError(
            f"placed only {len(placed)} of {shift.unknown_cluster_count} unknown clusters "
            f"at separation {min_sep:.3g} after {max_tries} tries"
        )
    return np.array(placed).reshape(shift.unknown_cluster_count, known.shape[1])


def generate_target(source_spec: SourceSpec, shift: ShiftSpec, rng: Rng | None = None) -> UnlabeledSet:
    shift.validate()
    rng = rng or Rng(shift.seed)
    known_means = shift_points(class_means(source_spec), shift)
    n_unknown = int(round(shift.unknown_mixing_fraction * shift.n)) if shift.unknown_cluster_count else 0
    n_known = shift.n - n_unknown
    labels = np.repeat(np.arange(source_spec.n_classes), _split_counts(n_known, source_spec.n_classes))
    means = known_means[labels]
    if n_unknown:
        unk_means = place_unknown_means(known_means, shift, source_spec.radius, rng.stream("unknown-placement"))
        which = np.repeat(np.arange(shift.unknown_cluster_count), _split_counts(n_unknown, shift.unknown_cluster_count))
        means = np.vstack([means, unk_means[which]])
        labels = np.concatenate([labels, np.full(n_unknown, source_spec.n_classes)])
    sigma = source_spec.sigma * shift.noise_factor * shift.scale
    x = means + sigma * rng.stream("target-noise").normal(size=means.shape)
    order = rng.stream("target-order").permutation(shift.n)
    return UnlabeledSet(x[order], source_spec.n_classes, labels[order])


# ----------------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------------

@dataclass
class AugmentPolicy:
    kind: str = "weak"
    gaussian_sigma: float | np.ndarray = 0.0
    dropout_prob: float = 0.0
    scale_jitter: float = 0.0

    def __post_init__(self):
        if self.kind not in ("weak", "strong"):
            raise InvalidInputError(f"policy kind must be weak or strong, got {self.kind!r}")
        if np.any(np.asarray(self.gaussian_sigma) < 0):
            raise InvalidInputError("gaussian sigma must be non-negative")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise InvalidInputError("dropout probability must lie in [0, 1)")
        if self.scale_jitter < 0:
            raise InvalidInputError("scale jitter must be non-negative")


def weak_policy(feature_std, sigma: float = 0.05) -> AugmentPolicy:
    return AugmentPolicy("weak", sigma * np.asarray(feature_std, dtype=np.float64))


def strong_policy(feature_std, sigma: float = 0.2, dropout: float = 0.1, jitter: float = 0.1) -> AugmentPolicy:
    return AugmentPolicy("strong", sigma * np.asarray(feature_std, dtype=np.float64), dropout, jitter)


def augment_batch(x: np.ndarray, policy: AugmentPolicy, rng: Rng) -> np.ndarray:
    """Per-row scale jitter, additive Gaussian noise, then inverted coordinate dropout.

    Draws happen in a fixed order (jitter, noise, dropout) so results depend on
    the stream state only.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    out = x * (1.0 + policy.scale_jitter * rng.normal(size=(n, 1)))
    out = out + np.asarray(policy.gaussian_sigma) * rng.normal(size=(n, d))
    if policy.dropout_prob > 0:
        keep = rng.random(size=(n, d)) >= policy.dropout_prob
        out = np.where(keep, out / (1.0 - policy.dropout_prob), 0.0)
    return out


def augment(x, policy: AugmentPolicy, rng: Rng) -> np.ndarray:
    return augment_batch(np.asarray(x, dtype=np.float64)[None, :], policy, rng)[0]


# ----------------------------------------------------------------------------
# delimited-text files
# ----------------------------------------------------------------------------

def save_dataset(path, dataset: LabeledSet | UnlabeledSet, comment: str | None = None) -> None:
    """Write ``f_0..f_{d-1}[,label]`` with a version line and optional comment lines."""
    feats = dataset.features
    labels = dataset.labels if isinstance(dataset, LabeledSet) else dataset.hidden_labels
    buf = io.StringIO()
    buf.write(DATASET_HEADER + "\n")
    if isinstance(dataset, LabeledSet):
        buf.write(f"# kind=labeled classes={dataset.class_count}\n")
    else:
        buf.write(f"# kind=unlabeled known_classes={dataset.n_known}\n")
    if comment:
        for line in comment.splitlines():
            buf.write(f"# {line}\n")
    cols = [f"f_{j}" for j in range(feats.shape[1])] + (["label"] if labels is not None else [])
    buf.write(",".join(cols) + "\n")
    for i in range(len(feats)):
        row = [repr(float(v)) for v in feats[i]]
        if labels is not None:
            row.append(str(int(labels[i])))
        buf.write(",".join(row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_dataset(path, kind: str = "labeled", n_classes: int | None = None) -> LabeledSet | UnlabeledSet:
    """Parse a dataset file.

    ``kind="labeled"`` needs a label column and returns a LabeledSet with
    ``n_classes`` classes (inferred if None).  ``kind="unlabeled"`` returns an
    UnlabeledSet with ``n_classes`` known classes; a label column, if present,
    becomes the hidden evaluation labels.
    """
    if kind not in ("labeled", "unlabeled"):
        raise InvalidInputError(f"unknown dataset kind {kind!r}")
    path = Path(path)
    header = None
    rows: list[list[float]] = []
    labels: list[int] = []
    with path.open(encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            fields = next(csv.reader([stripped]))
            if header is None:
                header = [f.strip() for f in fields]
                n_feat = sum(1 for h in header if h.startswith("f_"))
                if n_feat < 1 or header[:n_feat] != [f"f_{j}" for j in range(n_feat)]:
                    raise ParseError(f"header must start with f_0..f_{{d-1}}, got {header}", lineno)
                has_label = header[n_feat:] == ["label"]
                if len(header) != n_feat + has_label:
                    raise ParseError(f"unexpected columns {header[n_feat:]}", lineno)
                continue
            if len(fields) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(fields)}", lineno)
            try:
                feat = [float(v) for v in fields[:n_feat]]
            except ValueError as exc:
                raise ParseError(f"non-numeric feature value ({exc})", lineno) from None
            if not all(np.isfinite(feat)):
                raise ParseError("non-finite feature value", lineno)
            rows.append(feat)
            if has_label:
                try:
                    labels.append(int(fields[n_feat]))
                except ValueError:
                    raise ParseError(f"label {fields[n_feat]!r} is not an integer", lineno) from None
    if header is None:
        raise ParseError("missing header row")
    if not rows:
        raise ParseError("file has a header but no samples")
    x = np.array(rows, dtype=np.float64)
    y = np.array(labels, dtype=np.int64) if labels else None
    if kind == "labeled":
        if y is None:
            raise SchemaError("labeled dataset requires a label column")
        c = n_classes if n_classes is not None else int(y.max()) + 1
        return LabeledSet(x, y, c)
    if n_classes is None:
        if y is None:
            raise SchemaError("known class count required for an unlabeled set without labels")
        n_classes = int(y.max())
    return UnlabeledSet(x, n_classes, y)
