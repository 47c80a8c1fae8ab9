"""Feed-forward encoder + linear classifier with explicit backprop.

Layer ``i`` maps ``h -> act_i(h @ W_i.T + b_i)``.  Every layer but the last is
the encoder (hidden tanh layers followed by a linear bottleneck); the last
layer is the classifier.  Target models carry one extra classifier row for
the unknown class.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sfosda.errors import InvalidInputError, NumericAbort
from sfosda.numerics import Rng

ACTIVATIONS = ("tanh", "linear")


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]
    weight_masks: list[np.ndarray] = field(default=None)
    bias_masks: list[np.ndarray] = field(default=None)

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)) or not self.weights:
            raise InvalidInputError("weights, biases and activations must be equally long and non-empty")
        for i, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise InvalidInputError(f"layer {i}: weight {w.shape} and bias {b.shape} do not agree")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidInputError(f"layer {i} input width {w.shape[1]} != previous output {self.weights[i - 1].shape[0]}")
            if act not in ACTIVATIONS:
                raise InvalidInputError(f"unknown activation {act!r}")
        if self.weight_masks is None:
            self.weight_masks = [np.ones(w.shape, dtype=bool) for w in self.weights]
        if self.bias_masks is None:
            self.bias_masks = [np.ones(b.shape, dtype=bool) for b in self.biases]
        for w, m in zip(self.weights, self.weight_masks):
            if m.shape != w.shape:
                raise InvalidInputError("weight mask shape mismatch")
        for b, m in zip(self.biases, self.bias_masks):
            if m.shape != b.shape:
                raise InvalidInputError("bias mask shape mismatch")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def encoder_depth(self) -> int:
        return len(self.weights) - 1

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "ModelParams":
        return ModelParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            list(self.activations),
            [m.copy() for m in self.weight_masks],
            [m.copy() for m in self.bias_masks],
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Named tensors, in a stable order, for checkpointing."""
        out = {}
        for i in range(self.n_layers):
            out[f"W{i}"] = self.weights[i]
            out[f"b{i}"] = self.biases[i]
            out[f"W{i}_mask"] = self.weight_masks[i]
            out[f"b{i}_mask"] = self.bias_masks[i]
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], activations: list[str]) -> "ModelParams":
        n = len(activations)
        return cls(
            [np.array(arrays[f"W{i}"], dtype=np.float64) for i in range(n)],
            [np.array(arrays[f"b{i}"], dtype=np.float64) for i in range(n)],
            list(activations),
            [np.array(arrays[f"W{i}_mask"], dtype=bool) for i in range(n)],
            [np.array(arrays[f"b{i}_mask"], dtype=bool) for i in range(n)],
        )

    def same_as(self, other: "ModelParams") -> bool:
        """Bitwise equality of all parameters."""
        return all(np.array_equal(a, b) for a, b in zip(self.weights + self.biases, other.weights + other.biases))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)


@dataclass
class ForwardTrace:
    params: ModelParams
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # pre-activations of each layer
    logits: np.ndarray

    @property
    def features(self) -> np.ndarray:
        """Bottleneck output: input of the classifier layer."""
        return self.inputs[-1]

    @property
    def batch_size(self) -> int:
        return self.logits.shape[0]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "Gradients":
        return cls([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.weights + self.biases)


def _act(name, a):
    return np.tanh(a) if name == "tanh" else a


def init_mlp(sizes: list[int], activations: list[str], rng: Rng) -> ModelParams:
    """Glorot-uniform weights, zero biases. ``sizes`` lists widths from input to output."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases, list(activations))


def init_source_model(d_in: int, n_classes: int, rng: Rng, hidden: int = 32, n_hidden: int = 2,
                      bottleneck: int = 16) -> ModelParams:
    """Default architecture: ``n_hidden`` tanh layers, linear bottleneck, linear classifier."""
    sizes = [d_in] + [hidden] * n_hidden + [bottleneck, n_classes]
    acts = ["tanh"] * n_hidden + ["linear", "linear"]
    return init_mlp(sizes, acts, rng)


def forward(params: ModelParams, x) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_in:
        raise InvalidInputError(f"input shape {x.shape} does not match model input width {params.d_in}")
    inputs, pre = [], []
    h = x
    for w, b, act in zip(params.weights, params.biases, params.activations):
        inputs.append(h)
        a = h @ w.T + b
        pre.append(a)
        h = _act(act, a)
    return h, ForwardTrace(params, inputs, pre, h)


def predict_logits(params: ModelParams, x) -> np.ndarray:
    return forward(params, x)[0]


def backward(trace: ForwardTrace, d_logits, d_features=None) -> Gradients:
    """Reverse-mode gradients of a loss given dL/dlogits (and optionally dL/dfeatures).

    Entries where the parameter's trainable mask is false come back as zero.
    """
    params = trace.params
    d = np.asarray(d_logits, dtype=np.float64)
    if d.shape != trace.logits.shape:
        raise InvalidInputError(f"d_logits shape {d.shape} != logits shape {trace.logits.shape}")
    if d_features is not None and np.shape(d_features) != trace.features.shape:
        raise InvalidInputError("d_features shape does not match bottleneck output")
    n = params.n_layers
    gw: list[np.ndarray] = [None] * n
    gb: list[np.ndarray] = [None] * n
    dh = d
    for i in range(n - 1, -1, -1):
        if params.activations[i] == "tanh":
            da = dh * (1.0 - np.tanh(trace.pre[i]) ** 2)
        else:
            da = dh
        gw[i] = np.where(params.weight_masks[i], da.T @ trace.inputs[i], 0.0)
        gb[i] = np.where(params.bias_masks[i], da.sum(axis=0), 0.0)
        if i > 0:
            dh = da @ params.weights[i]
            if i == n - 1 and d_features is not None:
                dh = dh + d_features
    return Gradients(gw, gb)


def init_target_models(source: ModelParams, freeze_known_bias: bool = True) -> tuple[ModelParams, ModelParams]:
    """Student and teacher with an extra unknown-class classifier row.

    Known rows are copied from the source classifier and frozen; the unknown row
    starts with zero weights and the mean known bias.
    """
    enc_w = [w.copy() for w in source.weights[:-1]]
    enc_b = [b.copy() for b in source.biases[:-1]]
    w_cls, b_cls = source.weights[-1], source.biases[-1]
    c_s, width = w_cls.shape
    w_t = np.vstack([w_cls, np.zeros((1, width))])
    b_t = np.append(b_cls, b_cls.mean())
    wm = np.zeros(w_t.shape, dtype=bool)
    wm[c_s] = True
    bm = np.zeros(b_t.shape, dtype=bool) if freeze_known_bias else np.ones(b_t.shape, dtype=bool)
    bm[c_s] = True
    student = ModelParams(
        enc_w + [w_t],
        enc_b + [b_t],
        list(source.activations),
        [np.ones(w.shape, dtype=bool) for w in enc_w] + [wm],
        [np.ones(b.shape, dtype=bool) for b in enc_b] + [bm],
    )
    return student, student.copy()


class SGD:
    """Momentum SGD with coupled weight decay (``g + wd * w``), masked per parameter."""

    def __init__(self, params: ModelParams, momentum: float = 0.9, weight_decay: float = 1e-3):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.vw = [np.zeros_like(w) for w in params.weights]
        self.vb = [np.zeros_like(b) for b in params.biases]

    def step(self, params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
        return sgd_step(params, grads, lr, self.momentum, self.weight_decay, self)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"vW{i}": v for i, v in enumerate(self.vw)}
        out.update({f"vb{i}": v for i, v in enumerate(self.vb)})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.vw = [np.array(arrays[f"vW{i}"], dtype=np.float64) for i in range(len(self.vw))]
        self.vb = [np.array(arrays[f"vb{i}"], dtype=np.float64) for i in range(len(self.vb))]


def sgd_step(params: ModelParams, grads: Gradients, lr: float, momentum: float, weight_decay: float,
             state: SGD) -> ModelParams:
    """One momentum-SGD update; velocity buffers in ``state`` are updated in place."""
    if not lr > 0:
        raise InvalidInputError("learning rate must be positive")
    if not grads.all_finite():
        raise NumericAbort("non-finite gradient")
    out = params.copy()
    for i in range(params.n_layers):
        for p, g, m, v in (
            (out.weights[i], grads.weights[i], params.weight_masks[i], state.vw[i]),
            (out.biases[i], grads.biases[i], params.bias_masks[i], state.vb[i]),
        ):
            step = np.where(m, g + weight_decay * p, 0.0)
            v *= momentum
            v += step
            p -= lr * np.where(m, v, 0.0)
    return out


def ema_update(teacher: ModelParams, student: ModelParams, m: float) -> ModelParams:
    if not 0.0 <= m <= 1.0:
        raise InvalidInputError(f"EMA momentum {m} outside [0, 1]")
    if [w.shape for w in teacher.weights] != [w.shape for w in student.weights]:
        raise InvalidInputError("teacher and student shapes differ")
    out = teacher.copy()
    out.weights = [_blend(t, s, m) for t, s in zip(teacher.weights, student.weights)]
    out.biases = [_blend(t, s, m) for t, s in zip(teacher.biases, student.biases)]
    return out


def _blend(t: np.ndarray, s: np.ndarray, m: float) -> np.ndarray:
    # equal entries stay bitwise equal; rounding may not leave [min, max]
    mixed = np.clip(m * t + (1.0 - m) * s, np.minimum(t, s), np.maximum(t, s))
    return np.where(t == s, t, mixed)


EMA_SCHEDULES = ("inverse", "constant")


def ema_momentum_schedule(epoch: int, m_max: float = 0.9995, kind: str = "inverse") -> float:
    """m(N) = min(m_max, 1 - 1/(N+1)) for ``inverse``; m_max throughout for ``constant``."""
    if epoch < 1:
        raise InvalidInputError("epoch numbering starts at 1")
    if kind not in EMA_SCHEDULES:
        raise InvalidInputError(f"EMA schedule must be one of {EMA_SCHEDULES}")
    if kind == "constant":
        return m_max
    return min(m_max, 1.0 - 1.0 / (epoch + 1))
