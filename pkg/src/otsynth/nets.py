"""Conditional feature generator and cosine classifier, with explicit
forward/backward passes and a momentum-SGD update.

The generator maps a real feature concatenated with Gaussian noise through
a small stack of fully-connected layers. The classifier scores a feature
by scaled cosine similarity against one prototype vector per class; rows
listed in ``frozen_rows`` never move, including under weight decay and
momentum.

Everything here is plain numpy in double precision. Single vectors and
(B, d) batches are both accepted wherever a feature argument appears.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (DimensionMismatch, EmptyInitClass, LabelOutOfRange,
                     ShapeMismatch, StaleCache, ZeroNormVector)
from .numerics import PROB_FLOOR, softmax
from .rng import RngState

# --- generator ---------------------------------------------------------------


@dataclass
class GeneratorParams:
    """Fully-connected layer stack: activation after all but the last layer."""

    weights: list            # each (out, in)
    biases: list             # each (out,)
    activation: str = "leaky_relu"
    leaky_slope: float = 0.1

    def __post_init__(self):
        if self.activation not in ("relu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise ShapeMismatch(f"layer {i}: weight/bias rows disagree")
            if i > 0 and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeMismatch(f"layer {i}: input width breaks the chain")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def feature_dim(self) -> int:
        """d such that the generator consumes [x; z] with x, z in R^d."""
        return self.input_dim // 2

    def copy(self) -> "GeneratorParams":
        return GeneratorParams([W.copy() for W in self.weights],
                               [b.copy() for b in self.biases],
                               self.activation, self.leaky_slope)

    def as_list(self) -> list:
        return list(self.weights) + list(self.biases)

    def replace_list(self, arrays: list) -> "GeneratorParams":
        n = len(self.weights)
        return GeneratorParams(list(arrays[:n]), list(arrays[n:]),
                               self.activation, self.leaky_slope)


def init_generator(dim: int, rng: RngState, hidden: tuple = None,
                   activation: str = "leaky_relu",
                   leaky_slope: float = 0.1) -> GeneratorParams:
    """Uniform fan-in init for the default 2d -> 2d -> 2d -> d stack."""
    if hidden is None:
        hidden = (2 * dim, 2 * dim)
    widths = [2 * dim, *hidden, dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths, widths[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.generator.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.generator.uniform(-bound, bound, size=fan_out))
    return GeneratorParams(weights, biases, activation, leaky_slope)


class GenCache:
    """Layer inputs and pre-activations captured by a forward pass."""

    __slots__ = ("params", "inputs", "preacts", "squeeze")

    def __init__(self, params, inputs, preacts, squeeze):
        self.params = params
        self.inputs = inputs
        self.preacts = preacts
        self.squeeze = squeeze


def _act(params: GeneratorParams, s: np.ndarray) -> np.ndarray:
    if params.activation == "relu":
        return np.maximum(s, 0.0)
    return np.where(s > 0, s, params.leaky_slope * s)


def _act_grad(params: GeneratorParams, s: np.ndarray) -> np.ndarray:
    if params.activation == "relu":
        return (s > 0).astype(np.float64)
    return np.where(s > 0, 1.0, params.leaky_slope)


def gen_forward(params: GeneratorParams, x, z):
    """Synthesize features from [x; z]; returns (output, cache).

    ``x`` and ``z`` are each (d,) or (B, d); the output matches.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    squeeze = x.ndim == 1
    X = np.atleast_2d(x)
    Z = np.atleast_2d(z)
    if X.shape != Z.shape or X.shape[1] != params.feature_dim:
        raise DimensionMismatch(
            f"expected x and z of width {params.feature_dim}, "
            f"got {X.shape} and {Z.shape}")
    a = np.concatenate([X, Z], axis=1)
    inputs, preacts = [], []
    last = len(params.weights) - 1
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(a)
        s = a @ W.T + b
        preacts.append(s)
        a = s if i == last else _act(params, s)
    out = a[0] if squeeze else a
    return out, GenCache(params, inputs, preacts, squeeze)


def gen_backward(params: GeneratorParams, cache: GenCache, upstream):
    """Reverse-mode gradients of a scalar loss with x-hat-gradient ``upstream``.

    Returns (weight_grads, bias_grads) matching the layer list.
    """
    if cache.params is not params:
        raise StaleCache("cache was produced by different generator parameters")
    delta = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if delta.shape != cache.preacts[-1].shape:
        raise ShapeMismatch("upstream gradient shape does not match the forward pass")
    w_grads = [None] * len(params.weights)
    b_grads = [None] * len(params.biases)
    for i in range(len(params.weights) - 1, -1, -1):
        w_grads[i] = delta.T @ cache.inputs[i]
        b_grads[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ params.weights[i]) * _act_grad(params, cache.preacts[i - 1])
    return w_grads, b_grads


# --- cosine classifier -------------------------------------------------------


@dataclass
class ClassifierParams:
    """Per-class prototypes scored by scaled cosine similarity.

    ``class_ids[row]`` maps prototype rows to dataset class ids;
    ``frozen_rows`` lists rows excluded from every update.
    """

    prototypes: np.ndarray          # (C, d)
    scale: float = 20.0
    frozen_rows: frozenset = frozenset()
    class_ids: tuple = ()

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.scale <= 0:
            raise ValueError("scale must be > 0")
        norms = np.linalg.norm(self.prototypes, axis=1)
        if np.any(norms == 0.0):
            raise ZeroNormVector("classifier prototype with zero norm")
        if not self.class_ids:
            self.class_ids = tuple(range(self.prototypes.shape[0]))
        if len(self.class_ids) != self.prototypes.shape[0]:
            raise ShapeMismatch("class_ids length must match prototype count")
        self.frozen_rows = frozenset(self.frozen_rows)

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]

    def row_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise LabelOutOfRange(f"classifier has no row for class {class_id}")

    def rows_of(self, labels: np.ndarray) -> np.ndarray:
        lut = {cid: row for row, cid in enumerate(self.class_ids)}
        try:
            return np.array([lut[int(c)] for c in labels], dtype=np.int64)
        except KeyError as e:
            raise LabelOutOfRange(f"classifier has no row for class {e.args[0]}")

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.prototypes.copy(), self.scale,
                                self.frozen_rows, self.class_ids)


def init_classifier(dim: int, class_ids, rng: RngState,
                    scale: float = 20.0) -> ClassifierParams:
    """Small-norm Gaussian prototypes, one row per class id."""
    class_ids = tuple(int(c) for c in class_ids)
    protos = 0.01 * rng.standard_normal((len(class_ids), dim))
    return ClassifierParams(protos, scale=scale, class_ids=class_ids)


def cls_forward(params: ClassifierParams, x) -> np.ndarray:
    """Scaled cosine-similarity logits; (C,) for a vector, (B, C) for a batch."""
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    X = np.atleast_2d(x)
    if X.shape[1] != params.dim:
        raise DimensionMismatch(
            f"feature width {X.shape[1]} vs classifier dim {params.dim}")
    nx = np.linalg.norm(X, axis=1)
    if np.any(nx == 0.0):
        raise ZeroNormVector("cannot classify a zero-norm feature")
    W = params.prototypes
    nw = np.linalg.norm(W, axis=1)
    logits = params.scale * (X @ W.T) / np.outer(nx, nw)
    return logits[0] if squeeze else logits


def cls_loss_and_grad(params: ClassifierParams, x, labels):
    """Cross-entropy of the cosine classifier plus exact gradients.

    Args:
        params: classifier; rows in ``frozen_rows`` get zero gradient.
        x: feature (d,) or batch (B, d).
        labels: row index (int) or (B,) row indices.

    Returns:
        (loss, prototype_gradients (C, d), input_gradient shaped like x).
        For a batch the loss and gradients are means over the batch.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    X = np.atleast_2d(x)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape[0] != X.shape[0]:
        raise ShapeMismatch("label count does not match feature count")
    if y.size and (y.min() < 0 or y.max() >= params.n_classes):
        raise LabelOutOfRange("label out of range for this classifier")

    nx = np.linalg.norm(X, axis=1)
    if np.any(nx == 0.0):
        raise ZeroNormVector("cannot classify a zero-norm feature")
    Xh = X / nx[:, None]
    W = params.prototypes
    nw = np.linalg.norm(W, axis=1)
    Wh = W / nw[:, None]

    B = X.shape[0]
    logits = params.scale * (Xh @ Wh.T)
    q = softmax(logits)
    picked = q[np.arange(B), y]
    loss = float(np.mean(-np.log(picked + PROB_FLOOR)))

    # gradient of the floored log matches the loss exactly
    rho = picked / (picked + PROB_FLOOR)
    dlogits = q.copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits *= (rho / B)[:, None]

    dWh = params.scale * (dlogits.T @ Xh)                       # (C, d)
    dW = (dWh - np.sum(dWh * Wh, axis=1, keepdims=True) * Wh) / nw[:, None]
    if params.frozen_rows:
        dW[sorted(params.frozen_rows)] = 0.0

    dXh = params.scale * (dlogits @ Wh)                         # (B, d)
    dX = (dXh - np.sum(dXh * Xh, axis=1, keepdims=True) * Xh) / nx[:, None]
    return loss, dW, (dX[0] if squeeze else dX)


def extend_classifier(base: ClassifierParams, novel_class_ids,
                      init_features=None, rng: RngState | None = None,
                      freeze_base: bool = True) -> ClassifierParams:
    """Append prototype rows for novel classes.

    With ``init_features`` (one array of shots per novel class) each new
    prototype is the normalized mean of that class's features; otherwise
    rows are small-norm Gaussian draws from ``rng``. Base rows join
    ``frozen_rows`` when ``freeze_base`` is set.
    """
    novel_class_ids = tuple(int(c) for c in novel_class_ids)
    if len(novel_class_ids) < 1:
        raise ValueError("need at least one novel class")
    overlap = set(novel_class_ids) & set(base.class_ids)
    if overlap:
        raise ValueError(f"novel classes already present: {sorted(overlap)}")

    rows = []
    if init_features is not None:
        if len(init_features) != len(novel_class_ids):
            raise ShapeMismatch("one init feature list per novel class required")
        for cid, feats in zip(novel_class_ids, init_features):
            F = np.atleast_2d(np.asarray(feats, dtype=np.float64))
            if F.shape[0] == 0:
                raise EmptyInitClass(f"no init features for class {cid}")
            mean = F.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0.0:
                raise ZeroNormVector(f"class {cid} init features average to zero")
            rows.append(mean / norm)
    else:
        if rng is None:
            raise ValueError("rng required when init_features is None")
        rows = list(0.01 * rng.standard_normal((len(novel_class_ids), base.dim)))

    protos = np.vstack([base.prototypes, np.asarray(rows)])
    frozen = set(base.frozen_rows)
    if freeze_base:
        frozen.update(range(base.n_classes))
    return ClassifierParams(protos, scale=base.scale,
                            frozen_rows=frozenset(frozen),
                            class_ids=base.class_ids + novel_class_ids)


# --- SGD ---------------------------------------------------------------------


@dataclass
class SgdConfig:
    """Momentum SGD with stepwise learning-rate multipliers."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: tuple = ()            # ((step, multiplier), ...)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        self.schedule = tuple((int(s), float(m)) for s, m in self.schedule)


def effective_lr(cfg: SgdConfig, step: int) -> float:
    lr = cfg.learning_rate
    for s, m in cfg.schedule:
        if step >= s:
            lr *= m
    return lr


def sgd_step(params: list, grads: list, cfg: SgdConfig,
             state: list | None, step: int):
    """One momentum-SGD update over a list of arrays.

    Returns (new_params, new_state); inputs are not mutated.
    """
    if len(params) != len(grads):
        raise ShapeMismatch("parameter/gradient list lengths differ")
    if state is None:
        state = [np.zeros_like(p) for p in params]
    lr = effective_lr(cfg, step)
    new_params, new_state = [], []
    for p, g, v in zip(params, grads, state):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} vs param {p.shape}")
        v = cfg.momentum * v + g + cfg.weight_decay * p
        new_state.append(v)
        new_params.append(p - lr * v)
    return new_params, new_state


def update_prototypes(params: ClassifierParams, grad: np.ndarray,
                      cfg: SgdConfig, state: np.ndarray | None, step: int):
    """Momentum-SGD step on the prototype matrix honoring frozen rows.

    Frozen rows are bitwise untouched: no gradient, no weight decay, no
    momentum accumulation.
    """
    if grad.shape != params.prototypes.shape:
        raise ShapeMismatch("prototype gradient shape mismatch")
    if state is None:
        state = np.zeros_like(params.prototypes)
    live = np.ones(params.n_classes, dtype=bool)
    if params.frozen_rows:
        live[sorted(params.frozen_rows)] = False
    lr = effective_lr(cfg, step)
    new_state = state.copy()
    new_protos = params.prototypes.copy()
    new_state[live] = (cfg.momentum * state[live] + grad[live]
                       + cfg.weight_decay * params.prototypes[live])
    new_protos[live] = params.prototypes[live] - lr * new_state[live]
    out = ClassifierParams(new_protos, scale=params.scale,
                           frozen_rows=params.frozen_rows,
                           class_ids=params.class_ids)
    return out, new_state


# --- checkpoints -------------------------------------------------------------


def _generator_to_doc(g: GeneratorParams) -> dict:
    return {
        "weights": [W.tolist() for W in g.weights],
        "biases": [b.tolist() for b in g.biases],
        "activation": g.activation,
        "leaky_slope": g.leaky_slope,
    }


def _classifier_to_doc(c: ClassifierParams) -> dict:
    return {
        "prototypes": c.prototypes.tolist(),
        "scale": c.scale,
        "frozen_rows": sorted(c.frozen_rows),
        "class_ids": list(c.class_ids),
    }


def save_checkpoint(path, generator: GeneratorParams | None = None,
                    classifier: ClassifierParams | None = None,
                    rng: RngState | None = None) -> None:
    """Write a self-describing JSON checkpoint (atomic; bit-exact doubles)."""
    if generator is not None:
        dim = generator.output_dim
    elif classifier is not None:
        dim = classifier.dim
    else:
        raise ValueError("nothing to checkpoint")
    doc = {
        "format": "otsynth-checkpoint",
        "version": 1,
        "dim": dim,
        "generator": None if generator is None else _generator_to_doc(generator),
        "classifier": None if classifier is None else _classifier_to_doc(classifier),
        "rng": None if rng is None else rng.state_dict(),
    }
    text = json.dumps(doc, indent=1)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)),
                               suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Read a checkpoint; returns (generator | None, classifier | None, rng | None)."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "otsynth-checkpoint":
        raise ValueError(f"{path} is not an otsynth checkpoint")
    gen = None
    if doc["generator"] is not None:
        gd = doc["generator"]
        gen = GeneratorParams(
            [np.array(W, dtype=np.float64) for W in gd["weights"]],
            [np.array(b, dtype=np.float64) for b in gd["biases"]],
            gd["activation"], gd["leaky_slope"])
    cls = None
    if doc["classifier"] is not None:
        cd = doc["classifier"]
        cls = ClassifierParams(np.array(cd["prototypes"], dtype=np.float64),
                               scale=cd["scale"],
                               frozen_rows=frozenset(cd["frozen_rows"]),
                               class_ids=tuple(cd["class_ids"]))
    rng = None
    if doc["rng"] is not None:
        rng = RngState.from_state_dict(doc["rng"])
    return gen, cls, rng
