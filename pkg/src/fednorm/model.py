"""MLP feature extractor with the classifier heads and losses under comparison.

Layer weights are stored as ``(out, in)`` matrices so that the classifier and
every extractor layer share one convention: a batch ``X`` of row vectors maps
to ``X @ W.T + b``. Logits are ``F @ classifier.T`` (no classifier bias).
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateNormError, DimensionError


class HeadKind(str, enum.Enum):
    STANDARD = "standard"
    NORMALIZED_FEATURE = "normalized_feature"
    FROZEN_ORTHONORMAL = "frozen_orthonormal"


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    MSE_ONE_HOT = "mse_one_hot"
    CROSS_ENTROPY_FEATURE_NORM = "cross_entropy_feature_norm"


@dataclass(frozen=True)
class HeadSpec:
    kind: HeadKind = HeadKind.STANDARD
    tau: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", HeadKind(self.kind))
        if not self.tau > 0:
            raise ConfigError("tau must be positive")


@dataclass(frozen=True)
class LossSpec:
    kind: LossKind = LossKind.CROSS_ENTROPY
    mu: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LossKind(self.kind))
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")

    def check_head(self, head: HeadSpec) -> None:
        if self.kind is LossKind.MSE_ONE_HOT and head.kind is not HeadKind.FROZEN_ORTHONORMAL:
            raise ConfigError("MSE loss requires the frozen orthonormal head")
        if self.kind is LossKind.CROSS_ENTROPY_FEATURE_NORM and head.kind is not HeadKind.STANDARD:
            raise ConfigError("feature-norm regularized loss requires the standard head")


@dataclass
class ModelParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    classifier: np.ndarray
    head: HeadSpec = field(default_factory=HeadSpec)
    frozen_classifier: bool = False

    def __post_init__(self):
        self.layers = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))
                       for w, b in self.layers]
        self.classifier = np.asarray(self.classifier, dtype=np.float64)
        if not self.layers:
            raise DimensionError("extractor needs at least one layer")
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != self.layers[i - 1][0].shape[0]:
                raise DimensionError(f"layer {i} input does not match previous output")
        if self.classifier.ndim != 2 or self.classifier.shape[1] != self.feature_dim:
            raise DimensionError("classifier columns must equal the feature dimension")
        if self.head.kind is HeadKind.FROZEN_ORTHONORMAL and self.frozen_classifier:
            # once unfrozen for fine-tuning the rows are free to move
            gram = self.classifier @ self.classifier.T
            if not np.allclose(gram, np.eye(self.num_classes), rtol=0, atol=1e-9):
                raise ConfigError("frozen orthonormal classifier rows are not orthonormal")

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1][0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier.shape[0]

    def copy(self) -> "ModelParams":
        return replace(self, layers=[(w.copy(), b.copy()) for w, b in self.layers],
                       classifier=self.classifier.copy())

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed order, classifier last."""
        out = []
        for w, b in self.layers:
            out += [w, b]
        out.append(self.classifier)
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def same_architecture(self, other: "ModelParams") -> bool:
        return (self.head == other.head and self.frozen_classifier == other.frozen_classifier
                and [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()])


def orthonormal_classifier_init(num_classes: int, dim: int, seed: int) -> np.ndarray:
    """Rows orthonormalized by modified Gram-Schmidt over a seeded Gaussian matrix."""
    if dim < num_classes:
        raise ConfigError(f"cannot fit {num_classes} orthonormal rows in dimension {dim}")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((num_classes, dim))
    for i in range(num_classes):
        # two passes keep the rows orthonormal to ~1e-15
        for _ in range(2):
            for j in range(i):
                q[i] -= (q[j] @ q[i]) * q[j]
        norm = np.linalg.norm(q[i])
        if norm < 1e-8:
            raise DegenerateNormError("random draw produced a dependent row")
        q[i] /= norm
    return q


def init_model(input_dim: int, layer_sizes, num_classes: int, head: HeadSpec | None = None,
               seed: int = 0, frozen_classifier: bool = False) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.

    ``layer_sizes`` lists every layer's output width; the last is the feature dim.
    """
    head = head or HeadSpec()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51ED]))
    layers = []
    fan_in = input_dim
    for width in layer_sizes:
        bound = 1.0 / np.sqrt(fan_in)
        layers.append((rng.uniform(-bound, bound, (width, fan_in)), rng.uniform(-bound, bound, width)))
        fan_in = width
    if head.kind is HeadKind.FROZEN_ORTHONORMAL:
        classifier = orthonormal_classifier_init(num_classes, fan_in, seed)
        frozen_classifier = True
    else:
        bound = 1.0 / np.sqrt(fan_in)
        classifier = rng.uniform(-bound, bound, (num_classes, fan_in))
    return ModelParams(layers, classifier, head, frozen_classifier)


# ------------------------------------------------------------ forward (numpy)

def extract_features(params: ModelParams, x) -> np.ndarray:
    """Output of the last linear layer; ReLU follows every earlier layer."""
    h = np.asarray(x, dtype=np.float64)
    if h.shape[-1] != params.input_dim:
        raise DimensionError(f"input dim {h.shape[-1]} != {params.input_dim}")
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def logits(params: ModelParams, f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    kind = params.head.kind
    if kind is HeadKind.STANDARD:
        return f @ params.classifier.T
    unit = f / T._row_norms(f)[..., None]
    z = unit @ params.classifier.T
    if kind is HeadKind.FROZEN_ORTHONORMAL:
        z = params.head.tau * z
    return z


def predict(params: ModelParams, x) -> np.ndarray:
    """Argmax class per row; ties resolve to the lowest index."""
    return np.argmax(logits(params, extract_features(params, x)), axis=-1)


# ---------------------------------------------------------- forward (on tape)

@dataclass
class BoundParams:
    """Parameter nodes for one forward pass; the classifier is a constant when frozen."""
    tape: T.Tape
    layers: list[tuple[T.Node, T.Node]]
    classifier: T.Node

    def trainable(self, params: ModelParams) -> list[T.Node]:
        nodes = [n for pair in self.layers for n in pair]
        if not params.frozen_classifier:
            nodes.append(self.classifier)
        return nodes


def bind(params: ModelParams, tape: T.Tape) -> BoundParams:
    layers = [(tape.watch(w), tape.watch(b)) for w, b in params.layers]
    return BoundParams(tape, layers, tape.watch(params.classifier))


def features_on_tape(bound: BoundParams, x) -> T.Node:
    h = x if isinstance(x, T.Node) else bound.tape.constant(np.atleast_2d(x))
    last = len(bound.layers) - 1
    for i, (w, b) in enumerate(bound.layers):
        h = T.add_bias(T.matmul(h, T.transpose(w)), b)
        if i < last:
            h = T.relu(h)
    return h


def logits_on_tape(head: HeadSpec, classifier: T.Node, f: T.Node) -> T.Node:
    if head.kind is not HeadKind.STANDARD:
        f = T.normalize(f)
    z = T.matmul(f, T.transpose(classifier))
    if head.kind is HeadKind.FROZEN_ORTHONORMAL and head.tau != 1.0:
        z = T.scale(z, head.tau)
    return z


def loss_on_tape(spec: LossSpec, head: HeadSpec, classifier: T.Node, f: T.Node, y) -> T.Node:
    spec.check_head(head)
    z = logits_on_tape(head, classifier, f)
    if spec.kind is LossKind.MSE_ONE_HOT:
        return T.mse_onehot(z, y)
    ce = T.softmax_cross_entropy(z, y)
    if spec.kind is LossKind.CROSS_ENTROPY_FEATURE_NORM and spec.mu > 0:
        reg = T.mean(T.l2_norm(f))
        return T.add(ce, T.scale(reg, spec.mu))
    return ce


def loss_and_grads(spec: LossSpec, params: ModelParams, x, y) -> tuple[float, list[np.ndarray | None]]:
    """Batch-mean loss and gradients aligned with ``params.arrays()``.

    The classifier slot is ``None`` when the classifier is frozen.
    """
    tape = T.Tape()
    bound = bind(params, tape)
    f = features_on_tape(bound, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    out = loss_on_tape(spec, params.head, bound.classifier, f, np.atleast_1d(y))
    grads = tape.gradient(out, bound.trainable(params))
    if params.frozen_classifier:
        grads.append(None)
    return float(out.value), grads


def loss(spec: LossSpec, params: ModelParams, x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    spec.check_head(params.head)
    f = extract_features(params, x)
    z = logits(params, f)
    y = np.asarray(y)
    tape = T.Tape()
    zn = tape.constant(z)
    if spec.kind is LossKind.MSE_ONE_HOT:
        return float(T.mse_onehot(zn, y).value)
    ce = float(T.softmax_cross_entropy(zn, y).value)
    if spec.kind is LossKind.CROSS_ENTROPY_FEATURE_NORM:
        ce += spec.mu * float(np.mean(T._row_norms(f)))
    return ce


def classifier_gradient(params: ModelParams, x, y) -> np.ndarray:
    """Closed-form CE gradient w.r.t. the classifier under the normalized-feature head.

    ``(softmax(z_hat) - onehot(y)) f_hat^T``, averaged over rows for a batch.
    """
    if params.head.kind is not HeadKind.NORMALIZED_FEATURE:
        raise ConfigError("closed-form classifier gradient is defined for the normalized-feature head")
    f = np.atleast_2d(extract_features(params, x))
    unit = f / T._row_norms(f)[:, None]
    p = T.softmax(unit @ params.classifier.T)
    y = np.atleast_1d(np.asarray(y))
    p[np.arange(len(y)), y] -= 1.0
    return p.T @ unit / len(y)


# ------------------------------------------------------------------ checkpoint

def params_to_dict(params: ModelParams, loss_spec: LossSpec | None = None, seed: int | None = None) -> dict:
    out = {
        "layers": [{"weight": {"shape": list(w.shape), "values": w.ravel().tolist()},
                    "bias": {"shape": list(b.shape), "values": b.ravel().tolist()}}
                   for w, b in params.layers],
        "classifier": {"shape": list(params.classifier.shape), "values": params.classifier.ravel().tolist()},
        "head": {"kind": params.head.kind.value, "tau": params.head.tau},
        "frozen_classifier": params.frozen_classifier,
    }
    if loss_spec is not None:
        out["loss"] = {"kind": loss_spec.kind.value, "mu": loss_spec.mu}
    if seed is not None:
        out["seed"] = seed
    return out


def _array(d: dict) -> np.ndarray:
    return np.array(d["values"], dtype=np.float64).reshape(d["shape"])


def params_from_dict(d: dict) -> ModelParams:
    layers = [(_array(layer["weight"]), _array(layer["bias"])) for layer in d["layers"]]
    head = HeadSpec(HeadKind(d["head"]["kind"]), float(d["head"]["tau"]))
    return ModelParams(layers, _array(d["classifier"]), head, bool(d["frozen_classifier"]))


def save_checkpoint(path, params: ModelParams, loss_spec: LossSpec | None = None, seed: int | None = None) -> None:
    # repr-based float output round-trips float64 exactly
    Path(path).write_text(json.dumps(params_to_dict(params, loss_spec, seed)))


def load_checkpoint(path) -> tuple[ModelParams, LossSpec | None, int | None]:
    d = json.loads(Path(path).read_text())
    spec = LossSpec(LossKind(d["loss"]["kind"]), float(d["loss"]["mu"])) if "loss" in d else None
    return params_from_dict(d), spec, d.get("seed")
