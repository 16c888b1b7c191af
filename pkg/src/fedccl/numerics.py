"""Dense MLP numerics.

The network is a plain ReLU multilayer perceptron split into a feature
extractor (the first ``split`` linear layers, each followed by ReLU) and a
classifier (the remaining layers).  Everything is float64 and gradients are
derived by hand, so finite-difference checks and bitwise determinism are
straightforward.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12

# An extra loss receives the (n, d) embedding batch and returns its scalar
# value together with d(value)/d(embeddings).
ExtraLoss = Callable[[np.ndarray], "tuple[float, np.ndarray]"]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    def __init__(self, layer: int, message: str | None = None):
        self.layer = layer
        super().__init__(message or f"non-finite activation at layer {layer}")


class DegenerateVectorWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 64
    local_epochs: int = 1
    temperature: float = 0.07
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            # zero is allowed: it is the optimizer no-op used in tests
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.local_epochs < 1:
            raise ValueError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class ModelParams:
    """Weights ``(in, out)`` and biases ``(out,)`` per linear layer.

    Layers ``[0, split)`` form the feature extractor; its output (after the
    ReLU of layer ``split - 1``) is the embedding.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    split: int

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix and at least one layer")
        if not 0 <= self.split < len(self.weights):
            raise ShapeError(f"split {self.split} out of range for {len(self.weights)} layers")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i}: input dim {w.shape[0]} != previous output "
                    f"{self.weights[i - 1].shape[1]}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def embedding_dim(self) -> int:
        return self.weights[self.split].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> ModelParams:
        return ModelParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.split
        )

    def zeros_like(self) -> ModelParams:
        return ModelParams(
            [np.zeros_like(w) for w in self.weights],
            [np.zeros_like(b) for b in self.biases],
            self.split,
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, vec: np.ndarray) -> ModelParams:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != sum(a.size for a in self.arrays()):
            raise ShapeError(f"flat vector of size {vec.size} does not match parameters")
        weights, biases, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            biases.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return ModelParams(weights, biases, self.split)

    def congruent(self, other: ModelParams) -> bool:
        return self.split == other.split and [a.shape for a in self.arrays()] == [
            a.shape for a in other.arrays()
        ]

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def equal(self, other: ModelParams) -> bool:
        """Bitwise equality of every entry."""
        return self.congruent(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


Gradients = ModelParams


def init_params(
    layer_sizes: Sequence[int], rng: np.random.Generator, split: int | None = None
) -> ModelParams:
    """He-normal weights, zero biases.

    ``layer_sizes`` lists every width from input to number of classes; the
    default split makes all but the last linear layer the feature extractor.
    """
    if len(layer_sizes) < 2:
        raise ShapeError("need at least input and output sizes")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if split is None:
        split = len(weights) - 1
    return ModelParams(weights, biases, split)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim of shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        warnings.warn("cosine similarity of a zero-norm vector", DegenerateVectorWarning, stacklevel=2)
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit-normalised rows and their norms; degenerate rows become zero."""
    norms = np.linalg.norm(x, axis=1)
    ok = norms >= NORM_EPS
    unit = np.zeros_like(x)
    unit[ok] = x[ok] / norms[ok, None]
    return unit, norms


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities; rows with zero norm compare as 0."""
    ua, _ = normalize_rows(np.atleast_2d(a))
    ub, _ = normalize_rows(np.atleast_2d(b))
    return ua @ ub.T


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def _check_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[1] != params.input_dim:
        raise ShapeError(f"batch of shape {batch.shape} for input dimension {params.input_dim}")
    return batch


def _forward_cache(params: ModelParams, batch: np.ndarray):
    acts = [batch]
    pre = []
    h = batch
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w + b
        if not np.isfinite(z).all():
            raise NumericError(i)
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
        acts.append(h)
    return acts, pre


def forward(params: ModelParams, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features, logits)`` for a batch of row vectors."""
    batch = _check_batch(params, batch)
    acts, _ = _forward_cache(params, batch)
    return acts[params.split], acts[-1]


def embed(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Embeddings only; skips the classifier layers."""
    h = _check_batch(params, x)
    for i in range(params.split):
        h = np.maximum(h @ params.weights[i] + params.biases[i], 0.0)
    return h


def predict_proba(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    return softmax(forward(params, batch)[1])


def predict(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    return forward(params, batch)[1].argmax(axis=1)


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(predict(params, x) == y))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    lp = log_softmax(logits)
    return float(-lp[np.arange(len(labels)), labels].mean())


def _objective(params, batch, labels, extra_losses, want_params, want_input):
    batch = _check_batch(params, batch)
    labels = np.asarray(labels)
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    if labels.shape != (n,):
        raise ShapeError(f"labels of shape {labels.shape} for batch of {n}")
    if labels.min() < 0 or labels.max() >= params.n_classes:
        raise ValueError(f"labels must lie in [0, {params.n_classes})")

    acts, pre = _forward_cache(params, batch)
    lp = log_softmax(acts[-1])
    rows = np.arange(n)
    value = float(-lp[rows, labels].mean())
    delta = np.exp(lp)
    delta[rows, labels] -= 1.0
    delta /= n

    features = acts[params.split]
    dfeat = None
    for extra in extra_losses:
        v, g = extra(features)
        value += float(v)
        dfeat = g if dfeat is None else dfeat + g

    grads = params.zeros_like() if want_params else None
    for i in range(params.n_layers - 1, -1, -1):
        if want_params:
            grads.weights[i] = acts[i].T @ delta
            grads.biases[i] = delta.sum(axis=0)
        if i == 0 and not want_input:
            break
        dh = delta @ params.weights[i].T
        if i == params.split and dfeat is not None:
            dh = dh + dfeat
        if i == 0:
            return value, grads, dh
        delta = dh * (pre[i - 1] > 0)
    return value, grads, None


def loss_and_grads(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    extra_losses: Sequence[ExtraLoss] = (),
) -> tuple[float, Gradients]:
    """Mean cross-entropy plus extra embedding losses, with exact gradients.

    Each extra loss is chained into the network at the feature-extractor
    output, so only its gradient with respect to the embeddings is needed.
    """
    value, grads, _ = _objective(params, batch, labels, extra_losses, True, False)
    return value, grads


def loss_and_input_grad(
    params: ModelParams,
    batch: np.ndarray,
    labels: np.ndarray,
    extra_losses: Sequence[ExtraLoss] = (),
) -> tuple[float, np.ndarray]:
    """Same objective as :func:`loss_and_grads`, differentiated w.r.t. the inputs."""
    value, _, dx = _objective(params, batch, labels, extra_losses, False, True)
    return value, dx


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    if not params.congruent(grads):
        raise ShapeError("parameters and gradients are not congruent")
    return ModelParams(
        [w - lr * g for w, g in zip(params.weights, grads.weights)],
        [b - lr * g for b, g in zip(params.biases, grads.biases)],
        params.split,
    )
