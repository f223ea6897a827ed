"""Feed-forward softmax classifier trained with plain mini-batch gradient descent."""

import json
import logging
import warnings
from dataclasses import dataclass, field
from itertools import pairwise

import numpy as np

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Hyperparams:
    hidden: tuple = (64,)
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.1
    activation: str = "relu"  # "relu" | "identity"


@dataclass
class ClassifierModel:
    weights: list  # per layer, (fan_in, fan_out)
    biases: list
    activation: str = "relu"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=float) for w in self.weights]
        self.biases = [np.asarray(b, dtype=float) for b in self.biases]
        if self.activation not in ("relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layer_sizes(self):
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def num_classes(self):
        return self.weights[-1].shape[1]

    @property
    def num_inputs(self):
        return self.weights[0].shape[0]

    def params(self):
        return self.weights + self.biases

    def copy(self):
        return ClassifierModel([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                               self.activation, dict(self.metadata))

    def to_dict(self):
        return {
            "layer_sizes": self.layer_sizes,
            "activation": self.activation,
            "weights": [w.ravel().tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d):
        sizes = d["layer_sizes"]
        weights = [np.array(w, dtype=float).reshape(a, b) for w, a, b in zip(d["weights"], sizes[:-1], sizes[1:])]
        return cls(weights, d["biases"], d.get("activation", "relu"), d.get("metadata", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def init_model(layer_sizes, seed, activation="relu"):
    """Glorot-uniform weights, zero biases."""
    g = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in pairwise(layer_sizes):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(g.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ClassifierModel(weights, biases, activation)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(model, X):
    acts = [X]
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ W + b
        if i < last and model.activation == "relu":
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def predict_proba(model, features):
    X = np.asarray(features, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.num_inputs:
        raise ValueError(f"expected {model.num_inputs} features, got shape {X.shape}")
    return softmax(_forward(model, X)[-1])


def loss_and_grads(model, X, y):
    """Mean cross-entropy and its gradients (weights..., biases...)."""
    acts = _forward(model, X)
    logits = acts[-1]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(y)
    loss = -logp[np.arange(n), y].mean()

    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ model.weights[i].T
            if model.activation == "relu":
                delta = delta * (acts[i] > 0)
    return loss, gw + gb


def train(ds, hyperparams=None, seed=0, init=None):
    """Fit on ``ds`` (a LabeledDataset); returns a new ClassifierModel.

    ``init`` optionally supplies the starting parameters (copied).
    """
    hp = hyperparams or Hyperparams()
    X, y = ds.features, ds.labels
    K = ds.num_classes
    if len(y) == 0:
        raise ValueError("cannot train on an empty dataset")
    if y.max() >= K:
        raise ValueError("labels exceed num_classes")
    if init is None:
        model = init_model([X.shape[1], *hp.hidden, K], seed, hp.activation)
    else:
        model = init.copy()
    g = np.random.default_rng([seed, 1])
    n = len(y)
    history = []
    for epoch in range(hp.epochs):
        order = g.permutation(n)
        total = 0.0
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            loss, grads = loss_and_grads(model, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} (learning rate {hp.learning_rate}); "
                    "try a smaller learning rate"
                )
            for p, gr in zip(model.params(), grads):
                p -= hp.learning_rate * gr
            total += loss * len(idx)
        if not all(np.all(np.isfinite(p)) for p in model.params()):
            raise TrainingError(
                f"non-finite parameters after epoch {epoch} (learning rate {hp.learning_rate}); "
                "try a smaller learning rate"
            )
        history.append(total / n)
    model.metadata = {
        "epochs": hp.epochs,
        "batch_size": hp.batch_size,
        "learning_rate": hp.learning_rate,
        "hidden": list(hp.hidden),
        "seed": seed,
        "loss_history": history,
    }
    return model


def gradient_check(model, X, y, epsilon=1e-5, n_samples=50, seed=0, grad_fn=None):
    """Max relative error between analytic and central-difference gradients.

    Checks ``n_samples`` randomly chosen parameter entries.  ``grad_fn`` lets
    tests inject a faulty gradient.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        warnings.warn("gradient_check on an empty batch; returning 0", RuntimeWarning)
        return 0.0
    grad_fn = grad_fn or loss_and_grads
    model = model.copy()
    _, grads = grad_fn(model, X, y)
    params = model.params()
    g = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    picks = g.choice(sizes.sum(), size=min(n_samples, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(bounds, flat, side="right"))
        j = flat - (bounds[k - 1] if k else 0)
        p = params[k].reshape(-1)
        old = p[j]
        p[j] = old + epsilon
        up, _ = loss_and_grads(model, X, y)
        p[j] = old - epsilon
        down, _ = loss_and_grads(model, X, y)
        p[j] = old
        numeric = (up - down) / (2 * epsilon)
        analytic = grads[k].reshape(-1)[j]
        denom = max(abs(numeric), abs(analytic), 1e-6)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst
