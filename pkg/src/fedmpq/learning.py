"""Desk-scale training substrate.

Models are stacks of dense layers whose weight matrix carries the bias as its
last row, so each layer is a single flat parameter vector with one shape.
Parameters are stored as float32; forward and backward passes run in
float64.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .seeding import derive_rng


# models --------------------------------------------------------------------


@dataclass
class Layer:
    name: str
    values: np.ndarray
    shape: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32).ravel()
        self.shape = tuple(int(s) for s in self.shape)
        if self.values.size != int(np.prod(self.shape)):
            raise ValueError(f"layer {self.name}: {self.values.size} values for shape {self.shape}")

    def matrix(self) -> np.ndarray:
        return self.values.reshape(self.shape)


@dataclass
class ModelState:
    layers: list
    round: int = 0

    def copy(self) -> "ModelState":
        return ModelState([Layer(l.name, l.values.copy(), l.shape) for l in self.layers], self.round)

    @property
    def sizes(self) -> list[int]:
        return [l.values.size for l in self.layers]

    def flat(self) -> np.ndarray:
        return np.concatenate([l.values for l in self.layers])

    def num_bytes(self) -> int:
        return 4 * sum(self.sizes)


def _augment(X: np.ndarray) -> np.ndarray:
    return np.hstack([X, np.ones((X.shape[0], 1))])


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = y.shape[0]
    loss = -logp[np.arange(n), y].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    return loss, dlogits / n


class Model:
    """Dense tanh network; ``hidden=()`` gives multinomial logistic regression."""

    classifier = True

    def __init__(self, dim: int, classes: int, hidden: tuple = ()):
        self.dim = dim
        self.classes = classes
        self.hidden = tuple(hidden)
        widths = (dim, *self.hidden, classes)
        self.shapes = [(a + 1, b) for a, b in zip(widths[:-1], widths[1:])]

    def init_state(self, seed: int = 0) -> ModelState:
        rng = derive_rng(seed, "init")
        layers = []
        for i, (fan_in, fan_out) in enumerate(self.shapes):
            W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            W[-1] = 0.0
            layers.append(Layer(f"dense{i}", W, (fan_in, fan_out)))
        return ModelState(layers)

    def logits(self, params, X):
        h = np.asarray(X, dtype=np.float64)
        for i, W in enumerate(params):
            h = _augment(h) @ W
            if i < len(params) - 1:
                h = np.tanh(h)
        return h

    def loss_and_grads(self, params, X, y):
        """Mean loss and its gradient w.r.t. every layer matrix."""
        acts = [np.asarray(X, dtype=np.float64)]
        h = acts[0]
        for i, W in enumerate(params):
            h = _augment(h) @ W
            if i < len(params) - 1:
                h = np.tanh(h)
                acts.append(h)
        loss, delta = self._loss(h, y)
        grads = [None] * len(params)
        for i in range(len(params) - 1, -1, -1):
            grads[i] = _augment(acts[i]).T @ delta
            if i:
                delta = (delta @ params[i][:-1].T) * (1.0 - acts[i] ** 2)
        return loss, grads

    def _loss(self, out, y):
        return _softmax_xent(out, np.asarray(y, dtype=np.int64))

    def predict(self, params, X):
        return np.argmax(self.logits(params, X), axis=1)


class LinearRegression(Model):
    """Least squares with loss ``||X theta - y||^2 / (2n)``."""

    classifier = False

    def __init__(self, dim: int):
        super().__init__(dim, 1)

    def _loss(self, out, y):
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        r = out - y
        n = y.shape[0]
        return 0.5 * float((r * r).sum()) / n, r / n

    def predict(self, params, X):
        return self.logits(params, X).ravel()


def build_model(kind: str, dim: int, classes: int, hidden: int = 32) -> Model:
    if kind == "logreg":
        return Model(dim, classes)
    if kind == "mlp":
        if not 1 <= hidden <= 64:
            raise ValueError(f"hidden width must lie in [1, 64], got {hidden}")
        return Model(dim, classes, (hidden,))
    raise ValueError(f"unknown model {kind!r}")


def params_of(state: ModelState) -> list[np.ndarray]:
    return [l.matrix().astype(np.float64) for l in state.layers]


# data ----------------------------------------------------------------------


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray

    def __len__(self):
        return int(self.y.shape[0])


@dataclass
class FederationData:
    clients: list
    public_set: Dataset
    test_set: Dataset
    alpha: float
    class_means: Optional[np.ndarray] = None
    global_label_dist: Optional[np.ndarray] = None

    @property
    def classes(self) -> int:
        return int(self.class_means.shape[0])

    @property
    def dim(self) -> int:
        return int(self.class_means.shape[1])


def _sample(means, labels, rng) -> Dataset:
    X = means[labels] + rng.normal(size=(labels.size, means.shape[1]))
    return Dataset(X.astype(np.float32), labels.astype(np.int64))


def gen_synthetic_federation(
    n_clients: int,
    classes: int,
    dim: int,
    samples_per_client: int,
    alpha: float,
    public_size: int,
    public_mismatch: float = 0.0,
    seed: int = 0,
    test_size: int = 2000,
    separation: float = 1.0,
) -> FederationData:
    """Gaussian-mixture classification data split across clients.

    Each client's label mix is a Dirichlet(alpha) draw. The public set's label
    distribution interpolates between the pooled client distribution
    (``public_mismatch=0``) and a single class (``public_mismatch=1``). The
    test set is class-balanced.
    """
    if min(n_clients, classes, dim, samples_per_client, public_size, test_size) < 1:
        raise ValueError("all counts must be >= 1")
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")
    if not 0.0 <= public_mismatch <= 1.0:
        raise ValueError(f"public_mismatch must lie in [0, 1], got {public_mismatch}")

    rng = derive_rng(seed, "federation")
    means = rng.normal(0.0, separation, size=(classes, dim))
    if classes > 1:
        gaps = np.linalg.norm(means[:, None] - means[None], axis=2)[np.triu_indices(classes, 1)]
        if gaps.min() < 2.0:
            warnings.warn(f"class means as close as {gaps.min():.2f}; mixture components overlap", stacklevel=2)

    props = rng.dirichlet(np.full(classes, alpha), size=n_clients)
    clients = []
    hist = np.zeros(classes)
    for p in props:
        y = rng.choice(classes, size=samples_per_client, p=p)
        hist += np.bincount(y, minlength=classes)
        clients.append(_sample(means, y, rng))
    global_dist = hist / hist.sum()

    target = np.zeros(classes)
    target[rng.integers(classes)] = 1.0
    pub_dist = (1.0 - public_mismatch) * global_dist + public_mismatch * target
    public = _sample(means, rng.choice(classes, size=public_size, p=pub_dist), rng)
    test_y = np.arange(test_size) % classes
    test = _sample(means, rng.permutation(test_y), rng)
    return FederationData(clients, public, test, alpha, means, global_dist)


def save_federation(fed: FederationData, path) -> None:
    arrays = {
        "alpha": np.array(fed.alpha),
        "class_means": fed.class_means,
        "global_label_dist": fed.global_label_dist,
        "public_X": fed.public_set.X,
        "public_y": fed.public_set.y,
        "test_X": fed.test_set.X,
        "test_y": fed.test_set.y,
        "n_clients": np.array(len(fed.clients)),
    }
    for i, c in enumerate(fed.clients):
        arrays[f"client{i}_X"] = c.X
        arrays[f"client{i}_y"] = c.y
    np.savez(Path(path), **arrays)


def load_federation(path) -> FederationData:
    with np.load(Path(path)) as f:
        clients = [Dataset(f[f"client{i}_X"], f[f"client{i}_y"]) for i in range(int(f["n_clients"]))]
        return FederationData(
            clients,
            Dataset(f["public_X"], f["public_y"]),
            Dataset(f["test_X"], f["test_y"]),
            float(f["alpha"]),
            f["class_means"],
            f["global_label_dist"],
        )


# training ------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr_client: float = 0.1
    lr_server: float = 1.0
    local_epochs: int = 1
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.lr_client < 0 or self.lr_server < 0:
            raise ValueError("learning rates must be nonnegative")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("local_epochs and batch_size must be >= 1")


def local_train(model: Model, state: ModelState, data: Dataset, cfg: TrainConfig) -> list[np.ndarray]:
    """Minibatch SGD from the global model; returns ``theta_local - theta_global`` per layer."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    start = params_of(state)
    params = [p.copy() for p in start]
    rng = np.random.default_rng(cfg.seed)
    n = len(data)
    for _ in range(cfg.local_epochs):
        order = rng.permutation(n)
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            _, grads = model.loss_and_grads(params, data.X[idx], data.y[idx])
            for p, g in zip(params, grads):
                p -= cfg.lr_client * g
    return [(p - s).ravel().astype(np.float32) for p, s in zip(params, start)]


def apply_server_update(state: ModelState, update, lr: float) -> ModelState:
    """``theta + lr * g`` per layer; returns a new state one round later."""
    if len(update) != len(state.layers):
        raise ValueError("update has the wrong number of layers")
    layers = []
    for layer, g in zip(state.layers, update):
        g = np.asarray(g).ravel()
        if g.size != layer.values.size:
            raise ValueError(f"update for {layer.name} has {g.size} values, expected {layer.values.size}")
        new = (layer.values.astype(np.float64) + lr * g.astype(np.float64)).astype(np.float32)
        layers.append(Layer(layer.name, new, layer.shape))
    return ModelState(layers, state.round + 1)


def evaluate(model: Model, state: ModelState, data: Dataset) -> tuple[float, float]:
    """Accuracy and mean loss on ``data`` (accuracy is NaN for regressors)."""
    if len(data) == 0:
        raise ValueError("empty test set")
    params = params_of(state)
    out = model.logits(params, data.X)
    loss, _ = model._loss(out, data.y)
    if not model.classifier:
        return float("nan"), float(loss)
    acc = float(np.mean(np.argmax(out, axis=1) == data.y))
    return acc, float(loss)
