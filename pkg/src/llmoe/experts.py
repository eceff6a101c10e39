"""Feedforward expert networks (55-128-64-32-1) with hand-written backprop and Adam."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .features import N_FEATURES

LAYER_DIMS = (N_FEATURES, 128, 64, 32, 1)
# Dropout after hidden layers 1, 2, 3. Layer 1 carries none.
DROPOUT_RATES = (0.0, 0.3, 0.2)
PROB_CLAMP = 1e-7
CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


@dataclass
class ExpertNet:
    weights: list[np.ndarray]  # W[l] has shape (out, in)
    biases: list[np.ndarray]
    seed: int = 0
    dropout_rates: tuple[float, ...] = DROPOUT_RATES
    layer_dims: tuple[int, ...] = LAYER_DIMS

    def __post_init__(self):
        dims = self.layer_dims
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("one weight matrix and bias vector per layer expected")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[l + 1], dims[l]) or b.shape != (dims[l + 1],):
                raise ValueError(f"layer {l}: got W{W.shape} b{b.shape}, expected ({dims[l + 1]}, {dims[l]})")
        if len(self.dropout_rates) != len(dims) - 2:
            raise ValueError("one dropout rate per hidden layer expected")

    @property
    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "ExpertNet":
        return ExpertNet([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.seed, self.dropout_rates, self.layer_dims)

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    optimizer: str = "adam"
    seed: int = 0
    early_stop_patience: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


def init_expert(seed: int, layer_dims=LAYER_DIMS, dropout_rates=DROPOUT_RATES) -> ExpertNet:
    """He-normal weights (variance 2/fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return ExpertNet(weights, biases, seed, tuple(dropout_rates), tuple(layer_dims))


def zero_expert() -> ExpertNet:
    return ExpertNet([np.zeros((o, i)) for i, o in zip(LAYER_DIMS[:-1], LAYER_DIMS[1:])],
                     [np.zeros(o) for o in LAYER_DIMS[1:]])


def sigmoid(z):
    # Split by sign so exp never overflows.
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)   # input to each layer
    pre: list[np.ndarray] = field(default_factory=list)      # pre-activations of hidden layers
    masks: list[Optional[np.ndarray]] = field(default_factory=list)
    logit: Optional[np.ndarray] = None
    prob: Optional[np.ndarray] = None


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != LAYER_DIMS[0]:
        raise ValueError(f"expected input of length {LAYER_DIMS[0]}, got shape {x.shape}")
    return X, single


def forward(net: ExpertNet, x, training: bool = False, rng: Optional[np.random.Generator] = None,
            dropout_rates: Optional[tuple[float, ...]] = None):
    """Probability of an up move for one 55-vector or a (B, 55) batch, plus the activation cache.

    Dropout is inverted (kept units scaled by 1/(1-p)) and only applied when
    ``training`` is set; ``dropout_rates`` overrides the net's rates.
    """
    X, single = _as_batch(x)
    if not np.isfinite(X).all():
        raise ValueError("input contains non-finite values")
    rates = net.dropout_rates if dropout_rates is None else dropout_rates
    if training and rng is None:
        rng = np.random.default_rng(net.seed)
    cache = ForwardCache()
    h = X
    n_hidden = len(net.weights) - 1
    for l in range(n_hidden):
        cache.inputs.append(h)
        z = h @ net.weights[l].T + net.biases[l]
        cache.pre.append(z)
        h = np.maximum(z, 0.0)
        p = rates[l]
        mask = None
        if training and p > 0:
            mask = (rng.random(h.shape) >= p) / (1.0 - p)
            h = h * mask
        cache.masks.append(mask)
    cache.inputs.append(h)
    cache.logit = (h @ net.weights[-1].T + net.biases[-1])[:, 0]
    cache.prob = sigmoid(cache.logit)
    prob = cache.prob[0] if single else cache.prob
    return prob, cache


def backward(net: ExpertNet, cache: ForwardCache, dlogit: np.ndarray) -> list[np.ndarray]:
    """Gradients [dW1, db1, ..., dW4, db4] given dLoss/dlogit per batch row."""
    grads = [None] * (2 * len(net.weights))
    delta = np.asarray(dlogit, dtype=np.float64).reshape(-1, 1)
    for l in range(len(net.weights) - 1, -1, -1):
        grads[2 * l] = delta.T @ cache.inputs[l]
        grads[2 * l + 1] = delta.sum(axis=0)
        if l == 0:
            break
        dh = delta @ net.weights[l]
        mask = cache.masks[l - 1]
        if mask is not None:
            dh = dh * mask
        delta = dh * (cache.pre[l - 1] > 0)
    return grads


def bce(prob, y) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(prob, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def bce_dlogit(prob: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d(mean BCE)/d(logit); zero where the clamp is active."""
    prob = np.asarray(prob, dtype=np.float64)
    inside = (prob > PROB_CLAMP) & (prob < 1.0 - PROB_CLAMP)
    return np.where(inside, prob - y, 0.0) / prob.size


def loss_and_grads(net: ExpertNet, X, y, training: bool = False, rng=None):
    prob, cache = forward(net, X, training=training, rng=rng)
    prob = np.atleast_1d(prob)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    return bce(prob, y), backward(net, cache, bce_dlogit(prob, y))


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self._buf = [np.empty_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        # lr * m_hat / (sqrt(v_hat) + eps), with the bias corrections folded into scalars.
        step = self.lr * math.sqrt(c2) / c1
        eps = self.eps * math.sqrt(c2)
        for p, g, m, v, buf in zip(params, grads, self.m, self.v, self._buf):
            m *= self.beta1
            np.multiply(g, 1.0 - self.beta1, out=buf)
            m += buf
            v *= self.beta2
            np.multiply(g, g, out=buf)
            buf *= 1.0 - self.beta2
            v += buf
            np.sqrt(v, out=buf)
            buf += eps
            np.divide(m, buf, out=buf)
            buf *= step
            p -= buf


class SGD:
    def __init__(self, params, lr: float):
        self.lr = lr

    def step(self, params, grads) -> None:
        for p, g in zip(params, grads):
            p -= self.lr * g


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(params, config.learning_rate, config.beta1, config.beta2, config.eps)
    return SGD(params, config.learning_rate)


def _as_arrays(X, y=None):
    if y is None:
        # list of (vector, label) pairs
        pairs = list(X)
        if not pairs:
            raise ValueError("training data is empty")
        X = np.stack([np.asarray(v, dtype=np.float64) for v, _ in pairs])
        y = np.array([lab for _, lab in pairs], dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("training data is empty")
    if len(X) != len(y):
        raise ValueError(f"{len(X)} inputs but {len(y)} labels")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    _as_batch(X)
    return X, y


def train_expert(net: ExpertNet, X, y=None, config: TrainConfig = TrainConfig()):
    """Minibatch BCE training; returns a new trained net and the per-epoch loss trace.

    ``X`` is an (N, 55) array with labels ``y``, or a list of ``(vector, label)``
    pairs with ``y`` omitted. Shuffling and dropout masks come from
    ``config.seed``. The trace holds the dropout-free loss over the full
    training set after each epoch.
    """
    X, y = _as_arrays(X, y)
    net = net.copy()
    params = net.params
    opt = make_optimizer(params, config)
    rng = np.random.default_rng(config.seed)
    trace: list[float] = []
    with np.errstate(over="ignore", invalid="ignore"):
        _fit(net, params, opt, rng, X, y, config, trace)
    return net, trace


def _fit(net, params, opt, rng, X, y, config, trace):
    n = len(X)
    best, best_params, stale = math.inf, None, 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = loss_and_grads(net, X[idx], y[idx], training=True, rng=rng)
            opt.step(params, grads)
        loss = bce(np.atleast_1d(forward(net, X)[0]), y)
        if not math.isfinite(loss) or not net.is_finite():
            raise TrainingDivergence(f"non-finite loss or parameters at epoch {epoch}")
        trace.append(loss)
        if config.early_stop_patience is not None:
            if loss < best:
                best, best_params, stale = loss, [p.copy() for p in params], 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    for p, saved in zip(params, best_params):
                        p[...] = saved
                    break


def predict(net: ExpertNet, x):
    """Up-move probability, dropout off. Callers treat >= 0.5 as up."""
    return forward(net, x, training=False)[0]


def gradient_check(net: ExpertNet, x, label, epsilon: float = 1e-5, n_params: int = 600,
                   seed: int = 0, abs_floor: float = 1e-8, indices=None) -> float:
    """Max relative error between backprop and central finite differences of the BCE loss.

    Checks ``n_params`` randomly sampled parameters (all, if fewer exist), or
    the flat positions in ``indices`` (ordered like ``net.params``), with
    dropout off. The denominator is floored at ``abs_floor`` so parameters
    with zero gradient (dead ReLU paths) do not divide by zero.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(label, dtype=np.float64))
    net = net.copy()
    _, grads = loss_and_grads(net, X, y)
    params = net.params
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    if indices is None:
        picks = np.random.default_rng(seed).choice(total, size=min(n_params, total), replace=False)
    else:
        picks = np.asarray(indices, dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        p, g = params[k].reshape(-1), grads[k].reshape(-1)
        i = flat - offsets[k]
        orig = p[i]
        p[i] = orig + epsilon
        up = bce(np.atleast_1d(forward(net, X)[0]), y)
        p[i] = orig - epsilon
        down = bce(np.atleast_1d(forward(net, X)[0]), y)
        p[i] = orig
        numeric = (up - down) / (2.0 * epsilon)
        rel = abs(numeric - g[i]) / max(abs(numeric), abs(g[i]), abs_floor)
        worst = max(worst, rel)
    return worst


# --------------------------------------------------------------------------- checkpoints

def expert_to_dict(net: ExpertNet) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "layer_dims": list(net.layer_dims),
        "dropout_rates": list(net.dropout_rates),
        "seed": net.seed,
        "weights": [W.tolist() for W in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }


def expert_from_dict(d: dict) -> ExpertNet:
    if d.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('format_version')!r}")
    return ExpertNet(
        weights=[np.asarray(W, dtype=np.float64) for W in d["weights"]],
        biases=[np.asarray(b, dtype=np.float64) for b in d["biases"]],
        seed=int(d["seed"]),
        dropout_rates=tuple(d["dropout_rates"]),
        layer_dims=tuple(d["layer_dims"]),
    )


def save_expert(net: ExpertNet, path) -> None:
    Path(path).write_text(json.dumps(expert_to_dict(net)), encoding="utf-8")


def load_expert(path) -> ExpertNet:
    return expert_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
