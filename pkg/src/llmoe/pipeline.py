"""LLMoE orchestration plus the static-gate MoE and single-MLP baselines."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .experts import (
    DROPOUT_RATES, LAYER_DIMS, PROB_CLAMP, ExpertNet, TrainConfig, TrainingDivergence, bce,
    expert_from_dict, expert_to_dict, init_expert, make_optimizer, predict, sigmoid, train_expert,
)
from .features import N_FEATURES, WindowSample, stack
from .router import Outlook, RouterDecision

log = logging.getLogger(__name__)

UP, DOWN = "up", "down"


def derive_seed(seed: int, *tags: int) -> int:
    """Independent, reproducible child seed for a (seed, tag...) tuple."""
    return int(np.random.SeedSequence([seed, *tags]).generate_state(1)[0])


@dataclass(frozen=True)
class Prediction:
    anchor_date: object
    direction: str
    probability: float
    router_label: str


@dataclass(frozen=True)
class PredictionSeries:
    entries: tuple[Prediction, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def directions(self) -> list[str]:
        return [p.direction for p in self.entries]

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([p.probability for p in self.entries])

    @classmethod
    def from_probabilities(cls, samples: Sequence[WindowSample], probs, labels: Sequence[str]):
        return cls(tuple(
            Prediction(s.anchor_date, UP if p >= 0.5 else DOWN, float(p), lab)
            for s, p, lab in zip(samples, probs, labels)
        ))


def _check_aligned(samples: Sequence[WindowSample], decisions: Sequence[RouterDecision]) -> None:
    if len(samples) != len(decisions):
        raise ValueError(f"{len(samples)} samples but {len(decisions)} router decisions")
    for s, d in zip(samples, decisions):
        if s.anchor_date != d.anchor_date:
            raise ValueError(f"decision for {d.anchor_date} aligned with sample {s.anchor_date}")


# --------------------------------------------------------------------------- LLMoE

@dataclass
class LlmoePolicy:
    optimistic_expert: ExpertNet
    pessimistic_expert: ExpertNet
    router_kind: str = "rule"
    min_partition_size: int = 30
    partition_sizes: dict = field(default_factory=dict)
    fell_back: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.min_partition_size < 1:
            raise ValueError("min_partition_size must be >= 1")

    def expert_for(self, label: Outlook) -> ExpertNet:
        return self.optimistic_expert if Outlook(label) is Outlook.OPTIMISTIC else self.pessimistic_expert


EXPERT_TAGS = {Outlook.OPTIMISTIC: 0, Outlook.PESSIMISTIC: 1}


def _expert_seed(seed: int, label: Outlook) -> int:
    # The optimistic expert shares the single-MLP seed so the two coincide
    # when the router sends everything one way.
    return seed if label is Outlook.OPTIMISTIC else derive_seed(seed, EXPERT_TAGS[label])


def train_llmoe(
    train_samples: Sequence[WindowSample],
    decisions: Sequence[RouterDecision],
    config: TrainConfig = TrainConfig(),
    min_partition_size: int = 30,
    router_kind: str = "rule",
    fallback: bool = True,
) -> LlmoePolicy:
    """Train one expert per router label on the samples routed to it.

    A partition smaller than ``min_partition_size`` trains its expert on the
    whole training set instead (unless ``fallback`` is off, in which case the
    expert stays at its initialisation when its partition is empty).
    """
    _check_aligned(train_samples, decisions)
    if not train_samples:
        raise ValueError("both router partitions are empty")
    X_all, y_all = stack(train_samples)
    experts, sizes, fell_back = {}, {}, {}
    for label in Outlook:
        idx = [i for i, d in enumerate(decisions) if d.label is label]
        sizes[label.value] = len(idx)
        seed = _expert_seed(config.seed, label)
        cfg = TrainConfig(**{**asdict(config), "seed": seed})
        net = init_expert(seed)
        use_all = fallback and len(idx) < min_partition_size
        fell_back[label.value] = use_all
        if use_all:
            log.warning("%s partition has %d < %d samples; training on all %d samples",
                        label.value, len(idx), min_partition_size, len(train_samples))
            X, y = X_all, y_all
        elif not idx:
            log.warning("%s partition is empty; expert left untrained", label.value)
            experts[label] = net
            continue
        else:
            X, y = X_all[idx], y_all[idx]
        experts[label], _ = train_expert(net, X, y, cfg)
    return LlmoePolicy(experts[Outlook.OPTIMISTIC], experts[Outlook.PESSIMISTIC], router_kind,
                       min_partition_size, sizes, fell_back)


def infer_llmoe(policy: LlmoePolicy, test_samples: Sequence[WindowSample],
                decisions: Sequence[RouterDecision]) -> PredictionSeries:
    _check_aligned(test_samples, decisions)
    probs = np.empty(len(test_samples))
    if test_samples:
        X, _ = stack(test_samples)
        for label in Outlook:
            idx = np.array([i for i, d in enumerate(decisions) if d.label is label], dtype=int)
            if idx.size:
                probs[idx] = np.atleast_1d(predict(policy.expert_for(label), X[idx]))
    return PredictionSeries.from_probabilities(test_samples, probs, [d.label.value for d in decisions])


# --------------------------------------------------------------------------- single MLP

def train_single_mlp(train_samples: Sequence[WindowSample], config: TrainConfig = TrainConfig()) -> ExpertNet:
    X, y = stack(train_samples)
    net, _ = train_expert(init_expert(config.seed), X, y, config)
    return net


def infer_single_mlp(net: ExpertNet, test_samples: Sequence[WindowSample]) -> PredictionSeries:
    probs = np.atleast_1d(predict(net, stack(test_samples)[0])) if test_samples else []
    return PredictionSeries.from_probabilities(test_samples, probs, ["mlp"] * len(test_samples))


# --------------------------------------------------------------------------- static MoE

@dataclass
class StaticMoe:
    """K experts stored as stacked tensors plus a dense linear-softmax gate.

    ``weights[l]`` has shape (K, out, in) and ``biases[l]`` (K, out); slice k
    is expert k.
    """
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gate_weights: np.ndarray  # (K, 55)
    gate_bias: np.ndarray     # (K,)
    dropout_rates: tuple[float, ...] = DROPOUT_RATES

    def __post_init__(self):
        k = self.gate_bias.shape[0]
        if k < 2:
            raise ValueError(f"a static MoE needs at least 2 experts, got {k}")
        if self.gate_weights.shape != (k, N_FEATURES):
            raise ValueError("gate shape does not match expert count")
        if any(W.shape[0] != k for W in self.weights) or any(b.shape[0] != k for b in self.biases):
            raise ValueError("expert stack does not match expert count")

    @property
    def k(self) -> int:
        return self.gate_bias.shape[0]

    @property
    def experts(self) -> list[ExpertNet]:
        return [ExpertNet([W[i] for W in self.weights], [b[i] for b in self.biases],
                          dropout_rates=self.dropout_rates) for i in range(self.k)]

    @property
    def params(self) -> list[np.ndarray]:
        return [self.gate_weights, self.gate_bias, *(p for pair in zip(self.weights, self.biases) for p in pair)]


def softmax(a: np.ndarray) -> np.ndarray:
    a = a - a.max(axis=-1, keepdims=True)
    e = np.exp(a)
    return e / e.sum(axis=-1, keepdims=True)


def init_static_moe(k: int, seed: int) -> StaticMoe:
    if k < 2:
        raise ValueError(f"a static MoE needs at least 2 experts, got {k}")
    rng = np.random.default_rng(derive_seed(seed, 99))
    experts = [init_expert(derive_seed(seed, 100 + i)) for i in range(k)]
    weights = [np.stack([e.weights[l] for e in experts]) for l in range(len(LAYER_DIMS) - 1)]
    biases = [np.stack([e.biases[l] for e in experts]) for l in range(len(LAYER_DIMS) - 1)]
    return StaticMoe(weights, biases, rng.normal(0.0, 0.01, size=(k, N_FEATURES)), np.zeros(k))


def _stack_forward(moe: StaticMoe, X: np.ndarray, training: bool, rng):
    """All K experts at once: probabilities (B, K) and the activation cache."""
    h = np.broadcast_to(X, (moe.k, *X.shape))
    inputs, pre, masks = [], [], []
    for l in range(len(moe.weights) - 1):
        inputs.append(h)
        z = h @ moe.weights[l].transpose(0, 2, 1) + moe.biases[l][:, None, :]
        pre.append(z)
        h = np.maximum(z, 0.0)
        p = moe.dropout_rates[l]
        mask = None
        if training and p > 0:
            mask = (rng.random(h.shape) >= p) / (1.0 - p)
            h = h * mask
        masks.append(mask)
    inputs.append(h)
    logits = (h @ moe.weights[-1].transpose(0, 2, 1) + moe.biases[-1][:, None, :])[:, :, 0]
    return sigmoid(logits).T, (inputs, pre, masks)


def _stack_backward(moe: StaticMoe, cache, dlogit: np.ndarray) -> list[np.ndarray]:
    """dlogit is (B, K); returns [dW1, db1, ...] stacked over experts."""
    inputs, pre, masks = cache
    grads = [None] * (2 * len(moe.weights))
    delta = dlogit.T[:, :, None]  # (K, B, 1)
    for l in range(len(moe.weights) - 1, -1, -1):
        grads[2 * l] = delta.transpose(0, 2, 1) @ inputs[l]
        grads[2 * l + 1] = delta.sum(axis=1)
        if l == 0:
            break
        dh = delta @ moe.weights[l]
        if masks[l - 1] is not None:
            dh = dh * masks[l - 1]
        delta = dh * (pre[l - 1] > 0)
    return grads


def moe_forward(moe: StaticMoe, X: np.ndarray, training: bool = False, rng=None):
    """Mixture probability sum_k softmax(gate(x))_k * expert_k(x), gates (B, K), expert probs (B, K)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != N_FEATURES:
        raise ValueError(f"expected input of length {N_FEATURES}, got shape {X.shape}")
    if training and rng is None:
        rng = np.random.default_rng(0)
    gates = softmax(X @ moe.gate_weights.T + moe.gate_bias)
    P, cache = _stack_forward(moe, X, training, rng)
    return (gates * P).sum(axis=1), gates, P, cache


def moe_loss_and_grads(moe: StaticMoe, X, y, training: bool = False, rng=None):
    """Mean BCE of the mixture and gradients ordered like ``moe.params``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    mix, gates, P, cache = moe_forward(moe, X, training, rng)
    inside = (mix > PROB_CLAMP) & (mix < 1.0 - PROB_CLAMP)
    dmix = np.where(inside, (mix - y) / (mix * (1.0 - mix)), 0.0) / len(y)
    dgate_logits = dmix[:, None] * gates * (P - mix[:, None])
    dexpert_logits = dmix[:, None] * gates * P * (1.0 - P)
    grads = [dgate_logits.T @ X, dgate_logits.sum(axis=0)]
    grads.extend(_stack_backward(moe, cache, dexpert_logits))
    return bce(mix, y), grads


def train_static_moe(train_samples, k: int, config: TrainConfig = TrainConfig()) -> StaticMoe:
    """Joint gradient training of gate and experts on the mixture's BCE.

    ``train_samples`` is a list of WindowSample or an ``(X, y)`` tuple.
    """
    X, y = train_samples if isinstance(train_samples, tuple) else stack(train_samples)
    if len(X) == 0:
        raise ValueError("training data is empty")
    moe = init_static_moe(k, config.seed)
    params = moe.params
    opt = make_optimizer(params, config)
    rng = np.random.default_rng(config.seed)
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, config.epochs + 1):
            order = rng.permutation(len(X))
            for start in range(0, len(X), config.batch_size):
                idx = order[start:start + config.batch_size]
                _, grads = moe_loss_and_grads(moe, X[idx], y[idx], training=True, rng=rng)
                opt.step(params, grads)
            if not all(np.isfinite(p).all() for p in params):
                raise TrainingDivergence(f"static MoE (K={k}) parameters non-finite at epoch {epoch}")
    return moe


def infer_static_moe(moe: StaticMoe, test_samples: Sequence[WindowSample]) -> PredictionSeries:
    if not test_samples:
        return PredictionSeries(())
    mix, gates, _, _ = moe_forward(moe, stack(test_samples)[0])
    return PredictionSeries.from_probabilities(test_samples, mix, [str(int(i)) for i in gates.argmax(axis=1)])


# --------------------------------------------------------------------------- bundles

def decisions_digest(decisions: Sequence[RouterDecision]) -> str:
    h = hashlib.sha256()
    for d in decisions:
        h.update(f"{d.anchor_date.isoformat()},{d.prompt_hash},{d.label.value}\n".encode())
    return h.hexdigest()


def save_policy(policy: LlmoePolicy, directory, config: TrainConfig,
                decisions: Optional[Sequence[RouterDecision]] = None) -> Path:
    """Write both expert checkpoints and a manifest into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "optimistic.json").write_text(json.dumps(expert_to_dict(policy.optimistic_expert)))
    (out / "pessimistic.json").write_text(json.dumps(expert_to_dict(policy.pessimistic_expert)))
    manifest = {
        "router_kind": policy.router_kind,
        "min_partition_size": policy.min_partition_size,
        "partition_sizes": policy.partition_sizes,
        "fell_back": policy.fell_back,
        "expert_seeds": {"optimistic": policy.optimistic_expert.seed,
                         "pessimistic": policy.pessimistic_expert.seed},
        "train_config": asdict(config),
        "decision_digest": decisions_digest(decisions) if decisions is not None else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_policy(directory) -> LlmoePolicy:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    return LlmoePolicy(
        expert_from_dict(json.loads((d / "optimistic.json").read_text())),
        expert_from_dict(json.loads((d / "pessimistic.json").read_text())),
        manifest["router_kind"], manifest["min_partition_size"],
        manifest["partition_sizes"], manifest["fell_back"],
    )


def accuracy(predictions: PredictionSeries, samples: Sequence[WindowSample]) -> float:
    if not samples:
        return math.nan
    hits = sum((p.direction == UP) == bool(s.label) for p, s in zip(predictions, samples))
    return hits / len(samples)
