"""Supervised training: binary cross-entropy, Adam, the epoch loop.

One training run is a single writer over its parameter set; parallel runs
(folds, repetitions) each get their own parameters and seeded substreams,
so a (seed, data, config) triple pins the whole parameter trajectory.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, DataError, random_oversample
from .model import ModelConfig, ModelParameters, init_parameters, model_forward, _leaves
from .util import substream


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 250
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    oversample: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainLog:
    """Per-epoch loss/accuracy plus wall-clock."""

    epochs: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def append(self, epoch: int, loss: float, accuracy: float, elapsed: float) -> None:
        self.epochs.append(epoch)
        self.losses.append(loss)
        self.accuracies.append(accuracy)
        self.seconds.append(elapsed)

    def to_csv(self) -> str:
        lines = ["epoch,loss,accuracy,seconds"]
        for e, l, a, s in zip(self.epochs, self.losses, self.accuracies, self.seconds):
            lines.append(f"{e},{l:.10g},{a:.10g},{s:.4f}")
        return "\n".join(lines) + "\n"


def bce_loss(p, y) -> Tensor:
    """Mean -[y ln p + (1-y) ln(1-p)] with p clamped to [1e-12, 1-1e-12]."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    y = np.asarray(y, dtype=np.float64)
    p = ad.clip(p, 1e-12, 1.0 - 1e-12)
    losses = -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))
    return losses.mean()


@dataclass
class AdamState:
    """First/second moment accumulators, one slot per parameter tensor."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_parameters(cls, params: ModelParameters) -> "AdamState":
        return cls(m={k: np.zeros_like(a) for k, a in params.named()},
                   v={k: np.zeros_like(a) for k, a in params.named()})


def adam_step(params: ModelParameters, grads: dict[str, np.ndarray],
              state: AdamState, hyper: TrainConfig) -> tuple[ModelParameters, AdamState]:
    """One bias-corrected Adam update; parameters and state advance in place."""
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    for name, arr in params.named():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise RuntimeError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        arr -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    return params, state


def epoch_batches(indices: np.ndarray, batch_size: int,
                  rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffle once and cut into batches; the final partial batch is kept."""
    order = rng.permutation(indices)
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def train_model(dataset: Dataset, model_config: ModelConfig,
                train_config: TrainConfig,
                initial: ModelParameters | None = None) -> tuple[ModelParameters, TrainLog]:
    """Mini-batch training with per-epoch reshuffles.

    Oversampling (when enabled) duplicates minority indices once up front;
    every epoch then reshuffles the augmented index list. Raises on a
    single-class dataset and aborts on a non-finite loss.
    """
    labels = dataset.labels()
    if np.unique(labels).size < 2:
        raise DataError("training requires both classes present")
    images = dataset.images()

    params = initial.copy() if initial is not None else init_parameters(
        model_config, substream(train_config.seed, "init"))
    state = AdamState.for_parameters(params)
    log = TrainLog()

    indices = np.arange(len(dataset))
    if train_config.oversample:
        indices = random_oversample(indices, labels, seed=train_config.seed)
    shuffle_rng = substream(train_config.seed, "shuffle")

    for epoch in range(train_config.epochs):
        started = time.perf_counter()
        total_loss = 0.0
        correct = 0
        for batch in epoch_batches(indices, train_config.batch_size, shuffle_rng):
            leaves = _leaves(params)
            probs = model_forward(images[batch], params, model_config, leaves=leaves)
            loss = bce_loss(probs, labels[batch])
            loss_value = float(loss.value)
            if not np.isfinite(loss_value):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}, batch of {len(batch)}")
            grads_by_tensor = ad.backward(loss)
            grads = {name: grads_by_tensor[tensor]
                     for name, tensor in leaves.items() if tensor in grads_by_tensor}
            adam_step(params, grads, state, train_config)
            total_loss += loss_value * len(batch)
            correct += int(((probs.value >= 0.5) == (labels[batch] == 1)).sum())
        log.append(epoch, total_loss / len(indices), correct / len(indices),
                   time.perf_counter() - started)
    return params, log


def predict_scores(params: ModelParameters, config: ModelConfig,
                   dataset: Dataset, chunk: int = 256) -> list[tuple[float, int]]:
    """Model probability per sample, order preserving."""
    labels = dataset.labels()
    if len(dataset) == 0:
        return []
    images = dataset.images()
    scores: list[float] = []
    with ad.no_grad():
        for start in range(0, len(dataset), chunk):
            probs = model_forward(images[start:start + chunk], params, config)
            scores.extend(float(v) for v in probs.value)
    return list(zip(scores, labels.tolist()))


def accuracy_of(scores: list[tuple[float, int]], threshold: float = 0.5) -> float:
    """Fraction of samples whose thresholded score matches the label."""
    if not scores:
        raise ValueError("no scores to evaluate")
    hits = sum(1 for s, y in scores if (s >= threshold) == (y == 1))
    return hits / len(scores)
