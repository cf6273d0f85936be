"""Federated round loop: proximal local training, aggregation, evaluation.

Each round broadcasts the global weights, trains every client locally with
Adam on the soft Dice loss plus the proximal pull mu*(w - w_global) and L2
weight decay added to the gradient, aggregates the updated weights by a
sample-count-weighted mean, and evaluates the new global model on the
server-held test set. With mu = 0 and weight decay 0 the per-step gradient
is untouched, so the protocol degenerates to exactly FedAvg.

Sequential client order (by id) is the default and is the mode under which
runs are bit-reproducible; parallel training is opt-in.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import (
    AugmentationConfig,
    Dataset,
    augment,
    build_partition,
    train_test_split,
)
from .errors import ConfigError, ShapeError, UsageError
from .metrics import (
    ConfusionCounts,
    MetricsRow,
    confusion,
    metrics_from_counts,
    soft_dice_loss,
)
from .model import AttentionUNet, ModelConfig
from .tensor import Tensor, no_grad

# RNG stream tags: one consumer family per tag so seeds never collide.
_STREAM_SPLIT = 11
_STREAM_EPOCH = 12


@dataclass
class FedConfig:
    rounds: int = 6
    local_epochs: int = 10
    mu: float = 0.1
    weight_decay: float = 0.001
    adam_lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16
    seed: int = 0
    # optional per-client local_epochs override, keyed by client id
    client_epochs: dict[int, int] = field(default_factory=dict)

    def validate(self) -> None:
        if self.rounds < 1:
            raise ConfigError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mu < 0:
            raise ConfigError(f"mu must be non-negative, got {self.mu}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError(f"seed must fit an unsigned 64-bit value, got {self.seed}")
        for cid, ep in self.client_epochs.items():
            if ep < 1:
                raise ConfigError(f"client {cid} epochs must be >= 1, got {ep}")

    def epochs_for(self, client_id: int) -> int:
        return self.client_epochs.get(client_id, self.local_epochs)


class Adam:
    """Bias-corrected moment estimation on a flat parameter vector."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = np.zeros(size)
        self.v = np.zeros(size)

    def step(self, weights: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return weights - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class ClientState:
    """One simulated site: its local data, 80/20 split, and optimizer state."""

    client_id: int
    train: Dataset
    test: Dataset
    optimizer: Adam | None = None

    @property
    def sample_count(self) -> int:
        return len(self.train)


@dataclass
class GlobalState:
    round_index: int
    weights: np.ndarray
    history: list[MetricsRow] = field(default_factory=list)


@dataclass
class RoundReport:
    round: int
    server_metrics: MetricsRow
    per_client_metrics: list[MetricsRow]
    wall_time: float


def make_clients(datasets: Sequence[Dataset], seed: int,
                 test_fraction: float = 0.2) -> list[ClientState]:
    """Split each client dataset 80/20 with a per-client derived seed."""
    clients = []
    for cid, ds in enumerate(datasets):
        split_seed = int(np.random.SeedSequence(
            (seed, _STREAM_SPLIT, cid)).generate_state(1)[0])
        train, test = train_test_split(ds, test_fraction, seed=split_seed)
        clients.append(ClientState(client_id=cid, train=train, test=test))
    return clients


def epoch_rng(seed: int, client_id: int, global_epoch: int) -> np.random.Generator:
    """Batch-order/augmentation stream for one client epoch; reproducible."""
    return np.random.default_rng(
        np.random.SeedSequence((seed, _STREAM_EPOCH, client_id, global_epoch)))


def _stack_batch(samples: Sequence) -> tuple[Tensor, Tensor]:
    images = np.stack([s.image for s in samples])[:, None]
    masks = np.stack([s.mask for s in samples])[:, None]
    return Tensor(images), Tensor(masks)


def evaluate_model(model: AttentionUNet, samples: Dataset,
                   batch_size: int = 16) -> MetricsRow:
    """Micro-averaged metrics over the dataset, in deterministic order."""
    if not samples:
        raise UsageError("cannot evaluate on an empty dataset")
    counts = ConfusionCounts()
    with no_grad():
        for start in range(0, len(samples), batch_size):
            x, t = _stack_batch(samples[start:start + batch_size])
            counts = counts + confusion(model.forward(x).data, t.data)
    return metrics_from_counts(counts)


def local_train(model: AttentionUNet, client: ClientState,
                global_weights: np.ndarray, cfg: FedConfig,
                round_index: int = 1,
                augmentation: AugmentationConfig | None = None
                ) -> tuple[np.ndarray, MetricsRow]:
    """Proximally regularized local epochs starting from the global weights.

    Per step: grad = d(dice)/dw + mu*(w - w_global) + weight_decay*w, applied
    through Adam. Moment buffers reset at round start since the weights were
    just replaced. Returns the updated weights and metrics on the client's
    held-out split.
    """
    if not client.train:
        raise ConfigError(f"client {client.client_id} has an empty training split")
    if len(global_weights) != model.parameter_count:
        raise ShapeError(
            f"global weight vector has {len(global_weights)} values, model "
            f"expects {model.parameter_count}"
        )
    global_weights = np.asarray(global_weights, dtype=np.float64)
    model.set_weights(global_weights)
    epochs = cfg.epochs_for(client.client_id)
    opt = Adam(len(global_weights), cfg.adam_lr, cfg.adam_beta1,
               cfg.adam_beta2, cfg.adam_eps)
    client.optimizer = opt

    for epoch in range(epochs):
        global_epoch = (round_index - 1) * epochs + epoch
        rng = epoch_rng(cfg.seed, client.client_id, global_epoch)
        order = rng.permutation(len(client.train))
        for start in range(0, len(order), cfg.batch_size):
            batch = [client.train[j] for j in order[start:start + cfg.batch_size]]
            if augmentation is not None and augmentation.enabled:
                batch = [augment(s, augmentation, rng) for s in batch]
            x, t = _stack_batch(batch)
            loss = soft_dice_loss(model.forward(x), t)
            model.zero_grads()
            loss.backward()
            grad = model.get_grads_flat()
            weights = model.get_weights()
            if cfg.mu != 0.0:
                grad = grad + cfg.mu * (weights - global_weights)
            if cfg.weight_decay != 0.0:
                grad = grad + cfg.weight_decay * weights
            model.set_weights(opt.step(weights, grad))

    return model.get_weights(), evaluate_model(model, client.test, cfg.batch_size)


def aggregate(updates: Sequence[tuple[np.ndarray, int]]) -> np.ndarray:
    """Sample-count-weighted mean of client weight vectors."""
    if not updates:
        raise UsageError("aggregate requires at least one update")
    length = len(updates[0][0])
    total = 0
    for i, (w, n) in enumerate(updates):
        if len(w) != length:
            raise ShapeError(
                f"update {i} has {len(w)} values, expected {length}")
        if n < 1:
            raise UsageError(f"update {i} has sample count {n} < 1")
        total += n
    out = np.zeros(length)
    for w, n in updates:
        out += (n / total) * np.asarray(w, dtype=np.float64)
    return out


RoundHook = Callable[[int, int, np.ndarray], None]


def run_round(model: AttentionUNet, state: GlobalState,
              clients: Sequence[ClientState], server_test: Dataset,
              cfg: FedConfig, augmentation: AugmentationConfig | None = None,
              hook: RoundHook | None = None, parallel: bool = False) -> RoundReport:
    """One protocol iteration: broadcast, local training, aggregate, evaluate."""
    if state.round_index >= cfg.rounds:
        raise UsageError(
            f"round {state.round_index + 1} exceeds configured rounds {cfg.rounds}")
    start = time.perf_counter()
    round_index = state.round_index + 1
    ordered = sorted(clients, key=lambda c: c.client_id)

    def train_one(client: ClientState, m: AttentionUNet):
        if hook is not None:
            hook(round_index, client.client_id, state.weights.copy())
        return local_train(m, client, state.weights, cfg, round_index, augmentation)

    if parallel:
        with ThreadPoolExecutor(max_workers=len(ordered)) as pool:
            futures = [pool.submit(train_one, c, model.clone()) for c in ordered]
            results = [f.result() for f in futures]
    else:
        results = [train_one(c, model) for c in ordered]

    state.weights = aggregate(
        [(w, c.sample_count) for (w, _), c in zip(results, ordered)])
    model.set_weights(state.weights)
    server_metrics = evaluate_model(model, server_test, cfg.batch_size)
    state.round_index = round_index
    state.history.append(server_metrics)
    return RoundReport(
        round=round_index,
        server_metrics=server_metrics,
        per_client_metrics=[m for _, m in results],
        wall_time=time.perf_counter() - start,
    )


def run_federation(cfg: FedConfig, plan, model_config: ModelConfig | None = None,
                   augmentation: AugmentationConfig | None = None,
                   image_size: int = 64, source: Dataset | None = None,
                   parallel: bool = False, hook: RoundHook | None = None,
                   on_round_end: Callable[[RoundReport, np.ndarray,
                                           AttentionUNet], None] | None = None
                   ) -> list[RoundReport]:
    """Build the model and datasets from seeds, then loop the round protocol."""
    cfg.validate()
    if model_config is None:
        model_config = ModelConfig(init_seed=cfg.seed)
    model = AttentionUNet(model_config)
    client_sets, server_test = build_partition(plan, size=image_size, source=source)
    clients = make_clients(client_sets, cfg.seed)
    state = GlobalState(round_index=0, weights=model.get_weights())

    reports = []
    for _ in range(cfg.rounds):
        report = run_round(model, state, clients, server_test, cfg,
                           augmentation, hook, parallel)
        reports.append(report)
        if on_round_end is not None:
            on_round_end(report, state.weights.copy(), model)
    return reports
