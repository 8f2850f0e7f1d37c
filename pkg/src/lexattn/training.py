"""Adam with joint gradient-norm clipping, early stopping, seeded runs.

A run is fully determined by (seed, config, data): parameter init, the
Gaussian embedding noise, dropout masks, and per-epoch shuffles each draw
from fixed-purpose streams derived from the one seed, in a fixed order.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .evaluate import ConfusionMatrix, accuracy, macro_f1
from .model import ModelConfig, ModelParams, forward, predict
from .textdata import make_batches

__all__ = [
    "AdamState",
    "EarlyStopper",
    "EpochStats",
    "TrainConfig",
    "TrainResult",
    "TrainingDivergedError",
    "adam_step",
    "clip_global_norm",
    "confusion",
    "evaluate_metric",
    "format_history",
    "global_norm",
    "rng_for",
    "train",
]

EVAL_METRICS = ("accuracy", "macro_f1")

# fixed-purpose rng streams under one seed
STREAM_INIT = 0
STREAM_NOISE = 1
STREAM_SHUFFLE = 2


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch_index, loss):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch_index}")
        self.epoch = epoch
        self.batch_index = batch_index
        self.loss = loss


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 0.5
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    eval_metric: str = "accuracy"

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be > 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if self.eval_metric not in EVAL_METRICS:
            raise ValueError(f"eval_metric must be one of {EVAL_METRICS}")


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_global_norm(grads, max_norm: float):
    """Jointly rescale the gradient list if its combined norm exceeds max_norm.

    The whole list is scaled by one factor, so the update direction is
    preserved exactly; gradients at or under the threshold (including all
    zeros) pass through unchanged.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads]
    return list(grads)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(m={n: np.zeros_like(a) for n, a in params.named()},
                   v={n: np.zeros_like(a) for n, a in params.named()})


def adam_step(params: ModelParams, grads: dict, state: AdamState,
              config: TrainConfig) -> None:
    """One in-place Adam update. The PAD embedding row is never touched."""
    state.t += 1
    bc1 = 1.0 - config.beta1 ** state.t
    bc2 = 1.0 - config.beta2 ** state.t
    for name, theta in params.named():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter {name} shape {theta.shape}")
        if name == "embedding":
            g = g.copy()
            g[0] = 0.0
        m = state.m[name]
        v = state.v[name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        theta -= config.lr * (m / bc1) / (np.sqrt(v / bc2) + config.eps)


class EarlyStopper:
    """Keep the best-metric epoch; stop after `patience` non-improvements.

    Ties do not count as improvements, so the earlier checkpoint wins.
    """

    def __init__(self, patience: int):
        self.patience = patience
        self.best_metric = -np.inf
        self.best_epoch = None
        self._streak = 0

    def update(self, epoch: int, metric: float):
        """Returns (is_new_best, should_stop)."""
        if metric > self.best_metric:
            self.best_metric = metric
            self.best_epoch = epoch
            self._streak = 0
            return True, False
        self._streak += 1
        return False, self._streak >= self.patience


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_metric: float


@dataclass
class TrainResult:
    params: ModelParams        # best-epoch snapshot
    best_epoch: int
    best_metric: float
    history: list[EpochStats] = field(default_factory=list)


def confusion(params: ModelParams, config: ModelConfig, batches) -> ConfusionMatrix:
    counts = np.zeros((config.num_classes, config.num_classes), dtype=np.int64)
    for batch in batches:
        preds, _, _ = predict(batch, params, config)
        np.add.at(counts, (batch.labels, preds), 1)
    return ConfusionMatrix(counts)


def evaluate_metric(params: ModelParams, config: ModelConfig, batches,
                    metric: str) -> float:
    cm = confusion(params, config, batches)
    return accuracy(cm) if metric == "accuracy" else macro_f1(cm)


def train(params: ModelParams, model_config: ModelConfig,
          train_config: TrainConfig, train_set, val_set, vocab, table,
          *, lowercase: bool = True) -> TrainResult:
    """Optimize ``params`` in place and return the best-epoch snapshot.

    ``train_set``/``val_set`` are (text, label_index) pairs; batches are
    rebuilt (reshuffled, repadded) every epoch from a seeded stream. Each
    step runs forward/backward, freezes the PAD embedding gradient, clips
    the joint norm, and applies Adam. Validation uses ``eval_metric``; a
    non-finite loss aborts with epoch/batch/loss attached.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation splits must be non-empty")
    noise_rng = rng_for(train_config.seed, STREAM_NOISE)
    shuffle_rng = rng_for(train_config.seed, STREAM_SHUFFLE)
    val_batches = make_batches(val_set, vocab, table, train_config.batch_size,
                               seed=0, lowercase=lowercase, shuffle=False)
    state = AdamState.for_params(params)
    stopper = EarlyStopper(train_config.patience)
    names = [n for n, _ in params.named()]
    history: list[EpochStats] = []
    best_params = None
    for epoch in range(1, train_config.max_epochs + 1):
        epoch_seed = int(shuffle_rng.integers(np.iinfo(np.int64).max))
        batches = make_batches(train_set, vocab, table, train_config.batch_size,
                               seed=epoch_seed, lowercase=lowercase)
        loss_sum = 0.0
        n_seen = 0
        for batch_index, batch in enumerate(batches):
            res = forward(batch, params, model_config, mode="train", rng=noise_rng)
            loss = ad.softmax_cross_entropy(res.logits, batch.labels)
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                raise TrainingDivergedError(epoch, batch_index, loss_value)
            grad_map = res.tape.backward(loss)
            grads = {n: grad_map[leaf.node_id] for n, leaf in res.leaves.items()}
            grads["embedding"][0] = 0.0  # PAD row stays frozen
            clipped = clip_global_norm([grads[n] for n in names],
                                       train_config.clip_norm)
            adam_step(params, dict(zip(names, clipped)), state, train_config)
            loss_sum += loss_value * len(batch)
            n_seen += len(batch)
        val_metric = evaluate_metric(params, model_config, val_batches,
                                     train_config.eval_metric)
        history.append(EpochStats(epoch, loss_sum / n_seen, val_metric))
        is_best, should_stop = stopper.update(epoch, val_metric)
        if is_best:
            best_params = params.copy()
        if should_stop:
            break
    return TrainResult(best_params, stopper.best_epoch, stopper.best_metric,
                       history)


def format_history(result: TrainResult) -> str:
    """History file: one `epoch<TAB>train_loss<TAB>val_metric` line per epoch,
    then a summary line with the best epoch."""
    lines = [f"{s.epoch}\t{s.train_loss!r}\t{s.val_metric!r}"
             for s in result.history]
    lines.append(f"best\t{result.best_epoch}\t{result.best_metric!r}")
    return "".join(line + "\n" for line in lines)


def multi_seed_summary(rows) -> str:
    """Summary file: `seed<TAB>val<TAB>test` rows then a mean +/- std line.

    ``rows`` is a list of (seed, val_metric, test_metric-or-None).
    """
    lines = ["seed\tval_metric\ttest_metric"]
    for seed, val, test in rows:
        lines.append(f"{seed}\t{val!r}\t" + (repr(test) if test is not None else "-"))
    vals = np.array([v for _, v, _ in rows], dtype=np.float64)
    lines.append(f"mean\t{vals.mean()!r}\t+/-{vals.std()!r}")
    tests = [t for _, _, t in rows if t is not None]
    if tests:
        t = np.array(tests)
        lines.append(f"test_mean\t{t.mean()!r}\t+/-{t.std()!r}")
    return "".join(line + "\n" for line in lines)
