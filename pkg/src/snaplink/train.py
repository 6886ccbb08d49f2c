"""Incremental per-snapshot training.

Each step fine-tunes the network on the current snapshot's future-edge
labels with Adam and early stopping on validation MRR, treating the
previous state as constant data (truncated backpropagation: only the
current snapshot and prior state are live). A meta-parameter set is blended
from the trained models and warm-starts the next step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, TrainingDiverged
from .model import (ForwardResult, HierarchicalNodeState, ModelParams,
                    MovingAverageCounter, forward)
from .snapshots import GraphSnapshot, LabelSet, sample_training_negatives


@dataclass
class TrainConfig:
    """Per-step fine-tuning knobs."""

    learning_rate: float = 0.003
    max_epochs: int = 100
    patience: int = 3
    train_neg_per_pos: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", f"must be >= 0, got {self.learning_rate}")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs", f"must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError("patience", f"must be >= 1, got {self.patience}")
        if self.train_neg_per_pos < 1:
            raise ConfigError("train_neg_per_pos",
                              f"must be >= 1, got {self.train_neg_per_pos}")


def bce_loss(scores: dc.Var, labels: np.ndarray) -> dc.Var:
    """Mean binary cross-entropy on raw logits (numerically stable)."""
    return dc.bce_with_logits(scores, labels)


class Adam:
    """Adam over a ParamSet. Moment state is fresh per fine-tune call."""

    def __init__(self, params: dc.ParamSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.value) for p in params}
        self.v = {p.name: np.zeros_like(p.value) for p in params}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.value = p.value - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def n_elements(self) -> int:
        return sum(a.size for a in self.m.values()) + sum(a.size for a in self.v.values())


@dataclass
class FineTuneResult:
    model: ModelParams
    state: HierarchicalNodeState
    best_val_mrr: float
    epochs_run: int
    final_train_loss: float


def fine_tune(model: ModelParams, snapshot: GraphSnapshot,
              h_prev: HierarchicalNodeState, labels: LabelSet,
              counter: MovingAverageCounter, cfg: TrainConfig,
              rng: np.random.Generator) -> FineTuneResult:
    """Train on one step's labels until validation MRR stops improving.

    Per epoch: resample one uniform negative per train positive, take a BCE
    step on the (positives + negatives) scores from a train-mode forward,
    then measure validation MRR with an eval-mode forward. Stops after
    `patience` consecutive epochs without a new best or at max_epochs, keeps
    the best-validation parameters, and recomputes the outgoing state once
    with them so the returned state matches the returned model.
    """
    from . import evaluate  # function-level: evaluate imports this module

    if labels.skip:
        raise ValueError(f"step {labels.step} has no labels to train on")
    cfg.validate()

    n_nodes = snapshot.n_nodes
    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    val_labels = labels.val_view()

    best_val = -np.inf
    best_arrays = model.state_arrays()
    epochs_run = 0
    stale = 0
    final_train_loss = float("nan")

    if labels.train_pos.shape[0] > 0:
        n_pos = labels.train_pos.shape[0]
        y = np.zeros((n_pos * (1 + cfg.train_neg_per_pos), 1), dtype=np.float64)
        y[:n_pos] = 1.0
        for epoch in range(1, cfg.max_epochs + 1):
            negatives = sample_training_negatives(labels, n_nodes, rng,
                                                  cfg.train_neg_per_pos)
            pairs = np.vstack([labels.train_pos, negatives])
            model.params.zero_grad()
            result = forward(snapshot, h_prev, model, counter, pairs, mode="train")
            loss = bce_loss(result.scores, y)
            if not np.isfinite(loss.value):
                raise TrainingDiverged(epoch, cfg.learning_rate)
            dc.backward(loss)
            opt.step()
            final_train_loss = float(loss.value)
            epochs_run = epoch

            if val_labels.skip:
                val = 0.0
            else:
                vres = forward(snapshot, h_prev, model, counter, mode="eval")
                val = evaluate.mrr(vres.top_repr, val_labels, model)
            if val > best_val:
                best_val = val
                best_arrays = model.state_arrays()
                stale = 0
            else:
                stale += 1
            if stale >= cfg.patience:
                break

    model.load_state_arrays(best_arrays)
    final = forward(snapshot, h_prev, model, counter, mode="eval")
    if best_val == -np.inf:
        best_val = float("nan")
    return FineTuneResult(model, final.state, float(best_val), epochs_run,
                          final_train_loss)


# ---------------------------------------------------------------------------
# Meta parameters
# ---------------------------------------------------------------------------


@dataclass
class MetaParams:
    """The blended warm-start model and its smoothing factor."""

    model: ModelParams
    alpha: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha", f"must be in [0, 1], got {self.alpha}")


def meta_update(meta: MetaParams, trained: ModelParams) -> MetaParams:
    """Blend the trained model into the meta model:
    theta_meta <- (1 - alpha) * theta_meta + alpha * theta_trained.

    Batch-norm running statistics blend identically (they are part of the
    warm start). alpha=1 copies the trained model exactly; alpha=0 leaves
    the meta model untouched. Mutates and returns `meta`.
    """
    a = meta.alpha
    if a == 0.0:
        return meta
    if a == 1.0:
        meta.model = trained.clone()
        return meta
    mp, tp = meta.model.params, trained.params
    if mp.names() != tp.names():
        raise ConfigError("meta", "parameter sets do not match")
    for name in mp.names():
        if mp[name].value.shape != tp[name].value.shape:
            raise ConfigError(
                "meta", f"shape mismatch for {name}: "
                        f"{mp[name].value.shape} vs {tp[name].value.shape}")
        mp[name].value = (1.0 - a) * mp[name].value + a * tp[name].value
    for key, stats in meta.model.bn_stats.items():
        other = trained.bn_stats[key]
        stats.running_mean = (1.0 - a) * stats.running_mean + a * other.running_mean
        stats.running_var = (1.0 - a) * stats.running_var + a * other.running_var
    return meta
