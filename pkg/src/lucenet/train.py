"""Adam optimisation, the training loop, and pretext pretraining.

The loop runs the published recipe by default: 10 epochs, batch size 2,
learning rate 1e-4, Adam with the canonical 0.9/0.999/1e-8 moments. Two
regimes exist: "retrained" trains the whole network from Gaussian init, and
"pretrained" loads a frozen backbone from a pretext checkpoint and trains the
classifier head only. The pretext task (dark-band presence over textured
backgrounds) is the desk-scale stand-in for large-scale non-medical
pretraining.

Every source of randomness flows from the single config seed through named
sub-streams, so identical seeds give bit-identical models and histories.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .data import (AugmentParams, SampleImage, augment, generate_pretext_dataset,
                   LABEL_LOOSE)
from .rng import derive_seed, substream

log = logging.getLogger(__name__)

REGIMES = ("pretrained", "retrained")


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def init_adam(model: M.Model, lr: float = 1e-4) -> AdamState:
    state = AdamState(lr=lr)
    for name, p in model.params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adam_step(model: M.Model, state: AdamState) -> None:
    """One bias-corrected Adam update; frozen parameters are skipped."""
    state.t += 1
    corr1 = 1.0 - state.beta1 ** state.t
    corr2 = 1.0 - state.beta2 ** state.t
    for name, p in model.params.items():
        if name in model.frozen:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != "
                             f"parameter shape {p.data.shape} for {name}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - state.beta1) * (g - m)
        v += (1.0 - state.beta2) * (g * g - v)
        update = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
        if not np.isfinite(update).all():
            raise T.NonFiniteError(f"adam_step: non-finite update for {name}")
        p.data -= update


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2
    lr: float = 1e-4
    regime: str = "retrained"
    seed: int = 0
    augment: AugmentParams = field(default_factory=AugmentParams)
    pretext_checkpoint: str | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"TrainConfig: regime must be one of {REGIMES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("TrainConfig: epochs >= 0 and batch_size >= 1")


@dataclass
class TrainHistory:
    mean_loss: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    snapshots: dict[int, M.Model] = field(default_factory=dict)


def export_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,mean_loss,seconds\n")
        for i, (loss, sec) in enumerate(zip(history.mean_loss, history.seconds), 1):
            fh.write(f"{i},{loss:.6f},{sec:.3f}\n")


def _label_value(label: str) -> float:
    return 1.0 if label == LABEL_LOOSE else 0.0


def _stack(samples: list[SampleImage]) -> tuple[T.Tensor, T.Tensor]:
    x = np.stack([s.pixels for s in samples])[:, None]
    y = np.array([[_label_value(s.label)] for s in samples], dtype=np.float32)
    return T.Tensor(x), T.Tensor(y)


def _train_step(model: M.Model, state: AdamState, xb: T.Tensor, yb: T.Tensor,
                dropout_rng: np.random.Generator, use_dropout: bool = True) -> float:
    with T.Tape():
        logits = M.forward(model, xb, training=use_dropout, rng=dropout_rng)
        loss = T.bce_loss(T.sigmoid(logits), yb)
    T.backward(loss)
    adam_step(model, state)
    M.zero_grads(model)
    return loss.item()


def fit(model: M.Model, train_set: list[SampleImage], config: TrainConfig,
        snapshot_epochs: tuple[int, ...] = ()) -> tuple[M.Model, TrainHistory]:
    """Train in place over shuffled, per-batch-augmented epochs.

    The final short batch of an epoch is kept, every sample is seen exactly
    once per epoch, and model snapshots (deep copies) are taken after each
    epoch listed in ``snapshot_epochs``.
    """
    if not train_set:
        raise ValueError("fit: empty training set")
    labels = {s.label for s in train_set}
    if len(labels) < 2:
        warnings.warn("fit: single-class training set; proceeding anyway")
    backbone = set(model.backbone_names())
    if config.regime == "pretrained":
        if model.frozen != backbone:
            raise ValueError("fit: pretrained regime expects a frozen backbone "
                             "loaded from a pretext checkpoint")
    elif model.frozen:
        raise ValueError("fit: retrained regime expects no frozen parameters")

    state = init_adam(model, lr=config.lr)
    shuffle_rng = substream(config.seed, "fit", "shuffle")
    dropout_rng = substream(config.seed, "fit", "dropout")
    history = TrainHistory()
    n = len(train_set)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        augment_rng = substream(config.seed, "fit", "augment", f"epoch{epoch}")
        order = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            batch = [augment(train_set[i], config.augment, augment_rng)
                     for i in order[lo:lo + config.batch_size]]
            xb, yb = _stack(batch)
            total += _train_step(model, state, xb, yb, dropout_rng) * len(batch)
        history.mean_loss.append(total / n)
        history.seconds.append(time.perf_counter() - start)
        if epoch in snapshot_epochs:
            history.snapshots[epoch] = M.clone(model)
    model.provenance = {**model.provenance, "seed": config.seed,
                        "regime": config.regime, "epochs": config.epochs}
    return model, history


# ---------------------------------------------------------------------------
# pretext pretraining (the ImageNet stand-in)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PretextConfig:
    n_images: int = 2000
    holdout_frac: float = 0.2
    epochs: int = 6
    batch_size: int = 16
    lr: float = 3e-3
    seed: int = 0
    accuracy_floor: float = 0.8
    # head dropout off by default: with 2000 pretext images the tiny model
    # needs no extra regularisation and the noise stalls the loss plateau
    use_dropout: bool = False

    def __post_init__(self):
        if not 0.0 < self.holdout_frac < 1.0:
            raise ValueError("PretextConfig: holdout_frac must be in (0, 1)")


def pretext_pretrain(model_config: M.DenseNetConfig, config: PretextConfig,
                     out_path) -> tuple[str, float]:
    """Train the full network on band presence, emit a backbone checkpoint.

    Returns (checkpoint path, held-out pretext accuracy). Accuracy below the
    configured floor only warns: a weak backbone is a quality signal, not a
    hard failure.
    """
    x, y = generate_pretext_dataset(config.n_images, model_config.input_size,
                                    config.seed)
    n_hold = max(1, int(round(config.n_images * config.holdout_frac)))
    x_train, y_train = x[:-n_hold], y[:-n_hold]
    x_hold, y_hold = x[-n_hold:], y[-n_hold:]

    model = M.build(model_config, seed=derive_seed(config.seed, "pretext-init"),
                    std="he")
    state = init_adam(model, lr=config.lr)
    shuffle_rng = substream(config.seed, "pretext", "shuffle")
    dropout_rng = substream(config.seed, "pretext", "dropout")
    n = len(x_train)
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb = T.Tensor(x_train[idx])
            yb = T.Tensor(y_train[idx][:, None])
            total += _train_step(model, state, xb, yb, dropout_rng,
                                 use_dropout=config.use_dropout) * len(idx)
        log.info("pretext epoch %d: mean loss %.4f", epoch, total / n)

    accuracy = _pretext_accuracy(model, x_hold, y_hold)
    if accuracy < config.accuracy_floor:
        warnings.warn(f"weak backbone: pretext held-out accuracy "
                      f"{accuracy:.3f} < {config.accuracy_floor}")
    model.provenance = {"seed": config.seed, "regime": "pretext",
                        "epochs": config.epochs,
                        "pretext_accuracy": round(accuracy, 4)}
    M.save_checkpoint(model, out_path, scope="backbone")
    return str(out_path), accuracy


def _pretext_accuracy(model: M.Model, x: np.ndarray, y: np.ndarray,
                      chunk: int = 64) -> float:
    hits = 0
    for lo in range(0, len(x), chunk):
        logits = M.forward(model, T.Tensor(x[lo:lo + chunk]), training=False)
        pred = (T.sigmoid(logits).data[:, 0] >= 0.5).astype(np.float32)
        hits += (pred == y[lo:lo + chunk]).sum()
    return float(hits) / len(x)


def score_samples(model: M.Model, samples: list[SampleImage],
                  chunk: int = 32) -> np.ndarray:
    """Inference probabilities (sigmoid of the logit) for a list of samples."""
    probs = np.empty(len(samples), dtype=np.float32)
    for lo in range(0, len(samples), chunk):
        xb, _ = _stack(samples[lo:lo + chunk])
        logits = M.forward(model, xb, training=False)
        probs[lo:lo + len(samples[lo:lo + chunk])] = T.sigmoid(logits).data[:, 0]
    return probs
