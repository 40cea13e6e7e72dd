"""Mini-batch Adam training with validation-loss early stopping."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from ..metric import average_pk
from .graph import ModelGraph, backward, forward, mse_loss
from .optim import AdamState, EarlyStopping, adam_step

__all__ = ["TrainConfig", "EpochRecord", "TrainLog", "Checkpoint", "Dataset", "train", "predict_array", "as_float_batch"]

log = logging.getLogger(__name__)

EVAL_BATCH = 32


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 2000
    batch_size: int = 16
    early_stop_patience: int = 10
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    loss: str = "mse"
    # fraction of the labelled data used for training, the rest validates
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        for key in ("max_epochs", "batch_size", "early_stop_patience"):
            if getattr(self, key) < 1:
                raise ValueError(f"{key} must be >= 1")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r} (only 'adam')")
        if self.loss != "mse":
            raise ValueError(f"unsupported loss {self.loss!r} (only 'mse')")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_pk: float | None


@dataclass
class Checkpoint:
    """Everything needed to continue a run exactly where it stopped.

    ``weights`` are the weights after ``epoch`` (not the restored best ones).
    """

    epoch: int
    weights: dict[str, np.ndarray]
    adam: AdamState
    stopper: EarlyStopping | None = None
    best_weights: dict[str, np.ndarray] | None = None


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stop_reason: str = ""
    checkpoint: Checkpoint | None = None

    def __len__(self):
        return len(self.records)


class Dataset(NamedTuple):
    """Images (N, C, H, W), uint8 or float in [0, 1], and targets (N,)."""

    images: np.ndarray
    targets: np.ndarray


def as_float_batch(images: np.ndarray, dtype) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(dtype) / np.asarray(255.0, dtype=dtype)
    return images.astype(dtype, copy=False)


def predict_array(graph: ModelGraph, images: np.ndarray, batch_size: int = EVAL_BATCH) -> np.ndarray:
    """Eval-mode predictions for every image, shape (N,).

    The last batch is zero-padded to ``batch_size`` so every image passes through
    identically shaped matrix products; BLAS blocking then cannot make a
    prediction depend on which other images share its batch.
    """
    out = []
    for start in range(0, len(images), batch_size):
        xb = as_float_batch(images[start : start + batch_size], graph.dtype)
        n = len(xb)
        if n < batch_size:
            xb = np.concatenate([xb, np.zeros((batch_size - n,) + xb.shape[1:], dtype=xb.dtype)])
        out.append(forward(graph, xb, "eval").reshape(-1)[:n])
    return np.concatenate(out) if out else np.zeros(0, dtype=graph.dtype)


def _val_pk(reference: np.ndarray, pred: np.ndarray) -> float | None:
    # too few or all-identical validation labels leave PK undefined
    try:
        return average_pk(reference, pred).mean_pk
    except ValueError:
        return None


def train(
    graph: ModelGraph,
    train_set: Dataset,
    val_set: Dataset | None,
    config: TrainConfig,
    val_reference: np.ndarray | None = None,
    on_epoch: Callable[[EpochRecord, ModelGraph], bool] | None = None,
    resume: Checkpoint | None = None,
) -> tuple[ModelGraph, TrainLog]:
    """Train ``graph`` in place and return it with its per-epoch log.

    The training set is reshuffled every epoch from ``config.seed``. With a
    validation set, training stops once the validation loss has not strictly
    improved for ``early_stop_patience`` epochs and the weights of the best
    epoch are restored. ``val_reference`` holds one or more label columns for
    the per-epoch PK (defaults to the validation targets). ``on_epoch`` is
    called after every epoch and stops training by returning True.

    ``resume`` continues from a :class:`Checkpoint` (weights, Adam moments,
    epoch counter and early-stopping state); ``config.max_epochs`` then counts
    the total including the epochs already done, so a resumed run reproduces
    an uninterrupted one epoch for epoch. The log's ``checkpoint`` holds the
    state after the last completed epoch.
    """
    x, y = train_set
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n == 0:
        raise ValueError("training set is empty")
    if val_set is not None:
        xv, yv = val_set
        yv = np.asarray(yv, dtype=np.float64)
        if len(yv) == 0:
            raise ValueError("validation set is empty")
        ref = np.atleast_2d(yv if val_reference is None else np.asarray(val_reference, dtype=np.float64))
        if ref.shape[1] != len(yv):
            raise ValueError("val_reference columns must align with the validation set")
    stopper = EarlyStopping(config.early_stop_patience) if val_set is not None else None
    state = AdamState()
    best_state = None
    start = 1
    if resume is not None:
        if (resume.stopper is None) != (stopper is None):
            raise ValueError("checkpoint and this run disagree on whether a validation set is used")
        for name, t in graph.weights.items():
            if name not in resume.weights or resume.weights[name].shape != t.shape:
                raise ValueError(f"checkpoint does not match the graph at tensor {name!r}")
        graph.set_state(resume.weights)
        state = copy.deepcopy(resume.adam)
        stopper = copy.deepcopy(resume.stopper)
        best_state = None if resume.best_weights is None else {k: v.copy() for k, v in resume.best_weights.items()}
        start = resume.epoch + 1
    tlog = TrainLog()
    seed = config.seed
    epoch = start - 1
    # a checkpoint taken after early stopping fired is already finished
    last = epoch if stopper is not None and stopper.bad_epochs >= stopper.patience else config.max_epochs
    for epoch in range(start, last + 1):
        order = np.random.default_rng([seed, 1, epoch]).permutation(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            xb = as_float_batch(x[idx], graph.dtype)
            yb = y[idx]
            pred = forward(graph, xb, "train", seed=(seed, 2, epoch, b))
            total += mse_loss(pred, yb) * len(idx)
            grads = backward(graph, xb, yb)
            adam_step(
                {k: t.values for k, t in graph.weights.items()},
                grads,
                state,
                config.learning_rate,
                config.beta1,
                config.beta2,
                config.epsilon,
            )
        graph._tape = None
        record = EpochRecord(epoch, total / n, None, None)
        stop = False
        if stopper is not None:
            val_pred = predict_array(graph, xv)
            record.val_loss = mse_loss(val_pred, yv)
            record.val_pk = _val_pk(ref, val_pred)
            stop = stopper.update(epoch, record.val_loss)
            if stopper.best_epoch == epoch:
                best_state = graph.get_state()
        tlog.records.append(record)
        log.debug(
            "epoch %d train_loss=%.6g val_loss=%s val_pk=%s", epoch, record.train_loss, record.val_loss, record.val_pk
        )
        if stop:
            tlog.stop_reason = "early_stopping"
            break
        if on_epoch is not None and on_epoch(record, graph):
            tlog.stop_reason = "callback"
            break
    else:
        tlog.stop_reason = "max_epochs" if last == config.max_epochs else "early_stopping"
    tlog.checkpoint = Checkpoint(
        epoch,
        graph.get_state(),
        copy.deepcopy(state),
        copy.deepcopy(stopper),
        None if best_state is None else {k: v.copy() for k, v in best_state.items()},
    )
    if stopper is not None and best_state is not None:
        graph.set_state(best_state)
        tlog.best_epoch = stopper.best_epoch
    else:
        tlog.best_epoch = epoch
    return graph, tlog
