"""Training loops over complex datasets.

Two task shapes share one loop: complex-level supervision (one target row per
sample, splits over samples) and node-level transductive supervision (one
complex, targets per node, splits over nodes with the loss restricted to
training nodes).  Each optimizer step averages per-sample losses, clips the
global gradient norm, and applies Adam under a cosine or constant schedule.
Regression targets are standardized with training-split statistics and every
metric is reported in the original units.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .complexes import CombinatorialComplex
from .model import EtnnModel
from .neighborhoods import NeighborhoodCollection

__all__ = [
    "TrainingError",
    "EmptyDataset",
    "TargetMismatch",
    "BadFractions",
    "EmptyMask",
    "TrainConfig",
    "Splits",
    "make_splits",
    "History",
    "train",
    "evaluate",
    "METRICS",
]

LOSS_NAMES = ("mse", "mae", "huber", "bce")
METRICS = ("mae", "rmse", "r2", "accuracy")
_HIGHER_BETTER = ("r2", "accuracy")


class TrainingError(ValueError):
    pass


class EmptyDataset(TrainingError):
    pass


class TargetMismatch(TrainingError):
    pass


class BadFractions(TrainingError):
    pass


class EmptyMask(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    base_lr: float = 1e-3
    weight_decay: float = 0.0
    clip_norm: float | None = 1.0
    loss: str = "mse"
    huber_delta: float = 1.0
    metric: str = "mae"
    schedule: str = "cosine"
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    standardize_targets: bool = True
    seed: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be at least 1")
        if self.loss not in LOSS_NAMES:
            raise TrainingError(f"loss {self.loss!r} not in {LOSS_NAMES}")
        if self.metric not in METRICS:
            raise TrainingError(f"metric {self.metric!r} not in {METRICS}")
        if self.schedule not in ("cosine", "constant"):
            raise TrainingError(f"schedule must be cosine or constant")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise TrainingError("clip_norm must be positive or None")
        _check_fractions(self.fractions)

    def loss_fn(self):
        if self.loss == "huber":
            return lambda p, t: ad.huber_loss(p, t, self.huber_delta)
        return ad.LOSSES[self.loss]


def _check_fractions(fractions) -> tuple[float, float, float]:
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise BadFractions(f"need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise BadFractions(f"fractions must sum to 1, got {fractions}")
    return tuple(float(f) for f in fractions)


# -- splits ------------------------------------------------------------------------


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {
                "train": self.train.tolist(),
                "val": self.val.tolist(),
                "test": self.test.tolist(),
            }
        )

    @staticmethod
    def from_json(text: str) -> "Splits":
        doc = json.loads(text)
        return Splits(
            np.asarray(doc["train"], dtype=np.int64),
            np.asarray(doc["val"], dtype=np.int64),
            np.asarray(doc["test"], dtype=np.int64),
        )


def _largest_remainder_counts(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    remainder = n - sum(counts)
    order = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def make_splits(
    num_items: int,
    fractions: Sequence[float] = (0.7, 0.15, 0.15),
    seed: int = 0,
    groups: Sequence[int] | None = None,
) -> Splits:
    """Disjoint train/val/test index sets.

    Without groups, sizes follow the fractions by largest remainder (so
    70/15/15 of 100 is exactly 70, 15, 15).  With group labels, whole groups
    are dealt to whichever split is furthest below its item quota; members of
    one group never straddle splits.
    """
    fractions = _check_fractions(fractions)
    if num_items < 1:
        raise EmptyDataset("cannot split zero items")
    rng = np.random.default_rng(seed)
    if groups is None:
        counts = _largest_remainder_counts(num_items, fractions)
        perm = rng.permutation(num_items)
        a, b = counts[0], counts[0] + counts[1]
        return Splits(np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:]))

    groups = np.asarray(groups)
    if groups.shape[0] != num_items:
        raise TrainingError(
            f"got {groups.shape[0]} group labels for {num_items} items"
        )
    members: dict = {}
    for idx, g in enumerate(groups):
        members.setdefault(g, []).append(idx)
    labels = sorted(members)
    rng.shuffle(labels)
    quota = [num_items * f for f in fractions]
    filled = [0, 0, 0]
    buckets: list[list[int]] = [[], [], []]
    for g in labels:
        deficits = [quota[i] - filled[i] for i in range(3)]
        slot = int(np.argmax(deficits))
        buckets[slot].extend(members[g])
        filled[slot] += len(members[g])
    return Splits(*(np.sort(np.asarray(b, dtype=np.int64)) for b in buckets))


# -- dataset handling ------------------------------------------------------------------


def _normalize_item(model: EtnnModel, item, node_level: bool):
    cc, collection, target = item
    target = np.asarray(target, dtype=np.float64)
    out = model.config.out_width
    if node_level:
        if target.ndim == 1:
            target = target.reshape(-1, 1)
        if target.shape != (cc.num_nodes, out):
            raise TargetMismatch(
                f"node targets must be ({cc.num_nodes}, {out}), got {target.shape}"
            )
    else:
        target = target.reshape(1, -1)
        if target.shape[1] != out:
            raise TargetMismatch(
                f"complex target width {target.shape[1]} != out_width {out}"
            )
    return cc, collection, target


@dataclass
class History:
    """Per-epoch record plus everything needed to undo target scaling."""

    rows: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_val: float | None = None
    target_mean: np.ndarray | None = None
    target_std: np.ndarray | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(
                fh, fieldnames=["epoch", "lr", "train_loss", "val_metric"]
            )
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)

    @property
    def target_stats(self):
        if self.target_mean is None:
            return None
        return self.target_mean, self.target_std


def _better(metric: str, candidate: float, incumbent: float | None) -> bool:
    if incumbent is None:
        return True
    if metric in _HIGHER_BETTER:
        return candidate > incumbent
    return candidate < incumbent


def train(
    model: EtnnModel,
    dataset: Sequence[tuple[CombinatorialComplex, NeighborhoodCollection, np.ndarray]],
    config: TrainConfig,
    splits: Splits | None = None,
) -> tuple[EtnnModel, History]:
    """Fit the model; returns it with the best-validation parameters restored.

    ``dataset`` rows are (complex, collection, target).  Node-level models
    take exactly one row and interpret splits over its nodes; the loss sees
    training nodes only.
    """
    if len(dataset) == 0:
        raise EmptyDataset("no samples")
    node_level = model.config.readout_level == "node"
    if node_level and len(dataset) != 1:
        raise TargetMismatch(
            "node-level training is transductive: pass exactly one complex"
        )
    items = [_normalize_item(model, item, node_level) for item in dataset]

    num_units = items[0][2].shape[0] if node_level else len(items)
    if splits is None:
        splits = make_splits(num_units, config.fractions, seed=config.seed)
    if splits.train.size == 0:
        raise EmptyDataset("training split is empty")

    history = History()
    standardize = config.standardize_targets and config.loss != "bce"
    if standardize:
        train_rows = (
            items[0][2][splits.train]
            if node_level
            else np.concatenate([items[i][2] for i in splits.train], axis=0)
        )
        mean = train_rows.mean(axis=0)
        std = train_rows.std(axis=0)
        std = np.where(std < 1e-8, 1.0, std)
        history.target_mean, history.target_std = mean, std
    else:
        mean, std = 0.0, 1.0

    loss_fn = config.loss_fn()
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = (
        1 if node_level else math.ceil(splits.train.size / config.batch_size)
    )
    total_steps = config.epochs * steps_per_epoch
    best_params: dict[str, np.ndarray] | None = None
    best_extras: dict[str, np.ndarray] = {}

    for epoch in range(1, config.epochs + 1):
        epoch_loss = 0.0
        if node_level:
            batches = [np.array([0])]
        else:
            perm = rng.permutation(splits.train)
            batches = [
                perm[i : i + config.batch_size]
                for i in range(0, perm.size, config.batch_size)
            ]
        for batch in batches:
            model.store.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                cc, collection, target = items[int(idx)]
                res = model.forward(cc, collection, training=True)
                pred = res.prediction
                if node_level:
                    pred = ad.gather_rows(pred, splits.train)
                    y = (target[splits.train] - mean) / std
                else:
                    y = (target - mean) / std
                loss = loss_fn(pred, y)
                ad.backward(ad.scale(loss, 1.0 / batch.size))
                batch_loss += float(loss.value) / batch.size
            if config.clip_norm is not None:
                model.store.clip_gradients(config.clip_norm)
            lr = (
                ad.cosine_lr(model.store.step_count, total_steps, config.base_lr)
                if config.schedule == "cosine"
                else config.base_lr
            )
            model.store.adam_step(lr=lr, weight_decay=config.weight_decay)
            epoch_loss += batch_loss
        epoch_loss /= len(batches)

        val_metric = float("nan")
        if splits.val.size:
            val_metric = evaluate(
                model,
                items,
                config.metric,
                mask=splits.val,
                target_stats=history.target_stats,
            )
            if _better(config.metric, val_metric, history.best_val):
                history.best_val = val_metric
                history.best_epoch = epoch
                best_params = {
                    k: p.value.copy() for k, p in model.store.params.items()
                }
                best_extras = model.normalizer_state()
        history.rows.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": epoch_loss,
                "val_metric": val_metric,
            }
        )

    if best_params is not None:
        for k, p in model.store.params.items():
            p.value[:] = best_params[k]
        model.load_normalizer_state(best_extras)
    if config.checkpoint_path is not None:
        extras = model.normalizer_state()
        if history.target_mean is not None:
            extras["target_mean"] = history.target_mean
            extras["target_std"] = history.target_std
        ad.save_checkpoint(model.store, config.checkpoint_path, extras=extras)
    return model, history


# -- metrics -------------------------------------------------------------------------


def _metric_value(metric: str, pred: np.ndarray, target: np.ndarray) -> float:
    err = pred - target
    if metric == "mae":
        return float(np.abs(err).mean())
    if metric == "rmse":
        return float(np.sqrt((err**2).mean()))
    if metric == "r2":
        ss_res = float((err**2).sum())
        ss_tot = float(((target - target.mean(axis=0)) ** 2).sum())
        if ss_tot == 0.0:
            return 1.0 if ss_res == 0.0 else 0.0
        return 1.0 - ss_res / ss_tot
    # accuracy: binary via the logit sign, multi-class via argmax
    if pred.shape[1] == 1:
        classes = (pred[:, 0] > 0).astype(np.int64)
        truth = target[:, 0].astype(np.int64)
    else:
        classes = pred.argmax(axis=1)
        truth = target.argmax(axis=1) if target.shape[1] > 1 else target[:, 0]
    return float((classes == truth.astype(np.int64)).mean())


def evaluate(
    model: EtnnModel,
    dataset: Sequence[tuple],
    metric: str,
    mask: np.ndarray | None = None,
    target_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> float:
    """One scalar over the (masked) dataset, in original target units.

    ``mask`` selects samples, or nodes when the model is node-level.
    ``target_stats`` (mean, std) de-standardizes predictions first.
    """
    if metric not in METRICS:
        raise TrainingError(f"metric {metric!r} not in {METRICS}")
    if len(dataset) == 0:
        raise EmptyDataset("no samples to evaluate")
    node_level = model.config.readout_level == "node"
    items = [_normalize_item(model, item, node_level) for item in dataset]
    if mask is not None:
        mask = np.asarray(mask, dtype=np.int64)
        if mask.size == 0:
            raise EmptyMask("mask selects nothing")

    preds, targets = [], []
    if node_level:
        cc, collection, target = items[0]
        rows = model.forward(cc, collection).prediction.value
        if mask is not None:
            rows, target = rows[mask], target[mask]
        preds.append(rows)
        targets.append(target)
    else:
        chosen = range(len(items)) if mask is None else mask
        for idx in chosen:
            cc, collection, target = items[int(idx)]
            preds.append(model.forward(cc, collection).prediction.value)
            targets.append(target)
    pred = np.concatenate(preds, axis=0)
    target = np.concatenate(targets, axis=0)
    if target_stats is not None:
        mean, std = target_stats
        pred = pred * std + mean
    return _metric_value(metric, pred, target)
