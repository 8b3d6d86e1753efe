"""Per-individual training loop and MSE evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import WindowedSamples
from .models import ForecasterModel


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainConfig:
    epochs: int = 300
    lr: float = 0.01
    dropout: float = 0.3
    seq_len: int = 5
    seed: int = 0
    clip_norm: float | None = 5.0
    train_fraction: float = 0.7

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")


@dataclass
class EvalRecord:
    individual_id: str
    family: str
    metric: str
    gdt: float
    seq_len: int
    seed: int
    test_mse: float
    train_curve: list[float] = field(default_factory=list)
    failed: bool = False
    error: str = ""


def mse(true, pred) -> float:
    """Mean squared error over every (timepoint, variable) entry."""
    true = np.asarray(true, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if true.shape != pred.shape:
        raise ValueError(f"shape mismatch: {true.shape} vs {pred.shape}")
    if true.size == 0:
        raise ValueError("mse of an empty set")
    diff = true - pred
    return float(np.mean(diff * diff))


def cohort_mse(trues: Sequence[np.ndarray], preds: Sequence[np.ndarray]) -> float:
    """Pooled squared error over all individuals, divided by the total entry count."""
    if not trues:
        raise ValueError("mse of an empty cohort")
    total, count = 0.0, 0
    for t, p in zip(trues, preds, strict=True):
        t, p = np.asarray(t, float), np.asarray(p, float)
        if t.shape != p.shape:
            raise ValueError(f"shape mismatch: {t.shape} vs {p.shape}")
        total += float(np.sum((t - p) ** 2))
        count += t.size
    return total / count


def train(model: ForecasterModel, windows: WindowedSamples, config: TrainConfig) -> list[float]:
    """Full-batch Adam training; returns the per-epoch training loss.

    Dropout is active during training and driven by a generator seeded
    from ``config.seed``.
    """
    if len(windows) == 0:
        raise ValueError("no training windows")
    params = model.parameters()
    optimizer = ad.Adam(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    target = windows.targets
    curve = []
    for epoch in range(1, config.epochs + 1):
        optimizer.zero_grad()
        pred = model.forward(windows.inputs, training=True, rng=rng)
        loss = ad.mse_loss(pred, target)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(epoch, value)
        loss.backward()
        if config.clip_norm is not None:
            ad.clip_grad_norm(params, config.clip_norm)
        optimizer.step()
        curve.append(value)
    model.trained = True
    return curve


def evaluate(model: ForecasterModel, windows: WindowedSamples) -> float:
    """Eval-mode MSE over all test windows and variables."""
    if len(windows) == 0:
        raise ValueError("no test windows")
    return mse(windows.targets, model.predict(windows.inputs))


def make_record(individual_id: str, family: str, metric: str, gdt: float, config: TrainConfig,
                test_mse: float, curve: list[float]) -> EvalRecord:
    return EvalRecord(individual_id, family, metric, gdt, config.seq_len, config.seed, test_mse, curve)


RECORD_FIELDS = ["individual_id", "family", "metric", "gdt", "seq_len", "seed", "test_mse"]


def write_records(records: Iterable[EvalRecord], path, curves_path=None) -> None:
    records = list(records)
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_FIELDS + ["failed"])
        for r in records:
            w.writerow([r.individual_id, r.family, r.metric, r.gdt, r.seq_len, r.seed,
                        format(r.test_mse, ".17g"), int(r.failed)])
    if curves_path is not None:
        with Path(curves_path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["individual_id", "family", "metric", "gdt", "seq_len", "seed", "epoch", "loss"])
            for r in records:
                for epoch, loss in enumerate(r.train_curve, start=1):
                    w.writerow([r.individual_id, r.family, r.metric, r.gdt, r.seq_len, r.seed,
                                epoch, format(loss, ".17g")])


def read_records(path) -> list[EvalRecord]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(EvalRecord(row["individual_id"], row["family"], row["metric"], float(row["gdt"]),
                                  int(row["seq_len"]), int(row["seed"]), float(row["test_mse"]),
                                  failed=bool(int(row.get("failed", 0) or 0))))
    return out
