"""Two-phase training: full precision first, then fake-quantized fine-tuning."""

from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autograd as ag
from .data import DatasetSplits
from .model import TransformerModel
from .quant import QuantPolicy

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs_float: int = 20
    epochs_qat: int = 10
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    split: str
    mse: float
    seconds: float


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_val_float: float = float("inf")
    best_val_qat: float | None = None
    optimizer: ag.OptimizerState | None = None

    def last(self, split: str) -> float:
        return [r.mse for r in self.history if r.split == split][-1]


def evaluate(model: TransformerModel, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
    """Mean squared error over every window and horizon step, in eval mode."""
    was_training = model.training
    model.eval()
    sq = 0.0
    try:
        with ag.no_grad():
            for i in range(0, len(x), batch_size):
                d = model(x[i : i + batch_size]).data.astype(np.float64) - y[i : i + batch_size]
                sq += float((d * d).sum())
    finally:
        model.train(was_training)
    return sq / y.size


def _snapshot(model: TransformerModel) -> dict:
    params = {name: t.data.copy() for name, t, _ in model.named_parameters()}
    observers = {r: copy.copy(lin.quantizer.observer) for r, lin in model.linears.items() if lin.quantizer is not None}
    return {"params": params, "observers": observers}


def _restore(model: TransformerModel, snap: dict) -> None:
    params = model.parameters()
    for name, value in snap["params"].items():
        params[name].data = value.copy()
    for role, obs in snap["observers"].items():
        model.linears[role].quantizer.observer = copy.copy(obs)


def run_phase(
    model: TransformerModel,
    splits: dict[str, tuple[np.ndarray, np.ndarray]],
    epochs: int,
    cfg: TrainConfig,
    rng: np.random.Generator,
    result: TrainResult,
    epoch_offset: int = 0,
    on_record: Callable[[EpochRecord], None] | None = None,
) -> float:
    """Train for ``epochs`` epochs, keep the parameters with the best validation MSE."""
    xtr, ytr = splits["train"]
    xval, yval = splits["val"]
    state = ag.OptimizerState(lr=cfg.lr)
    params = model.parameters()
    best, snap = float("inf"), None
    for epoch in range(epoch_offset + 1, epoch_offset + epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = rng.permutation(len(xtr))
        total, count = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            model.zero_grad()
            loss = ag.mse_loss(model(xtr[idx]), ytr[idx])
            loss.backward()
            ag.adam_step(params, {k: p.grad for k, p in params.items()}, state)
            total += loss.item() * len(idx)
            count += len(idx)
        train_mse = total / count
        val_mse = evaluate(model, xval, yval)
        dt = time.perf_counter() - t0
        for rec in (EpochRecord(epoch, "train", train_mse, dt), EpochRecord(epoch, "val", val_mse, dt)):
            result.history.append(rec)
            if on_record:
                on_record(rec)
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, train_mse, val_mse, dt)
        if val_mse < best:
            best, snap = val_mse, _snapshot(model)
    if snap is not None:
        _restore(model, snap)
    result.optimizer = state
    model.eval()
    return best


def fit(
    model: TransformerModel,
    data: DatasetSplits,
    cfg: TrainConfig,
    policy: QuantPolicy | None = None,
    on_record: Callable[[EpochRecord], None] | None = None,
) -> TrainResult:
    """Float phase, then (when ``policy`` is given) a QAT phase warm-started from the best float weights."""
    n, m = model.config.n, model.config.m
    splits = {s: data.arrays(s, n, m) for s in ("train", "val", "test")}
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    if cfg.epochs_float > 0:
        result.best_val_float = run_phase(model, splits, cfg.epochs_float, cfg, rng, result, 0, on_record)
    if policy is not None and cfg.epochs_qat > 0:
        model.enable_qat(policy)
        result.best_val_qat = run_phase(model, splits, cfg.epochs_qat, cfg, rng, result, cfg.epochs_float, on_record)
        model.freeze_observers()
    test = evaluate(model, *splits["test"])
    rec = EpochRecord(cfg.epochs_float + (cfg.epochs_qat if policy is not None else 0), "test", test, 0.0)
    result.history.append(rec)
    if on_record:
        on_record(rec)
    return result


def split_mse(model: TransformerModel, data: DatasetSplits) -> dict[str, float]:
    n, m = model.config.n, model.config.m
    return {s: evaluate(model, *data.arrays(s, n, m)) for s in ("train", "val", "test")}

