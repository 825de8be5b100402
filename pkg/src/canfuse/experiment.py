"""Training loop, evaluation and the with/without-CAN comparison."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import neuralnet as nn
from .dataset import Dataset, atomic_write_bytes
from .errors import DivergedLoss, EmptyInput, InvalidConfig, VariantMismatch
from .fusionmodel import VARIANTS, FusedModel, ModelConfig, predict_batch
from .synthetic import stream_rng

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    variants: tuple[str, str] = ("vision_only", "fused")
    val_groups: tuple[int, ...] = (5,)
    dataset: str | None = None
    mlp_hidden: tuple[int, ...] = (64, 32)
    head_hidden: tuple[int, ...] = (32, 16)

    def validate(self) -> None:
        if not (isinstance(self.epochs, int) and self.epochs >= 1):
            raise InvalidConfig(f"epochs must be a positive integer, got {self.epochs}")
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            raise InvalidConfig(f"batch_size must be a positive integer, got {self.batch_size}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise InvalidConfig(f"lr must be positive, got {self.lr}")
        if len(self.variants) != 2 or any(v not in VARIANTS for v in self.variants):
            raise InvalidConfig(f"comparison needs two variants from {VARIANTS}, got {self.variants}")
        if not self.val_groups:
            raise InvalidConfig("val_groups must be non-empty")

    def model_config(self, variant: str) -> ModelConfig:
        return ModelConfig(variant=variant, seed=self.seed, mlp_hidden=list(self.mlp_hidden),
                           head_hidden=list(self.head_hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = list(self.variants)
        d["val_groups"] = sorted(self.val_groups)
        d["mlp_hidden"] = list(self.mlp_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d


@dataclass
class TrainResult:
    model: FusedModel
    history: list[dict]
    best_epoch: int
    optimizer: nn.AdamState


def _can_or_none(model: FusedModel, ds: Dataset):
    return ds.can if model.fused else None


def predictions(model: FusedModel, ds: Dataset) -> np.ndarray:
    return predict_batch(model, ds.images, _can_or_none(model, ds))


def evaluate(model: FusedModel, ds: Dataset, variant: str | None = None) -> float:
    """RMSE of the model's steering predictions over every sample."""
    if len(ds) == 0:
        raise EmptyInput("no samples to evaluate")
    if variant is not None and variant != model.config.variant:
        raise VariantMismatch(f"model is {model.config.variant}, asked to evaluate as {variant}")
    if model.fused and ds.can.shape[1] != model.config.can_dim:
        raise VariantMismatch("dataset CAN width does not match the model")
    return nn.rmse(predictions(model, ds), ds.angles)


def fit_can_scaling(model: FusedModel, train: Dataset) -> None:
    if not model.fused:
        return
    model.can_mean = train.can.mean(axis=0)
    std = train.can.std(axis=0)
    model.can_std = np.where(std > 1e-12, std, 1.0)


def train(config: ExperimentConfig, dataset: Dataset, variant: str = "fused",
          split: tuple[Dataset, Dataset] | None = None) -> TrainResult:
    """Mini-batch Adam on MSE. Returns the parameters of the epoch with the
    lowest validation RMSE (earliest on ties) and the per-epoch history."""
    config.validate()
    train_ds, val_ds = split if split is not None else dataset.split(config.val_groups)
    model = FusedModel(config.model_config(variant))
    fit_can_scaling(model, train_ds)
    # start the output at the mean training label so early steps fit shape, not offset
    model.head.layers[-1].b[...] = train_ds.angles.mean()
    state = nn.AdamState.for_params(model.params, lr=config.lr)
    shuffle = stream_rng(config.seed, "shuffle")
    n = len(train_ds)
    history = []
    best = (math.inf, 0, None)
    for epoch in range(1, config.epochs + 1):
        order = shuffle.permutation(n)
        sse = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            imgs = train_ds.images[idx]
            x = (imgs, train_ds.can[idx]) if model.fused else imgs
            grads = nn.backward(model, x, train_ds.angles[idx])
            if not math.isfinite(grads.loss):
                raise DivergedLoss(f"non-finite training loss at epoch {epoch}, batch starting {start}")
            sse += grads.loss * len(idx)
            nn.adam_step(model.params, grads.params, state)
        val_rmse = evaluate(model, val_ds)
        if not math.isfinite(val_rmse):
            raise DivergedLoss(f"non-finite validation RMSE at epoch {epoch}")
        history.append({"epoch": epoch, "train_mse": sse / n, "val_rmse": val_rmse})
        log.info("%s epoch %d train_mse %.6g val_rmse %.6g", variant, epoch, sse / n, val_rmse)
        if val_rmse < best[0]:
            best = (val_rmse, epoch, [p.copy() for p in model.params])
    for dst, src in zip(model.params, best[2]):
        dst[...] = src
    return TrainResult(model, history, best[1], state)


@dataclass
class ComparisonReport:
    results: dict[str, dict]
    percent_decrease_val: float
    seed: int
    config: dict
    histories: dict[str, list[dict]] = field(default_factory=dict)
    val_predictions: dict[str, np.ndarray] = field(default_factory=dict)
    val_targets: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {name: dict(vals) for name, vals in self.results.items()}
        out["percent_decrease_val"] = self.percent_decrease_val
        out["config"] = self.config
        out["seed"] = self.seed
        out["history"] = self.histories
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def percent_decrease(without: float, with_: float) -> float:
    return 100.0 * (without - with_) / without


def compare(config: ExperimentConfig, dataset: Dataset) -> ComparisonReport:
    """Train the baseline and the treatment variant from the same seed and
    split, and report how much the treatment lowers validation RMSE."""
    config.validate()
    train_ds, val_ds = dataset.split(config.val_groups)
    results, histories, preds = {}, {}, {}
    rmse_val = []
    # keys are made unique when both arms use the same variant
    keys = list(config.variants)
    if keys[0] == keys[1]:
        keys = [f"{keys[0]}_a", f"{keys[1]}_b"]
    for key, variant in zip(keys, config.variants):
        res = train(config, dataset, variant, split=(train_ds, val_ds))
        p_val = predictions(res.model, val_ds)
        r_val = nn.rmse(p_val, val_ds.angles)
        results[key] = {"rmse_train": evaluate(res.model, train_ds), "rmse_val": r_val,
                        "best_epoch": res.best_epoch}
        histories[key] = res.history
        preds[key] = p_val
        rmse_val.append(r_val)
    return ComparisonReport(results, percent_decrease(rmse_val[0], rmse_val[1]), config.seed,
                            config.to_dict(), histories, preds, val_ds.angles.copy())


def write_report(path, report: ComparisonReport) -> None:
    atomic_write_bytes(path, report.to_json().encode())
