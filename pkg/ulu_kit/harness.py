"""
Training loop with per-epoch metrics and per-site beta trajectories.

One train() call is single-threaded and deterministic in (config, data): the
initial weights come from default_rng(seed), the minibatch order from a
separate default_rng([seed, 1]) stream.
"""
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import log_softmax

from .autodiff import ParamStore, lr_schedule, sgd_step
from .data_processor import Dataset
from .errors import EmptyDatasetError, InvalidSpecError, NoAdaptiveSitesError, NonFiniteGradientError
from .models import Model, ModelConfig, build

logger = logging.getLogger(__name__)

BATCH_ORDER_STREAM = 1
EVAL_BATCH_SIZE = 256


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise InvalidSpecError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidSpecError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (math.isfinite(self.base_lr) and self.base_lr > 0):
            raise InvalidSpecError(f"base_lr must be a positive number, got {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise InvalidSpecError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise InvalidSpecError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.seed < 0:
            raise InvalidSpecError(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> Dict:
        return {
            "model": self.model.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_lr": self.base_lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass(frozen=True)
class SiteBetas:
    epoch: int
    site: int
    beta1_sq: float
    beta2_sq: float
    lib: float


@dataclass
class RunRecord:
    """
    Everything a training run produced. Epoch 0 is the evaluation before the
    first step. wall_seconds is excluded from equality and serialization so
    reruns compare and write identically.
    """
    config: Dict
    epochs: List[EpochMetrics]
    betas: List[SiteBetas]
    final_test_acc: float
    diverged: bool = False
    wall_seconds: float = field(default=0.0, compare=False)
    model: Optional[Model] = field(default=None, compare=False, repr=False)

    def curves_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.epochs],
                            columns=["epoch", "train_loss", "train_acc", "test_acc"])

    def betas_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.betas],
                            columns=["epoch", "site", "beta1_sq", "beta2_sq", "lib"])

    def to_dict(self) -> Dict:
        return {
            "config": self.config,
            "epochs": [asdict(row) for row in self.epochs],
            "betas": [asdict(row) for row in self.betas],
            "final_test_acc": self.final_test_acc,
            "diverged": self.diverged,
        }


@dataclass(frozen=True)
class LibReport:
    per_site: Tuple[float, ...]
    points: Tuple[Tuple[float, float], ...]
    aggregate: float


def lib_of(params: ParamStore) -> LibReport:
    """
    Per-site |beta1^2 - beta2^2| and their arithmetic mean

    Args:
        params: Store of a model with at least one adaptive site

    Returns:
        LibReport with per-site LIB, the (beta1^2, beta2^2) point of each
        site, and the aggregate mean
    """
    if not params.adaptive:
        raise NoAdaptiveSitesError("LIB needs a model with at least one AULU activation site")
    per_site = tuple(site.lib() for site in params.adaptive)
    points = tuple(site.coefficients() for site in params.adaptive)
    return LibReport(per_site, points, float(np.mean(per_site)))


def evaluate(model: Model, dataset: Dataset, batch_size: int = EVAL_BATCH_SIZE) -> Tuple[float, float]:
    """
    Mean cross-entropy and accuracy of model on dataset

    Predictions take the argmax of the logits; np.argmax returns the first
    maximum, so ties go to the lowest class index.
    """
    if len(dataset) == 0:
        raise EmptyDatasetError(f"Cannot evaluate on {dataset.name}: it contains no samples")

    total_loss = 0.0
    correct = 0
    for start in range(0, len(dataset), batch_size):
        images = dataset.images[start:start + batch_size]
        labels = dataset.labels[start:start + batch_size]
        logits = model.predict_logits(images)
        log_probs = log_softmax(logits, axis=1)
        total_loss -= float(log_probs[np.arange(labels.shape[0]), labels].sum())
        correct += int(np.count_nonzero(np.argmax(logits, axis=1) == labels))
    return total_loss / len(dataset), correct / len(dataset)


def _beta_rows(model: Model, epoch: int) -> List[SiteBetas]:
    rows = []
    for site, adaptive in enumerate(model.store.adaptive):
        c1, c2 = adaptive.coefficients()
        rows.append(SiteBetas(epoch, site, c1, c2, abs(c1 - c2)))
    return rows


def _check_compatible(cfg: TrainConfig, dataset: Dataset):
    if dataset.image_shape != cfg.model.input_shape:
        raise InvalidSpecError(f"{dataset.name} images are {dataset.image_shape}, "
                               f"the model expects {cfg.model.input_shape}")
    if dataset.num_classes != cfg.model.num_classes:
        raise InvalidSpecError(f"{dataset.name} has {dataset.num_classes} classes, "
                               f"the model predicts {cfg.model.num_classes}")


def _train_epoch(model: Model, cfg: TrainConfig, ds_train: Dataset, rng: np.random.Generator,
                 step: int, total_steps: int) -> Tuple[int, bool]:
    order = rng.permutation(len(ds_train))
    for start in range(0, len(ds_train), cfg.batch_size):
        batch = order[start:start + cfg.batch_size]
        loss = model.forward(ds_train.images[batch], ds_train.labels[batch])
        if not math.isfinite(loss):
            logger.warning("Loss became %s at step %d; run marked diverged", loss, step)
            return step, True
        model.backward()
        try:
            sgd_step(model.store, lr_schedule(step, total_steps, cfg.base_lr), cfg.momentum, cfg.weight_decay)
        except NonFiniteGradientError as e:
            logger.warning("%s; run marked diverged at step %d", e, step)
            return step, True
        step += 1
    return step, False


def train(cfg: TrainConfig, ds_train: Dataset, ds_test: Dataset) -> RunRecord:
    """
    Train a freshly built model and record its trajectory

    Args:
        cfg: Model and optimizer configuration
        ds_train: Training split; minibatches are drawn in a seeded order
        ds_test: Held-out split evaluated in full after every epoch

    Returns:
        RunRecord with epochs 0..cfg.epochs (fewer if the run diverged) and,
        for AULU models, one beta row per site per epoch
    """
    for dataset in (ds_train, ds_test):
        _check_compatible(cfg, dataset)
    if len(ds_train) == 0:
        raise EmptyDatasetError(f"Cannot train on {ds_train.name}: it contains no samples")

    started = time.perf_counter()
    model = build(cfg.model, cfg.seed)
    rng = np.random.default_rng([cfg.seed, BATCH_ORDER_STREAM])
    total_steps = cfg.epochs * math.ceil(len(ds_train) / cfg.batch_size)

    train_loss, train_acc = evaluate(model, ds_train)
    _, test_acc = evaluate(model, ds_test)
    epochs = [EpochMetrics(0, train_loss, train_acc, test_acc)]
    betas = _beta_rows(model, 0)

    step = 0
    diverged = False
    for epoch in range(1, cfg.epochs + 1):
        step, diverged = _train_epoch(model, cfg, ds_train, rng, step, total_steps)
        if diverged:
            break
        train_loss, train_acc = evaluate(model, ds_train)
        _, test_acc = evaluate(model, ds_test)
        epochs.append(EpochMetrics(epoch, train_loss, train_acc, test_acc))
        betas.extend(_beta_rows(model, epoch))
        logger.info("epoch %d/%d: train_loss=%.4f train_acc=%.4f test_acc=%.4f",
                    epoch, cfg.epochs, train_loss, train_acc, test_acc)

    record = RunRecord(
        config=cfg.to_dict(),
        epochs=epochs,
        betas=betas,
        final_test_acc=0.0 if diverged else epochs[-1].test_acc,
        diverged=diverged,
        wall_seconds=time.perf_counter() - started,
        model=model,
    )
    return record
