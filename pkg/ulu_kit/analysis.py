"""
Batch experiments built on the training harness: (alpha1, alpha2) accuracy
sweeps, output landscapes of a randomly initialized deep network with a
roughness score, repeated-run comparison tables and the LIB comparison of a
CNN against an attention model.
"""
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from .activations import Activation, ActivationSpec, batch_eval
from .autodiff import ParamStore
from .data_processor import Dataset
from .errors import InvalidSpecError, NoAdaptiveSitesError
from .harness import RunRecord, TrainConfig, lib_of, train
from .models import Architecture

logger = logging.getLogger(__name__)

DEFAULT_SWEEP_ALPHAS = (0.1, 0.3, 0.55, 0.8, 1.0, 1.5, 2.0)
DEFAULT_COMPARE_ACTIVATIONS = ("ulu(0.3,0.8)", "relu", "silu", "gelu", "mish")
DEFAULT_LANDSCAPE_ACTIVATIONS = ("relu", "ulu(0.3,0.8)", "mish")

SWEEP_COLUMNS = ["alpha1", "alpha2", "final_test_acc", "diverged"]
COMPARE_COLUMNS = ["activation", "mean_acc", "std_acc", "runs"]


@dataclass(frozen=True)
class SweepSpec:
    alpha_values: Tuple[float, ...] = DEFAULT_SWEEP_ALPHAS
    base: TrainConfig = field(default_factory=TrainConfig)
    parallelism: int = 1

    def __post_init__(self):
        object.__setattr__(self, "alpha_values", tuple(float(a) for a in self.alpha_values))
        if not self.alpha_values:
            raise InvalidSpecError("A sweep needs at least one alpha value")
        if min(self.alpha_values) <= 0:
            raise InvalidSpecError(f"Sweep alphas must all be > 0, got {self.alpha_values}")
        if self.parallelism < 1:
            raise InvalidSpecError(f"parallelism must be >= 1, got {self.parallelism}")

    def cells(self) -> List[Tuple[float, float]]:
        return [(a1, a2) for a1 in self.alpha_values for a2 in self.alpha_values]


@dataclass(frozen=True)
class LandscapeSpec:
    layers: int = 6
    width: int = 32
    activation: ActivationSpec = field(default_factory=lambda: ActivationSpec.ulu(0.3, 0.8))
    grid_lo: float = -5.0
    grid_hi: float = 5.0
    resolution: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.width < 1:
            raise InvalidSpecError(f"layers and width must be >= 1, got {self.layers}, {self.width}")
        if self.resolution < 2:
            raise InvalidSpecError(f"resolution must be >= 2, got {self.resolution}")
        if not self.grid_lo < self.grid_hi:
            raise InvalidSpecError(f"Grid must satisfy lo < hi, got [{self.grid_lo}, {self.grid_hi}]")
        if self.seed < 0:
            raise InvalidSpecError(f"seed must be >= 0, got {self.seed}")


def _parallel_map(fn, items: Sequence, parallelism: int) -> List:
    if parallelism == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        return list(pool.map(fn, items))


def run_sweep(spec: SweepSpec, ds_train: Dataset, ds_test: Dataset) -> pd.DataFrame:
    """
    Train one ULU(alpha1, alpha2) model per grid cell

    Every cell shares spec.base except for the activation. Each run owns its
    model, optimizer state and generators, so results do not depend on
    spec.parallelism.

    Returns:
        DataFrame with columns alpha1, alpha2, final_test_acc, diverged,
        sorted by (alpha1, alpha2)
    """
    def run_cell(cell: Tuple[float, float]) -> Dict:
        alpha1, alpha2 = cell
        model_cfg = replace(spec.base.model, activation=ActivationSpec.ulu(alpha1, alpha2))
        record = train(replace(spec.base, model=model_cfg), ds_train, ds_test)
        logger.debug("Sweep cell (%g, %g): acc=%.4f diverged=%s",
                     alpha1, alpha2, record.final_test_acc, record.diverged)
        return {"alpha1": alpha1, "alpha2": alpha2,
                "final_test_acc": record.final_test_acc, "diverged": record.diverged}

    cells = spec.cells()
    logger.info("Running %d sweep cells with parallelism %d", len(cells), spec.parallelism)
    rows = _parallel_map(run_cell, cells, spec.parallelism)
    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    return table.sort_values(["alpha1", "alpha2"]).reset_index(drop=True)


def sweep_pivot(table: pd.DataFrame) -> pd.DataFrame:
    """alpha1 x alpha2 accuracy grid of a sweep table"""
    return table.pivot_table(index="alpha1", columns="alpha2", values="final_test_acc")


def landscape_weights(spec: LandscapeSpec) -> ParamStore:
    """
    Weights of the landscape network: 2 -> width -> ... -> width -> 1 with
    spec.layers weight layers, He-normal weights and N(0, 0.5^2) biases.
    Depends only on (layers, width, seed), never on the activation.
    """
    rng = np.random.default_rng(spec.seed)
    sizes = [2] + [spec.width] * (spec.layers - 1) + [1]
    store = ParamStore()
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.add(f"layer{i}.weight", rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        store.add(f"layer{i}.bias", rng.normal(0.0, 0.5, size=fan_out))
    return store


def landscape_forward(weights: ParamStore, activation: Activation, points: np.ndarray) -> np.ndarray:
    """Scalar network output at each row of points ([N, 2])"""
    layers = len(weights.tensors) // 2
    h = points
    for i in range(layers):
        h = h @ weights.tensors[f"layer{i}.weight"] + weights.tensors[f"layer{i}.bias"]
        if i < layers - 1:
            h = batch_eval(activation, h)
    return h[:, 0]


def landscape(spec: LandscapeSpec) -> np.ndarray:
    """
    Output of the seeded network over a resolution x resolution grid

    Returns:
        Matrix M with M[i, j] = f(x_j, y_i), x and y running from grid_lo to
        grid_hi
    """
    axis = np.linspace(spec.grid_lo, spec.grid_hi, spec.resolution)
    xs, ys = np.meshgrid(axis, axis)
    points = np.stack([xs.ravel(), ys.ravel()], axis=1)
    values = landscape_forward(landscape_weights(spec), spec.activation, points)
    return values.reshape(spec.resolution, spec.resolution)


def smoothness_score(matrix) -> float:
    """
    Mean squared 5-point discrete Laplacian over the interior cells.

    0 for affine fields; score(c * M) == c**2 * score(M).
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 3 or m.shape[1] < 3:
        raise InvalidSpecError(f"smoothness_score needs a matrix of at least 3x3, got shape {m.shape}")
    laplacian = (m[:-2, 1:-1] + m[2:, 1:-1] + m[1:-1, :-2] + m[1:-1, 2:]
                 - 4.0 * m[1:-1, 1:-1])
    return float(np.mean(laplacian * laplacian))


def compare_landscapes(activations: Sequence[ActivationSpec], spec: LandscapeSpec) -> Tuple[pd.DataFrame, Dict[str, np.ndarray]]:
    """
    Landscapes of several activations over identical weights

    Returns:
        (summary with columns activation, smoothness, weights_sha256;
         matrices keyed by activation text)
    """
    fingerprint = landscape_weights(spec).fingerprint()
    rows, matrices = [], {}
    for activation in activations:
        matrix = landscape(replace(spec, activation=activation))
        matrices[str(activation)] = matrix
        # the Laplacian needs an interior point
        score = smoothness_score(matrix) if min(matrix.shape) >= 3 else float("nan")
        rows.append({"activation": str(activation), "smoothness": score,
                     "weights_sha256": fingerprint})
    return pd.DataFrame(rows, columns=["activation", "smoothness", "weights_sha256"]), matrices


def compare_table(activations: Sequence[ActivationSpec], cfg: TrainConfig, repeats: int,
                  ds_train: Dataset, ds_test: Dataset, parallelism: int = 1) -> pd.DataFrame:
    """
    Train each activation `repeats` times with seeds cfg.seed + 0 .. repeats - 1

    A diverged run contributes accuracy 0 and is reported as a warning.
    std_acc is the population standard deviation (ddof=0).

    Returns:
        DataFrame with columns activation, mean_acc, std_acc, runs sorted by
        mean_acc descending
    """
    if repeats < 1:
        raise InvalidSpecError(f"repeats must be >= 1, got {repeats}")
    if parallelism < 1:
        raise InvalidSpecError(f"parallelism must be >= 1, got {parallelism}")

    jobs = [(index, r) for index in range(len(activations)) for r in range(repeats)]

    def run_job(job: Tuple[int, int]) -> RunRecord:
        index, r = job
        model_cfg = replace(cfg.model, activation=activations[index])
        return train(replace(cfg, model=model_cfg, seed=cfg.seed + r), ds_train, ds_test)

    records = _parallel_map(run_job, jobs, parallelism)

    rows = []
    for index, activation in enumerate(activations):
        runs = [record for (i, _), record in zip(jobs, records) if i == index]
        accs = np.array([record.final_test_acc for record in runs])
        diverged = sum(record.diverged for record in runs)
        if diverged:
            logger.warning("%s diverged in %d of %d runs", activation, diverged, len(runs))
        rows.append({
            "activation": str(activation),
            "mean_acc": float(accs.mean()),
            "std_acc": float(accs.std()),
            "runs": len(runs),
        })
    table = pd.DataFrame(rows, columns=COMPARE_COLUMNS)
    return table.sort_values("mean_acc", ascending=False, kind="mergesort").reset_index(drop=True)


def lib_comparison(cfg: TrainConfig, ds_train: Dataset, ds_test: Dataset,
                   architectures: Sequence[Architecture] = (Architecture.SMALL_CNN,
                                                            Architecture.MINI_ATTENTION)) -> Dict:
    """
    Train one AULU model per architecture under the same TrainConfig and
    report per-site (beta1^2, beta2^2, LIB) plus the aggregate LIB of each

    Returns:
        {"config": ..., "models": {arch: {...}}, "observation": str}
    """
    if not cfg.model.activation.is_adaptive:
        raise NoAdaptiveSitesError(
            f"A LIB report needs an adaptive activation (aulu), got {cfg.model.activation}"
        )

    models = {}
    for arch in architectures:
        record = train(replace(cfg, model=replace(cfg.model, arch=arch)), ds_train, ds_test)
        report = lib_of(record.model.store)
        models[arch.value] = {
            "final_test_acc": record.final_test_acc,
            "diverged": record.diverged,
            "sites": [{"site": site, "beta1_sq": c1, "beta2_sq": c2, "lib": lib}
                      for site, ((c1, c2), lib) in enumerate(zip(report.points, report.per_site))],
            "aggregate_lib": report.aggregate,
        }
        logger.info("%s aggregate LIB %.6f", arch.value, report.aggregate)

    return {"config": cfg.to_dict(), "models": models, "observation": _lib_observation(models)}


def _lib_observation(models: Dict) -> str:
    parts = [f"{name}={entry['aggregate_lib']:.6g}" for name, entry in models.items()]
    ranked = sorted(models, key=lambda name: models[name]["aggregate_lib"], reverse=True)
    return f"aggregate LIB {' '.join(parts)} (highest: {ranked[0]})"


def activation_slug(activation: ActivationSpec) -> str:
    """Filesystem-safe name, e.g. ulu(0.3,0.8) -> ulu_0_3_0_8"""
    return re.sub(r"[^a-z0-9]+", "_", str(activation).lower()).strip("_")
