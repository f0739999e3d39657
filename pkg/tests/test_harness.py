import math
import os

import numpy as np
import pytest

from ulu_kit import harness
from ulu_kit.activations import ActivationSpec, AdaptiveParams
from ulu_kit.autodiff import ParamStore
from ulu_kit.data_processor import load_mnist_subset, synthetic_split
from ulu_kit.errors import EmptyDatasetError, InvalidSpecError, NoAdaptiveSitesError, NonFiniteGradientError
from ulu_kit.harness import TrainConfig, evaluate, lib_of, train
from ulu_kit.models import Architecture, ModelConfig, build


def blobs_config(activation="ulu(0.3,0.8)", **overrides) -> TrainConfig:
    model = ModelConfig(arch=Architecture.MLP, hidden_sizes=(16,), input_shape=(12, 12),
                        activation=ActivationSpec.parse(activation),
                        freeze_betas=overrides.pop("freeze_betas", False))
    settings = {"epochs": 2, "batch_size": 50, "base_lr": 0.05, "seed": 0}
    settings.update(overrides)
    return TrainConfig(model=model, **settings)


@pytest.mark.parametrize("overrides", [
    {"epochs": -1}, {"batch_size": 0}, {"base_lr": 0.0}, {"base_lr": float("nan")},
    {"momentum": 1.0}, {"weight_decay": -1e-3}, {"seed": -1},
])
def test_train_config_rejects(overrides):
    with pytest.raises(InvalidSpecError):
        TrainConfig(**overrides)


def test_zero_epochs_records_initial_evaluation(blobs_split):
    record = train(blobs_config(epochs=0), *blobs_split)
    assert len(record.epochs) == 1
    assert record.epochs[0].epoch == 0
    assert record.final_test_acc == record.epochs[0].test_acc
    assert not record.diverged


def test_train_is_deterministic(blobs_split):
    first = train(blobs_config(), *blobs_split)
    second = train(blobs_config(), *blobs_split)
    assert first == second
    assert first.to_dict() == second.to_dict()
    assert first.model.store.fingerprint() == second.model.store.fingerprint()


def test_seed_changes_run(blobs_split):
    assert train(blobs_config(seed=0), *blobs_split).epochs != train(blobs_config(seed=1), *blobs_split).epochs


def test_frozen_aulu_matches_fixed_ulu(blobs_split):
    # beta = 0.5 gives coefficients 0.25 on both sides
    fixed = train(blobs_config("ulu(0.25,0.25)"), *blobs_split)
    frozen = train(blobs_config("aulu(0.5,0.5)", freeze_betas=True), *blobs_split)
    assert fixed.epochs == frozen.epochs
    assert fixed.final_test_acc == frozen.final_test_acc
    assert {row.beta1_sq for row in frozen.betas} == {0.25}


def test_frozen_sites_from_ulu_match_fixed_ulu(blobs_split):
    fixed = train(blobs_config("ulu(0.3,0.8)", epochs=3), *blobs_split)
    frozen = train(blobs_config("ulu(0.3,0.8)", epochs=3, freeze_betas=True), *blobs_split)
    site = frozen.model.store.adaptive[0]
    assert (site.beta1, site.beta2, site.frozen) == (math.sqrt(0.3), math.sqrt(0.8), True)
    assert fixed.epochs == frozen.epochs
    assert fixed.final_test_acc == frozen.final_test_acc
    assert {(row.beta1_sq, row.beta2_sq) for row in frozen.betas} == {(0.3, 0.8)}


def test_aulu_records_betas_per_epoch(blobs_split):
    record = train(blobs_config("aulu", epochs=3), *blobs_split)
    assert [row.epoch for row in record.betas] == [0, 1, 2, 3]
    assert record.betas[0].beta1_sq == pytest.approx(0.5)
    assert record.betas[-1].beta1_sq != record.betas[0].beta1_sq
    frame = record.betas_frame()
    assert list(frame.columns) == ["epoch", "site", "beta1_sq", "beta2_sq", "lib"]
    assert np.allclose(frame["lib"], (frame["beta1_sq"] - frame["beta2_sq"]).abs())


def test_curves_frame_columns(blobs_split):
    frame = train(blobs_config(epochs=1), *blobs_split).curves_frame()
    assert list(frame.columns) == ["epoch", "train_loss", "train_acc", "test_acc"]
    assert frame["epoch"].tolist() == [0, 1]


def test_small_lr_full_batch_loss_is_non_increasing(blobs_split):
    cfg = blobs_config(epochs=5, batch_size=200, base_lr=1e-3, momentum=0.0, weight_decay=0.0)
    losses = [row.train_loss for row in train(cfg, *blobs_split).epochs]
    assert all(later <= earlier for earlier, later in zip(losses, losses[1:]))


@pytest.mark.slow
def test_mlp_learns_blobs(blobs_split):
    record = train(blobs_config(epochs=15), *blobs_split)
    assert record.final_test_acc > 0.9
    assert record.epochs[-1].train_loss < record.epochs[0].train_loss


def small_cnn_accuracies(ds_train, ds_test):
    accuracy = {}
    for activation in ("ulu(0.3,0.8)", "relu"):
        cfg = TrainConfig(model=ModelConfig(activation=ActivationSpec.parse(activation)), epochs=10)
        accuracy[activation] = train(cfg, ds_train, ds_test).final_test_acc
    return accuracy


@pytest.mark.slow
def test_small_cnn_on_synthetic_blobs():
    accuracy = small_cnn_accuracies(*synthetic_split(2000, 1000, seed=0))
    assert accuracy["ulu(0.3,0.8)"] >= 0.90
    assert accuracy["ulu(0.3,0.8)"] >= accuracy["relu"] - 0.02


@pytest.mark.slow
@pytest.mark.skipif(not os.getenv("ULU_DATA_DIR"), reason="needs MNIST IDX files in ULU_DATA_DIR")
def test_small_cnn_on_mnist_subset():
    accuracy = small_cnn_accuracies(*load_mnist_subset(os.environ["ULU_DATA_DIR"], 2000, 1000, seed=0))
    assert accuracy["ulu(0.3,0.8)"] >= 0.90
    assert accuracy["ulu(0.3,0.8)"] >= accuracy["relu"] - 0.02


def test_nan_parameters_mark_run_diverged(blobs_split, monkeypatch):
    def poison(params, lr, momentum, weight_decay):
        for tensor in params.tensors.values():
            tensor[...] = np.nan

    monkeypatch.setattr(harness, "sgd_step", poison)
    record = train(blobs_config(epochs=3), *blobs_split)
    assert record.diverged
    assert record.final_test_acc == 0.0
    assert len(record.epochs) == 1


def test_non_finite_gradient_marks_run_diverged(blobs_split, monkeypatch):
    def refuse(params, lr, momentum, weight_decay):
        raise NonFiniteGradientError("gradient of 'fc0.weight' contains NaN")

    monkeypatch.setattr(harness, "sgd_step", refuse)
    record = train(blobs_config(epochs=2), *blobs_split)
    assert record.diverged
    assert record.to_dict()["final_test_acc"] == 0.0


def test_train_rejects_incompatible_data(blobs_split, tiny_dataset):
    with pytest.raises(InvalidSpecError):
        train(blobs_config(), tiny_dataset, blobs_split[1])


def test_train_rejects_empty_training_set(blobs_split):
    empty = blobs_split[0].subset(np.arange(0), "empty")
    with pytest.raises(EmptyDatasetError):
        train(blobs_config(), empty, blobs_split[1])


def test_evaluate_zero_weights_is_chance(blobs_split):
    model = build(blobs_config().model, seed=0)
    for tensor in model.store.tensors.values():
        tensor[...] = 0.0
    loss, acc = evaluate(model, blobs_split[1], batch_size=7)
    assert acc == pytest.approx(0.1)
    assert loss == pytest.approx(math.log(10), rel=1e-12)


def test_evaluate_empty_raises(blobs_split):
    model = build(blobs_config().model, seed=0)
    with pytest.raises(EmptyDatasetError):
        evaluate(model, blobs_split[1].subset(np.arange(0)))


def test_lib_of_single_site():
    store = ParamStore()
    store.add_adaptive(AdaptiveParams(1.0, 0.5))
    report = lib_of(store)
    assert report.aggregate == pytest.approx(0.75)
    assert report.points == ((1.0, 0.25),)


def test_lib_of_mean_over_sites():
    store = ParamStore()
    store.add_adaptive(AdaptiveParams(1.0, math.sqrt(0.8)))
    store.add_adaptive(AdaptiveParams(1.0, math.sqrt(0.6)))
    report = lib_of(store)
    assert report.per_site == pytest.approx((0.2, 0.4))
    assert report.aggregate == pytest.approx(0.3)


def test_lib_of_requires_adaptive_sites():
    with pytest.raises(NoAdaptiveSitesError):
        lib_of(ParamStore())
