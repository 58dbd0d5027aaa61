"""Tests for Stage-III phenotype regression."""

import numpy as np
import pandas as pd
import pytest
import torch

from src.checkpoints import CheckpointStore
from src.contrastive import ProjectionHead
from src.data_model import PHENOTYPE_NAMES, Split
from src.encoders import ModalityEncoder
from src.regression import (
    FinetuneConfig,
    PhenotypeRegressor,
    RegressionHead,
    RegressorCheckpoint,
    TargetNormalizer,
    build_finetune_optimizer,
    finetune_stage3,
    predict_cohort,
    predict_phenotypes,
    subsample_training,
)
from tests.helpers import label_only_cohort, tiny_config


def _encoder(modality: str = "L", seed: int = 0) -> ModalityEncoder:
    torch.manual_seed(seed)
    return ModalityEncoder(tiny_config(modality))


def _config(**overrides) -> FinetuneConfig:
    params = dict(epochs=1, batch_size=4, hidden_dim=16, seed=0)
    params.update(overrides)
    return FinetuneConfig(**params)


def test_subsample_size():
    cohort = label_only_cohort(512)
    assert len(subsample_training(cohort, 0.01, seed=0)) == 6
    assert len(subsample_training(cohort, 0.5, seed=0)) == 256
    assert sorted(subsample_training(cohort, 1.0, seed=0)) == sorted(cohort.split_ids(Split.TRAIN))


def test_subsample_is_nested():
    """Test smaller fractions are subsets of larger ones under one seed."""
    cohort = label_only_cohort(300)
    fractions = (0.01, 0.1, 0.3, 0.5, 1.0)
    subsets = [set(subsample_training(cohort, f, seed=4)) for f in fractions]
    for smaller, larger in zip(subsets, subsets[1:]):
        assert smaller <= larger


def test_subsample_uses_training_split_only():
    cohort = label_only_cohort(10, n_val=5, n_test=5)
    train = set(cohort.split_ids(Split.TRAIN))
    assert set(subsample_training(cohort, 1.0, seed=0)) == train


@pytest.mark.parametrize("fraction", [0.0, -0.1, 1.5])
def test_subsample_rejects_bad_fraction(fraction):
    with pytest.raises(ValueError):
        subsample_training(label_only_cohort(10), fraction, seed=0)


def test_finetune_config_validation():
    with pytest.raises(ValueError):
        FinetuneConfig(fraction=0.0)
    with pytest.raises(ValueError):
        FinetuneConfig(lr_head=-1.0)


def test_normalizer_round_trip():
    targets = np.random.default_rng(0).normal(50.0, 10.0, size=(32, 18))
    normalizer = TargetNormalizer.fit(targets)
    z = normalizer.normalize(targets)
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-9)
    np.testing.assert_allclose(normalizer.denormalize(z), targets)
    restored = TargetNormalizer.from_dict(normalizer.to_dict())
    np.testing.assert_allclose(restored.denormalize(torch.zeros(1, 18, dtype=torch.float64)).numpy()[0],
                               normalizer.mean)


def test_normalizer_constant_column():
    targets = np.ones((4, 18))
    normalizer = TargetNormalizer.fit(targets)
    assert (normalizer.std == 1.0).all()


def test_head_output_dim():
    with pytest.raises(ValueError):
        RegressionHead(16, 8, out_dim=17)
    assert RegressionHead(16, 8)(torch.zeros(2, 16)).shape == (2, 18)


def test_optimizer_learning_rates():
    """Test the head learns ten times faster than the backbone."""
    regressor = PhenotypeRegressor(_encoder(), ProjectionHead(16, 8), hidden_dim=16)
    optimizer = build_finetune_optimizer(regressor, _config(weight_decay=0.0))
    head_group, backbone_group = optimizer.param_groups
    assert head_group["lr"] / backbone_group["lr"] == pytest.approx(10.0)
    assert head_group["weight_decay"] == 0.0
    n_backbone = sum(p.numel() for p in backbone_group["params"])
    assert n_backbone == sum(p.numel() for p in regressor.backbone_parameters())


def test_finetune_smoke(cohort, tmp_path):
    result = finetune_stage3(_encoder(), cohort, _config(), curve_path=tmp_path / "curve.csv",
                             predictions_path=tmp_path / "predictions.csv")

    assert len(result.train_ids) == 8
    assert result.metadata["n_train"] == 8
    assert len(result.curve) == 1
    predictions = pd.read_csv(tmp_path / "predictions.csv")
    assert list(predictions.columns) == ["subject_id", "phenotype_name", "y_true", "y_pred"]
    assert len(predictions) == 4 * 18
    assert set(predictions["subject_id"]) == set(cohort.split_ids(Split.TEST))
    assert np.isfinite(predictions["y_pred"]).all()


def test_finetune_fraction(cohort):
    result = finetune_stage3(_encoder(), cohort, _config(fraction=0.25))
    assert len(result.train_ids) == 2
    assert set(result.train_ids) <= set(cohort.split_ids(Split.TRAIN))


def test_frozen_encoder_unchanged(cohort):
    """Test a zero encoder learning rate leaves the encoder bit-identical."""
    encoder = _encoder()
    before = {k: v.clone() for k, v in encoder.state_dict().items()}
    result = finetune_stage3(encoder, cohort, _config(lr_encoder=0.0, lr_head=1e-2, epochs=2))
    for key, value in result.encoder.state_dict().items():
        assert torch.equal(value, before[key]), key


def test_finetune_on_tabular(cohort, schema):
    torch.manual_seed(0)
    encoder = ModalityEncoder(tiny_config("T"), schema)
    result = finetune_stage3(encoder, cohort, _config())
    assert result.regressor.modality == "T"
    assert len(result.predictions) == 4 * 18


def test_predict_phenotypes(cohort):
    regressor = PhenotypeRegressor(_encoder(), hidden_dim=16)
    stack = cohort["sub-00002"].localizer

    first = predict_phenotypes(regressor, stack)
    second = predict_phenotypes(regressor, stack.voxels)

    assert first.names == PHENOTYPE_NAMES
    assert len(first.values) == 18
    np.testing.assert_array_equal(first.values, second.values)


def test_predict_phenotypes_rejects_bad_input(cohort, schema):
    regressor = PhenotypeRegressor(_encoder(), hidden_dim=16)
    with pytest.raises(ValueError):
        predict_phenotypes(regressor, np.zeros((3, 128, 128), dtype=np.float32))
    tabular = PhenotypeRegressor(ModalityEncoder(tiny_config("T"), schema), hidden_dim=16)
    with pytest.raises(ValueError):
        predict_phenotypes(tabular, cohort["sub-00002"].localizer)


def test_predictions_independent_of_batching(cohort):
    """Test a subject's prediction does not depend on its batch mates."""
    regressor = PhenotypeRegressor(_encoder(), hidden_dim=16)
    ids = cohort.split_ids(Split.VAL)
    batched = predict_cohort(regressor, cohort, ids, batch_size=4)
    single = predict_phenotypes(regressor, cohort[ids[0]].localizer)
    first = batched[batched["subject_id"] == ids[0]]["y_pred"].to_numpy()
    np.testing.assert_allclose(first, single.values, rtol=1e-4, atol=1e-4)


def test_regressor_checkpoint_round_trip(cohort, tmp_path):
    result = finetune_stage3(_encoder(), cohort, _config())
    checkpoint = RegressorCheckpoint.from_result("stage3_test", result, None, hidden_dim=16)
    store = CheckpointStore(tmp_path)
    checkpoint.save(store)

    restored = RegressorCheckpoint.load(store, "stage3_test", checkpoint.fingerprint).build_regressor()
    stack = cohort["sub-00002"].localizer
    np.testing.assert_allclose(
        predict_phenotypes(restored, stack).values,
        predict_phenotypes(result.regressor, stack).values,
        rtol=1e-6,
        atol=1e-6,
    )


@pytest.mark.slow
def test_overfits_small_training_set(cohort):
    """Test the regressor can drive training loss well below its starting value."""
    result = finetune_stage3(_encoder(), cohort, _config(epochs=200, lr_head=3e-3, lr_encoder=3e-4, patience=200))
    losses = result.curve["train_loss"].to_numpy()
    assert losses[-1] < 0.5 * losses[0]


if __name__ == "__main__":
    pytest.main([__file__])
