"""Tests for attention maps and embedding export."""

import numpy as np
import pandas as pd
import pytest
import torch
from PIL import Image

from src.contrastive import AlignmentSettings, ModalityAligner
from src.data_model import Split
from src.encoders import MaskedAutoencoder, ModalityEncoder
from src.interpret import (
    attention_map,
    cls_attention,
    export_embeddings,
    positive_similarity,
    region_contrast,
    save_attention_png,
)
from src.regression import PhenotypeRegressor
from tests.helpers import tiny_config


@pytest.fixture
def localizer_encoder():
    torch.manual_seed(0)
    return ModalityEncoder(tiny_config("L"))


@pytest.fixture
def aligner(schema):
    torch.manual_seed(0)
    encoders = {m: ModalityEncoder(tiny_config(m), schema) for m in ("L", "E", "T")}
    return ModalityAligner(encoders, ("LE", "LT"), AlignmentSettings(projection_dim=16))


def test_attention_map_contract(cohort, localizer_encoder):
    attention = attention_map(localizer_encoder, cohort["sub-00000"].localizer)
    assert attention.shape == (224, 224)
    assert attention.min() == pytest.approx(0.0)
    assert attention.max() == pytest.approx(1.0)


def test_cls_attention_is_a_distribution(cohort, localizer_encoder):
    grid = cls_attention(localizer_encoder, cohort["sub-00000"].localizer)
    assert grid.shape == (7, 7)
    assert (grid >= 0).all()
    assert grid.sum() < 1.0


def test_attention_map_deterministic(cohort, localizer_encoder):
    stack = cohort["sub-00000"].localizer
    np.testing.assert_array_equal(attention_map(localizer_encoder, stack), attention_map(localizer_encoder, stack))


def test_attention_from_wrapping_models(cohort, localizer_encoder):
    """Test regressors and autoencoders expose their localizer encoder's attention."""
    stack = cohort["sub-00000"].localizer
    expected = attention_map(localizer_encoder, stack)
    regressor = PhenotypeRegressor(localizer_encoder, hidden_dim=16)
    np.testing.assert_allclose(attention_map(regressor, stack), expected)

    torch.manual_seed(0)
    autoencoder = MaskedAutoencoder(tiny_config("L"))
    assert attention_map(autoencoder, stack).shape == (224, 224)


def test_attention_rejects_non_image_encoder(cohort):
    encoder = ModalityEncoder(tiny_config("E"))
    with pytest.raises(ValueError):
        attention_map(encoder, cohort["sub-00000"].localizer)


def test_attention_rejects_bad_shape(localizer_encoder):
    with pytest.raises(ValueError):
        attention_map(localizer_encoder, np.zeros((3, 100, 100), dtype=np.float32))


def test_save_attention_png(cohort, localizer_encoder, tmp_path):
    attention = attention_map(localizer_encoder, cohort["sub-00000"].localizer)
    path = save_attention_png(attention, tmp_path / "attention" / "attn_sub-00000_L_sup.png")
    with Image.open(path) as image:
        assert image.mode == "L"
        assert image.size == (224, 224)
        pixels = np.asarray(image)
    assert pixels.min() == 0
    assert pixels.max() == 255


def test_region_contrast():
    attention = np.zeros((4, 4))
    region = np.zeros((4, 4), dtype=bool)
    region[:2, :2] = True
    attention[region] = 1.0
    assert region_contrast(attention, region) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        region_contrast(attention, np.ones((4, 4), dtype=bool))
    with pytest.raises(ValueError):
        region_contrast(attention, np.zeros((3, 3), dtype=bool))


def test_export_embeddings(cohort, aligner, tmp_path):
    ids = cohort.split_ids(Split.VAL)
    path = tmp_path / "embeddings_pre.csv"
    frame = export_embeddings(aligner, cohort, "pre", path, ids)

    assert len(frame) == 3 * len(ids)
    assert list(frame.columns[:3]) == ["subject_id", "modality", "dim_0"]
    assert list(frame.columns[-5:]) == ["lvm", "lvef", "rvef", "rvedv", "sex"]
    vectors = frame[[f"dim_{i}" for i in range(16)]].to_numpy()
    np.testing.assert_allclose(np.linalg.norm(vectors, axis=1), 1.0, atol=1e-5)
    assert set(frame["sex"]) <= {0, 1}

    written = pd.read_csv(path)
    assert len(written) == len(frame)


def test_export_rejects_unknown_tag(cohort, aligner):
    with pytest.raises(ValueError):
        export_embeddings(aligner, cohort, "mid")


def test_positive_similarity():
    frame = pd.DataFrame([
        {"subject_id": "a", "modality": "L", "dim_0": 1.0, "dim_1": 0.0},
        {"subject_id": "a", "modality": "T", "dim_0": 1.0, "dim_1": 0.0},
        {"subject_id": "b", "modality": "L", "dim_0": 0.0, "dim_1": 1.0},
        {"subject_id": "b", "modality": "T", "dim_0": 1.0, "dim_1": 0.0},
    ])
    assert positive_similarity(frame) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        positive_similarity(frame, "L", "E")


if __name__ == "__main__":
    pytest.main([__file__])
