"""Tests for the localizer-centric contrastive alignment."""

import math

import numpy as np
import pandas as pd
import pytest
import torch
import torch.nn.functional as F

from src.checkpoints import CheckpointStore
from src.contrastive import (
    AlignmentCheckpoint,
    AlignmentSettings,
    ModalityAligner,
    ProjectionHead,
    TemperaturePair,
    align_stage2,
    alignment_fingerprint,
    bidirectional_loss,
    embed_batch,
    info_nce_directional,
    similarity_statistics,
    total_loss,
)
from src.data_model import Split, load_cohort
from src.encoders import EncoderCheckpoint, MaskedAutoencoder
from src.errors import FingerprintMismatchError
from src.training import TrainHparams
from tests.helpers import tiny_config

SETTINGS = AlignmentSettings(projection_dim=16)


def _unit(n: int, d: int, seed: int = 0, dtype=torch.float32) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(n, d, generator=generator, dtype=dtype), dim=-1)


def _reference_info_nce(z_a: np.ndarray, z_b: np.ndarray, tau: float) -> float:
    total = 0.0
    for i in range(len(z_a)):
        logits = [float(z_a[i] @ z_b[j]) / tau for j in range(len(z_b))]
        top = max(logits)
        log_denominator = top + math.log(sum(math.exp(v - top) for v in logits))
        total += log_denominator - logits[i]
    return total / len(z_a)


def _hparams(**overrides) -> TrainHparams:
    params = dict(epochs=1, batch_size=4, lr=1e-4, seed=0)
    params.update(overrides)
    return TrainHparams(**params)


@pytest.fixture
def stage1_checkpoints(schema):
    """Freshly initialized Stage-I checkpoints for L, E and T."""
    checkpoints = {}
    for modality in ("L", "E", "T"):
        config = tiny_config(modality)
        torch.manual_seed(len(checkpoints))
        model = MaskedAutoencoder(config, schema)
        checkpoints[modality] = EncoderCheckpoint(config, model.state_dict(), config.fingerprint(schema))
    return checkpoints


@pytest.mark.parametrize("n", [2, 8, 64])
def test_info_nce_matches_reference(n):
    z_a, z_b = _unit(n, 16, seed=1).double(), _unit(n, 16, seed=2).double()
    loss = info_nce_directional(z_a, z_b, 0.2).item()
    assert loss == pytest.approx(_reference_info_nce(z_a.numpy(), z_b.numpy(), 0.2), rel=1e-9)


def test_identical_embeddings_give_log_n():
    z = F.normalize(torch.ones(256, 8), dim=-1)
    assert info_nce_directional(z, z, 0.1).item() == pytest.approx(math.log(256), abs=1e-4)
    assert math.log(256) == pytest.approx(5.5452, abs=1e-4)


def test_orthogonal_pair_margin():
    """Test a margin of 1/tau between positive and negative gives log1p(exp(-1/tau))."""
    z = torch.eye(2, dtype=torch.float64)
    assert bidirectional_loss(z, z, 0.1).item() == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-9)


def test_bidirectional_symmetry():
    z_a, z_b = _unit(8, 16, 1), _unit(8, 16, 2)
    assert bidirectional_loss(z_a, z_b, 0.1).item() == pytest.approx(bidirectional_loss(z_b, z_a, 0.1).item())


def test_matched_pairs_beat_shuffled_pairs():
    z_a = _unit(16, 32, 1)
    z_b = F.normalize(z_a + 0.1 * _unit(16, 32, 2), dim=-1)
    shuffled = z_b[torch.roll(torch.arange(16), 1)]
    assert bidirectional_loss(z_a, z_b, 0.1) < bidirectional_loss(z_a, shuffled, 0.1)


def test_permutation_equivariance():
    z_a, z_b = _unit(8, 16, 1), _unit(8, 16, 2)
    perm = torch.randperm(8, generator=torch.Generator().manual_seed(0))
    torch.testing.assert_close(bidirectional_loss(z_a, z_b, 0.2), bidirectional_loss(z_a[perm], z_b[perm], 0.2))


def test_random_embeddings_near_log_n():
    z_a, z_b = _unit(64, 256, 1), _unit(64, 256, 2)
    loss = bidirectional_loss(z_a, z_b, 1.0).item()
    assert abs(loss - math.log(64)) < 0.1 * math.log(64)


def test_total_loss_composition():
    z_l, z_e, z_t = _unit(8, 16, 1), _unit(8, 16, 2), _unit(8, 16, 3)
    expected = 0.5 * (bidirectional_loss(z_l, z_e, 0.1) + bidirectional_loss(z_l, z_t, 0.25))
    torch.testing.assert_close(total_loss(z_l, z_e, z_t, (0.1, 0.25)), expected)
    torch.testing.assert_close(total_loss(z_l, z_e, z_t, TemperaturePair(0.1, 0.25)), expected)


def test_loss_input_validation():
    z = _unit(8, 16)
    with pytest.raises(ValueError, match="misalignment"):
        total_loss(z, z, z[:7], (0.1, 0.25))
    with pytest.raises(ValueError):
        info_nce_directional(z[:1], z[:1], 0.1)
    with pytest.raises(ValueError):
        info_nce_directional(2.0 * z, z, 0.1)


def test_no_coupling_between_ecg_and_tabular():
    """Test tabular gradients do not depend on the ECG embeddings and vice versa."""
    z_l = _unit(8, 16, 1)

    def grad_of(target: str, other: torch.Tensor) -> torch.Tensor:
        z = _unit(8, 16, 5).requires_grad_(True)
        if target == "T":
            loss = total_loss(z_l, other, z, (0.1, 0.25))
        else:
            loss = total_loss(z_l.detach(), z, other, (0.1, 0.25))
        (grad,) = torch.autograd.grad(loss, z)
        return grad

    torch.testing.assert_close(grad_of("T", _unit(8, 16, 2)), grad_of("T", _unit(8, 16, 3)))
    torch.testing.assert_close(grad_of("E", _unit(8, 16, 2)), grad_of("E", _unit(8, 16, 3)))


def test_gradients_include_temperature():
    z_a = _unit(4, 6, 1, torch.float64).requires_grad_(True)
    z_b = _unit(4, 6, 2, torch.float64)
    log_tau = torch.tensor(math.log(0.2), dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, t: bidirectional_loss(a, z_b, t.exp()), (z_a, log_tau))


def test_projection_head_unit_norm():
    head = ProjectionHead(16, 8)
    out = head(torch.randn(5, 16))
    torch.testing.assert_close(out.norm(dim=-1), torch.ones(5))


def test_temperature_clamp():
    temps = TemperaturePair(0.1, 0.25)
    assert float(temps.tau_le) == pytest.approx(0.1)
    with torch.no_grad():
        temps.log_tau_le.fill_(math.log(5.0))
        temps.log_tau_lt.fill_(math.log(0.001))
    assert float(temps.tau_le) == pytest.approx(1.0)
    assert float(temps.tau_lt) == pytest.approx(0.01)
    temps.clamp_()
    assert float(temps.log_tau_le) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        TemperaturePair(0.001, 0.25)


def test_similarity_statistics():
    z = torch.eye(3)
    assert similarity_statistics(z, z) == pytest.approx((1.0, 0.0))


def test_aligner_requires_partner_encoders(stage1_checkpoints, schema):
    encoders = {"L": stage1_checkpoints["L"].build_encoder()}
    with pytest.raises(ValueError):
        ModalityAligner(encoders, ("LE",), SETTINGS)
    with pytest.raises(ValueError):
        ModalityAligner(encoders, ("ET",), SETTINGS)


def test_align_stage2_smoke(cohort, schema, stage1_checkpoints, tmp_path):
    curve_path = tmp_path / "stage2_curve.csv"
    checkpoint = align_stage2(cohort, stage1_checkpoints, _hparams(), ("LE", "LT"), SETTINGS, schema,
                              curve_path=curve_path)

    assert checkpoint.edges == ("LE", "LT")
    configs = {m: c.config for m, c in stage1_checkpoints.items()}
    assert checkpoint.fingerprint == alignment_fingerprint(configs, ("LE", "LT"), SETTINGS, schema)
    assert checkpoint.metadata["split"] == cohort.split_fingerprint(Split.VAL)
    curve = pd.read_csv(curve_path)
    assert len(curve) == 1
    assert 0.01 <= curve["tau_LE"].iloc[0] <= 1.0
    assert np.isfinite(curve["val_loss"].iloc[0])


def test_align_bimodal_edge(cohort, schema, stage1_checkpoints):
    checkpoints = {m: stage1_checkpoints[m] for m in ("L", "E")}
    checkpoint = align_stage2(cohort, checkpoints, _hparams(), ("LE",), SETTINGS, schema, variant="LE")
    aligner = checkpoint.build_aligner(schema)
    assert aligner.modalities == ("L", "E")
    assert set(checkpoint.configs) == {"L", "E"}


def test_frozen_encoders_unchanged(cohort, schema, stage1_checkpoints):
    settings = AlignmentSettings(projection_dim=16, freeze_encoders=True)
    checkpoint = align_stage2(cohort, stage1_checkpoints, _hparams(lr=1e-2), ("LE", "LT"), settings, schema)
    encoder = checkpoint.localizer_encoder()
    for key, value in stage1_checkpoints["L"].build_encoder().state_dict().items():
        assert torch.equal(encoder.state_dict()[key], value), key


def test_stage1_fingerprint_verified(cohort, schema, stage1_checkpoints):
    """Test alignment refuses Stage-I weights trained under another config."""
    bad = dict(stage1_checkpoints)
    ecg = bad["E"]
    bad["E"] = EncoderCheckpoint(ecg.config, ecg.state_dict, "0000000000000000")
    with pytest.raises(FingerprintMismatchError):
        align_stage2(cohort, bad, _hparams(), ("LE", "LT"), SETTINGS, schema)


def test_alignment_checkpoint_round_trip(cohort, schema, stage1_checkpoints, tmp_path):
    checkpoint = align_stage2(cohort, stage1_checkpoints, _hparams(), ("LE", "LT"), SETTINGS, schema)
    store = CheckpointStore(tmp_path)
    checkpoint.save(store)

    loaded = AlignmentCheckpoint.load(store, "C-TRIP", checkpoint.fingerprint)
    assert loaded.settings == SETTINGS
    assert loaded.edges == ("LE", "LT")
    for key, value in checkpoint.state_dict.items():
        assert torch.equal(loaded.state_dict[key], value), key
    with pytest.raises(FingerprintMismatchError):
        AlignmentCheckpoint.load(store, "C-TRIP", "ffffffffffffffff")


def test_embed_batch(cohort, schema, stage1_checkpoints):
    torch.manual_seed(0)
    encoders = {m: c.build_encoder(schema) for m, c in stage1_checkpoints.items()}
    aligner = ModalityAligner(encoders, ("LE", "LT"), SETTINGS)
    ids = cohort.split_ids(Split.VAL)

    first = embed_batch(aligner, cohort, ids, batch_size=3)
    second = embed_batch(aligner, cohort, ids, batch_size=2)

    assert [e.subject_id for e in first] == ids
    for a, b in zip(first, second):
        assert a.missing == ()
        for modality in ("L", "E", "T"):
            assert np.linalg.norm(a.get(modality)) == pytest.approx(1.0, abs=1e-4)
            np.testing.assert_allclose(a.get(modality), b.get(modality), atol=1e-5)


def test_embed_batch_flags_missing_modalities(cohort_root, schema, stage1_checkpoints):
    localizer_only = load_cohort(cohort_root, modalities=("L",))
    encoders = {m: c.build_encoder(schema) for m, c in stage1_checkpoints.items()}
    aligner = ModalityAligner(encoders, ("LE",), SETTINGS)

    embeddings = embed_batch(aligner, localizer_only, localizer_only.subject_ids[:2])
    for embedding in embeddings:
        assert embedding.missing == ("E", "T")
        assert embedding.z_L is not None
        assert embedding.z_E is None


if __name__ == "__main__":
    pytest.main([__file__])
