"""Tests for the synthetic cohort generator."""

import json

import numpy as np
import pytest
from sklearn.linear_model import LinearRegression

from src.synthetic_cohort import (
    LatentFactors,
    NoiseLevels,
    SyntheticCohortGenerator,
    chamber_area,
    compute_phenotypes,
    heart_mask,
    load_latents,
    render_localizer,
    sample_factors,
    subject_rng,
    synthesize_ecg,
)


def _population(n: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    factors = [sample_factors(rng) for _ in range(n)]
    phenotypes = [compute_phenotypes(f, rng) for f in factors]
    return factors, phenotypes


def test_noise_free_phenotypes():
    """Test phenotypes are exact functions of the factors without noise."""
    rng = np.random.default_rng(0)
    base = LatentFactors(heart_size=1.0, contractility=0.6, heart_rate_bpm=60.0, sex=0)
    larger = LatentFactors(heart_size=1.1, contractility=0.6, heart_rate_bpm=60.0, sex=0)

    p = compute_phenotypes(base, rng, noise_scale=0.0)
    q = compute_phenotypes(larger, rng, noise_scale=0.0)

    assert p["LVEF"] == pytest.approx(60.0)
    assert p["RVEF"] == pytest.approx(60.0)
    assert p["LVSV"] + p["LVESV"] == pytest.approx(p["LVEDV"])
    assert q["LVM"] / p["LVM"] == pytest.approx(1.331)
    assert q["RVEDV"] / p["RVEDV"] == pytest.approx(1.331)


def test_factor_ranges_enforced():
    with pytest.raises(ValueError):
        LatentFactors(heart_size=2.0, contractility=0.6, heart_rate_bpm=60.0, sex=0)
    with pytest.raises(ValueError):
        LatentFactors(heart_size=1.0, contractility=0.6, heart_rate_bpm=60.0, sex=2)


def test_generate_cohort_deterministic():
    generator = SyntheticCohortGenerator(include_cine=False)
    a = generator.generate_cohort(2, seed=5)
    b = generator.generate_cohort(2, seed=5, max_workers=2)

    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.localizer.voxels, y.localizer.voxels)
        np.testing.assert_array_equal(x.ecg.samples, y.ecg.samples)
        np.testing.assert_array_equal(x.tabular.numeric_array(), y.tabular.numeric_array())
        np.testing.assert_array_equal(x.phenotypes.values, y.phenotypes.values)
    assert a.records[0].cine is None


def test_subject_streams_independent_of_cohort_size():
    """Test subject i renders identically regardless of n."""
    generator = SyntheticCohortGenerator(include_cine=False)
    small = generator.generate_cohort(1, seed=9)
    large = generator.generate_cohort(3, seed=9)
    np.testing.assert_array_equal(small.records[0].phenotypes.values, large.records[0].phenotypes.values)


def test_generate_cohort_rejects_empty():
    with pytest.raises(ValueError):
        SyntheticCohortGenerator().generate_cohort(0, seed=0)


def test_manifest_and_latents_written(cohort_root):
    manifest = json.loads((cohort_root / "cohort_manifest.json").read_text())
    assert manifest["n"] == 16
    assert manifest["seed"] == 3

    latents = load_latents(cohort_root)
    expected = sample_factors(subject_rng(3, 0))
    loaded = latents["sub-00000"]
    assert loaded.heart_size == pytest.approx(expected.heart_size)
    assert loaded.contractility == pytest.approx(expected.contractility)
    assert loaded.phase == pytest.approx(expected.phase)
    assert loaded.noise_seeds == expected.noise_seeds


def test_phenotype_correlation_structure():
    """Test phenotypes track their generating factors across a population."""
    factors, phenotypes = _population(2000)
    contractility = np.array([f.contractility for f in factors])
    lvef = np.array([p["LVEF"] for p in phenotypes])
    lvm = np.array([p["LVM"] for p in phenotypes])
    rvedv = np.array([p["RVEDV"] for p in phenotypes])

    assert np.corrcoef(lvef, contractility)[0, 1] > 0.95
    assert np.corrcoef(lvm, rvedv)[0, 1] > 0.9


def test_linear_readout_of_factors():
    factors, phenotypes = _population(2000, seed=1)
    features = np.array([[f.heart_size ** 3, f.contractility] for f in factors])
    for name in ("LVEF", "RVEF", "LVM", "RVEDV"):
        target = np.array([p[name] for p in phenotypes])
        score = LinearRegression().fit(features, target).score(features, target)
        assert score > 0.9, name


def test_chamber_area_grows_with_heart_size():
    """Test the drawn heart region grows monotonically with heart size."""
    areas = []
    for size in (0.6, 0.8, 1.0, 1.2, 1.4):
        factors = LatentFactors(heart_size=size, contractility=0.6, heart_rate_bpm=60.0, sex=0)
        areas.append(chamber_area(render_localizer(factors, sigma=0.0)))
    assert areas == sorted(areas)
    assert areas[-1] > 2 * areas[0]


def test_heart_mask_inside_image():
    factors = LatentFactors(heart_size=1.0, contractility=0.6, heart_rate_bpm=60.0, sex=0)
    mask = heart_mask(factors)
    assert mask.shape == (224, 224)
    assert 0 < mask.sum() < mask.size // 4


def test_ecg_drift_is_optional():
    factors = LatentFactors(heart_size=1.0, contractility=0.6, heart_rate_bpm=60.0, sex=0)
    noise = NoiseLevels(0.0, 0.0, 0.0, 0.0, 0.3, 0.25)
    with_drift = synthesize_ecg(factors, noise)
    without = synthesize_ecg(factors, noise, include_drift=False)

    assert with_drift.samples.shape == (12, 5000)
    assert with_drift.duration_s == pytest.approx(10.0)
    assert np.abs(with_drift.samples - without.samples).max() > 0.1


def test_ecg_rate_follows_heart_rate():
    """Test the number of R peaks matches the heart rate."""
    noise = NoiseLevels.disabled()
    for rate in (60.0, 90.0):
        factors = LatentFactors(heart_size=1.0, contractility=0.6, heart_rate_bpm=rate, sex=0)
        lead = synthesize_ecg(factors, noise).samples[0]
        peaks = np.flatnonzero((lead[1:-1] > lead[:-2]) & (lead[1:-1] >= lead[2:]) & (lead[1:-1] > 0.8))
        assert abs(len(peaks) - rate / 6.0) <= 1


if __name__ == "__main__":
    pytest.main([__file__])
