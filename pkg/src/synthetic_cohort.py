"""Synthetic paired cohort: localizer, cine stand-in, ECG, tabular and phenotypes.

All modalities are rendered from one latent factor model so that the cross-modal
pairing and the phenotype regression are learnable and verifiable without real
patient data. Ranges and population statistics are declared as module constants
and written to ``cohort_manifest.json``.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy import ndimage

from src.data_model import (
    ECG_LEADS,
    ECG_SAMPLING_RATE_HZ,
    ECG_TIMESTEPS,
    IMAGE_SHAPE,
    PHENOTYPE_NAMES,
    CategoricalFeature,
    Cohort,
    EcgRecord,
    ImageStack,
    NumericFeature,
    PhenotypeVector,
    SubjectRecord,
    TabularSchema,
    normalize_intensity,
    save_cohort,
)

logger = logging.getLogger(__name__)

HEART_SIZE_RANGE = (0.5, 1.5)
CONTRACTILITY_RANGE = (0.3, 0.8)
HEART_RATE_RANGE = (50.0, 100.0)

# Per-phenotype noise standard deviations (physical units) at noise scale 1.
PHENOTYPE_NOISE_SIGMA: dict[str, float] = {
    "LVEF": 2.0, "RVEF": 2.5, "LVM": 4.0, "RVEDV": 6.0,
    "LVEDV": 5.0, "LAV_max": 3.0, "LAEF": 3.0, "RAV_max": 3.0, "RAEF": 3.0,
}

# Declared population statistics, used for z-normalizing tabular features.
TABULAR_SCHEMA = TabularSchema(
    numeric=(
        NumericFeature("age", 55.0, 8.0),
        NumericFeature("bmi", 26.0, 2.9),
        NumericFeature("height_cm", 171.0, 9.0),
        NumericFeature("weight_kg", 76.0, 12.0),
        NumericFeature("systolic_bp", 130.0, 15.0),
        NumericFeature("resting_hr", 71.0, 11.0),
        NumericFeature("qrs_duration_ms", 90.0, 8.5),
        NumericFeature("basal_metabolic_rate_kj", 6750.0, 950.0),
    ),
    categorical=(
        CategoricalFeature("sex", 2),
        CategoricalFeature("smoking_status", 3),
        CategoricalFeature("diabetes", 2),
        CategoricalFeature("physical_activity", 4),
    ),
    phenotype_stats=(
        NumericFeature("LVEF", 57.0, 9.2),
        NumericFeature("RVEF", 57.0, 9.4),
        NumericFeature("LVM", 100.0, 54.0),
        NumericFeature("RVEDV", 178.0, 96.0),
        NumericFeature("LVEDV", 167.0, 90.0),
        NumericFeature("LVESV", 72.0, 40.0),
        NumericFeature("LVSV", 95.0, 52.0),
        NumericFeature("LVCO", 6.7, 3.8),
        NumericFeature("RVESV", 76.0, 42.0),
        NumericFeature("RVSV", 101.0, 56.0),
        NumericFeature("LAV_max", 78.0, 42.0),
        NumericFeature("LAV_min", 51.0, 28.0),
        NumericFeature("LASV", 27.0, 15.0),
        NumericFeature("LAEF", 35.0, 6.0),
        NumericFeature("RAV_max", 83.0, 45.0),
        NumericFeature("RAV_min", 59.0, 32.0),
        NumericFeature("RASV", 24.0, 14.0),
        NumericFeature("RAEF", 29.0, 5.5),
    ),
)

LEAD_GAINS = np.array([1.0, 1.3, 0.4, -1.1, 0.3, 0.8, -0.3, 0.2, 0.6, 1.1, 1.2, 0.9])
SLICE_SCALES = (0.92, 1.0, 0.88)
CINE_PHASES = (0.0, 0.5, 0.25)  # end-diastole, end-systole, mid-phase


@dataclass(frozen=True)
class NoiseLevels:
    """Noise settings; ``NoiseLevels.disabled()`` renders noise-free subjects."""

    phenotype_scale: float = 1.0
    image_sigma: float = 0.15
    ecg_sigma: float = 0.05
    tabular_scale: float = 1.0
    drift_amplitude: float = 0.3
    drift_frequency_hz: float = 0.25

    @classmethod
    def disabled(cls) -> "NoiseLevels":
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.25)


@dataclass(frozen=True)
class LatentFactors:
    """
    Generating factors for one subject.

    ``phase`` is the cardiac phase at which the localizer was acquired (0 = end
    diastole, 0.5 = end systole); localizers are not gated, so it is random.
    """

    heart_size: float
    contractility: float
    heart_rate_bpm: float
    sex: int
    phase: float = 0.0
    center_offset: tuple[float, float] = (0.0, 0.0)
    rotation: float = 0.0
    noise_seeds: tuple[int, int, int] = (0, 1, 2)  # localizer, ecg, tabular

    def __post_init__(self):
        checks = [
            (HEART_SIZE_RANGE, self.heart_size, "heart_size"),
            (CONTRACTILITY_RANGE, self.contractility, "contractility"),
            (HEART_RATE_RANGE, self.heart_rate_bpm, "heart_rate_bpm"),
        ]
        for (low, high), value, name in checks:
            if not low <= value <= high:
                raise ValueError(f"{name}={value} outside [{low}, {high}]")
        if self.sex not in (0, 1):
            raise ValueError("sex must be 0 or 1")


def subject_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for subject ``index``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def sample_factors(rng: np.random.Generator) -> LatentFactors:
    """Draw latent factors from the declared population distributions."""
    sex = int(rng.random() < 0.5)
    heart_size = float(np.clip(rng.normal(0.95 + 0.1 * sex, 0.18), *HEART_SIZE_RANGE))
    contractility = float(np.clip(rng.normal(0.58 - 0.02 * sex, 0.09), *CONTRACTILITY_RANGE))
    heart_rate = float(np.clip(rng.normal(70.0, 10.0), *HEART_RATE_RANGE))
    return LatentFactors(
        heart_size=heart_size,
        contractility=contractility,
        heart_rate_bpm=heart_rate,
        sex=sex,
        phase=float(rng.random()),
        center_offset=(float(rng.uniform(-12, 12)), float(rng.uniform(-12, 12))),
        rotation=float(rng.uniform(-0.3, 0.3)),
        noise_seeds=tuple(int(s) for s in rng.integers(0, 2**31 - 1, size=3)),
    )


def compute_phenotypes(factors: LatentFactors, rng: np.random.Generator, noise_scale: float = 1.0) -> PhenotypeVector:
    """
    Phenotypes as deterministic functions of the factors plus optional noise.

    Volumes and mass scale with heart_size cubed; ejection fractions are
    100 x contractility with independent noise.
    """

    def noisy(name: str, value: float) -> float:
        sigma = PHENOTYPE_NOISE_SIGMA.get(name, 0.0) * noise_scale
        return value + (rng.normal(0.0, sigma) if sigma > 0 else 0.0)

    volume = factors.heart_size ** 3
    c = factors.contractility

    lvedv = noisy("LVEDV", 150.0 * volume)
    lvef = noisy("LVEF", 100.0 * c)
    lvesv = lvedv * (1.0 - lvef / 100.0)
    lvsv = lvedv - lvesv
    lvco = lvsv * factors.heart_rate_bpm / 1000.0
    lvm = noisy("LVM", 90.0 * volume)

    rvedv = noisy("RVEDV", 160.0 * volume)
    rvef = noisy("RVEF", 100.0 * c)
    rvesv = rvedv * (1.0 - rvef / 100.0)
    rvsv = rvedv - rvesv

    lav_max = noisy("LAV_max", 70.0 * volume)
    laef = noisy("LAEF", 60.0 * c)
    lav_min = lav_max * (1.0 - laef / 100.0)
    rav_max = noisy("RAV_max", 75.0 * volume)
    raef = noisy("RAEF", 50.0 * c)
    rav_min = rav_max * (1.0 - raef / 100.0)

    values = {
        "LVEF": lvef, "RVEF": rvef, "LVM": lvm, "RVEDV": rvedv,
        "LVEDV": lvedv, "LVESV": lvesv, "LVSV": lvsv, "LVCO": lvco,
        "RVESV": rvesv, "RVSV": rvsv,
        "LAV_max": lav_max, "LAV_min": lav_min, "LASV": lav_max - lav_min, "LAEF": laef,
        "RAV_max": rav_max, "RAV_min": rav_min, "RASV": rav_max - rav_min, "RAEF": raef,
    }
    return PhenotypeVector(np.array([values[name] for name in PHENOTYPE_NAMES], dtype=np.float64))


def _ellipse(xx: np.ndarray, yy: np.ndarray, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    x = xx - cx
    y = yy - cy
    xr = x * math.cos(theta) + y * math.sin(theta)
    yr = -x * math.sin(theta) + y * math.cos(theta)
    return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0


@dataclass(frozen=True)
class _HeartGeometry:
    lv_center: tuple[float, float]
    rv_center: tuple[float, float]
    lv_cavity: tuple[float, float]
    lv_outer: tuple[float, float]
    rv_cavity: tuple[float, float]
    theta: float


def _heart_geometry(factors: LatentFactors, slice_scale: float, phase: float) -> _HeartGeometry:
    contraction = math.sin(math.pi * phase) ** 2
    volume = factors.heart_size ** 3
    s_lv = 1.0 - 0.3 * factors.contractility * contraction
    a = 26.0 * factors.heart_size * slice_scale * s_lv
    b = 21.0 * factors.heart_size * slice_scale * s_lv
    wall = (2.0 + 5.0 * volume) * slice_scale * (1.0 + 0.3 * factors.contractility * contraction)
    rv_a = 20.0 * factors.heart_size * slice_scale * s_lv
    rv_b = 30.0 * factors.heart_size * slice_scale * s_lv

    theta = factors.rotation
    cx = 112.0 + factors.center_offset[0]
    cy = 118.0 + factors.center_offset[1]
    shift = a + wall + 0.6 * rv_a
    rv_cx = cx - shift * math.cos(theta)
    rv_cy = cy - shift * math.sin(theta)
    return _HeartGeometry((cx, cy), (rv_cx, rv_cy), (a, b), (a + wall, b + wall), (rv_a, rv_b), theta)


def _render_slice(factors: LatentFactors, slice_scale: float, phase: float) -> np.ndarray:
    height, width = IMAGE_SHAPE[1:]
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    image = np.zeros((height, width), dtype=np.float64)

    image[_ellipse(xx, yy, 112.0, 112.0, 104.0, 88.0, 0.0)] = 0.2
    for side in (-1.0, 1.0):
        image[_ellipse(xx, yy, 112.0 + side * 55.0, 105.0, 38.0, 60.0, 0.0)] = 0.05

    geometry = _heart_geometry(factors, slice_scale, phase)
    image[_ellipse(xx, yy, *geometry.rv_center, *geometry.rv_cavity, geometry.theta)] = 0.85
    image[_ellipse(xx, yy, *geometry.lv_center, *geometry.lv_outer, geometry.theta)] = 0.55
    image[_ellipse(xx, yy, *geometry.lv_center, *geometry.lv_cavity, geometry.theta)] = 1.0
    return image


def heart_mask(factors: LatentFactors, slice_index: int = 1) -> np.ndarray:
    """Boolean [224, 224] mask of the drawn heart (LV myocardium + RV) in a localizer slice."""
    height, width = IMAGE_SHAPE[1:]
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    geometry = _heart_geometry(factors, SLICE_SCALES[slice_index], factors.phase)
    return (
        _ellipse(xx, yy, *geometry.lv_center, *geometry.lv_outer, geometry.theta)
        | _ellipse(xx, yy, *geometry.rv_center, *geometry.rv_cavity, geometry.theta)
    )


def render_localizer(factors: LatentFactors, sigma: float) -> ImageStack:
    """Three slices at the localizer's acquisition phase, noise added, intensity normalized."""
    rng = np.random.default_rng(factors.noise_seeds[0])
    slices = np.stack([_render_slice(factors, scale, factors.phase) for scale in SLICE_SCALES])
    if sigma > 0:
        slices = slices + rng.normal(0.0, sigma, size=slices.shape)
    return ImageStack(normalize_intensity(slices))


def render_cine(factors: LatentFactors, sigma: float) -> ImageStack:
    """CMR stand-in: mid-ventricular slice at end-diastole, end-systole and mid-phase."""
    rng = np.random.default_rng(factors.noise_seeds[0] + 1)
    frames = np.stack([_render_slice(factors, SLICE_SCALES[1], phase) for phase in CINE_PHASES])
    if sigma > 0:
        frames = frames + rng.normal(0.0, sigma / 2.0, size=frames.shape)
    return ImageStack(normalize_intensity(frames))


def synthesize_ecg(factors: LatentFactors, noise: NoiseLevels, include_drift: bool = True) -> EcgRecord:
    """
    Sum-of-Gaussians PQRST beats at 60/heart_rate s spacing.

    R amplitude scales with heart size and T amplitude with contractility; a
    slow sinusoidal baseline drift and white noise are added on top.
    """
    rng = np.random.default_rng(factors.noise_seeds[1])
    t = np.arange(ECG_TIMESTEPS, dtype=np.float64) / ECG_SAMPLING_RATE_HZ
    rr = 60.0 / factors.heart_rate_bpm
    qt_shift = 0.25 * math.sqrt(rr)
    waves = (
        (0.15, -0.20, 0.025),
        (-0.12, -0.035, 0.010),
        (1.2 * factors.heart_size, 0.0, 0.012),
        (-0.3, 0.035, 0.012),
        (0.35 + 0.8 * (factors.contractility - 0.55), qt_shift, 0.045),
    )

    beat = np.zeros_like(t)
    first = rng.uniform(0.0, rr)
    for onset in np.arange(first - rr, t[-1] + rr, rr):
        for amplitude, offset, width in waves:
            beat += amplitude * np.exp(-0.5 * ((t - onset - offset) / width) ** 2)

    samples = LEAD_GAINS[:, None] * beat[None, :]
    if include_drift and noise.drift_amplitude > 0:
        phases = rng.uniform(0.0, 2.0 * math.pi, size=(ECG_LEADS, 1))
        samples = samples + noise.drift_amplitude * np.sin(2.0 * math.pi * noise.drift_frequency_hz * t[None, :] + phases)
    if noise.ecg_sigma > 0:
        samples = samples + rng.normal(0.0, noise.ecg_sigma, size=samples.shape)
    return EcgRecord(samples.astype(np.float32))


def synthesize_tabular(factors: LatentFactors, scale: float) -> tuple[dict[str, float], dict[str, int]]:
    """Raw numeric and categorical features correlated with the factors."""
    rng = np.random.default_rng(factors.noise_seeds[2])

    def jitter(sigma: float) -> float:
        return float(rng.normal(0.0, sigma * scale)) if scale > 0 else 0.0

    size_delta = factors.heart_size - 1.0
    bmi = 26.0 + 6.0 * size_delta + jitter(2.5)
    height = 165.0 + 12.0 * factors.sex + 10.0 * size_delta + jitter(6.0)
    numeric = {
        "age": 55.0 + jitter(8.0),
        "bmi": bmi,
        "height_cm": height,
        "weight_kg": bmi * (height / 100.0) ** 2,
        "systolic_bp": 130.0 + jitter(15.0),
        "resting_hr": factors.heart_rate_bpm + jitter(4.0),
        "qrs_duration_ms": 90.0 + 15.0 * size_delta + jitter(8.0),
        "basal_metabolic_rate_kj": 6000.0 + 1500.0 * factors.sex + 1200.0 * size_delta + jitter(500.0),
    }
    categorical = {
        "sex": factors.sex,
        "smoking_status": int(rng.choice(3, p=[0.55, 0.3, 0.15])),
        "diabetes": int(rng.random() < 0.08),
        "physical_activity": int(rng.integers(0, 4)),
    }
    return numeric, categorical


def chamber_area(stack: ImageStack, slice_index: int = 1, level: float = 0.4) -> int:
    """
    Pixel count of the bright chamber region on a smoothed slice.

    The threshold sits at ``level`` of the smoothed slice's dynamic range, so
    the count is invariant to the per-stack intensity normalization.
    """
    smoothed = ndimage.uniform_filter(stack.voxels[slice_index].astype(np.float64), size=7)
    low, high = smoothed.min(), smoothed.max()
    return int((smoothed > low + level * (high - low)).sum())


@dataclass
class SyntheticCohortGenerator:
    """Renders subjects and cohorts from the latent factor model."""

    noise: NoiseLevels = field(default_factory=NoiseLevels)
    schema: TabularSchema = TABULAR_SCHEMA
    include_cine: bool = True

    def generate_subject(
        self,
        factors: LatentFactors,
        rng: np.random.Generator,
        subject_id: str = "sub-00000",
    ) -> SubjectRecord:
        """
        Render one paired subject.

        Args:
            factors: Latent factors (modality noise seeds included)
            rng: Stream for phenotype noise
            subject_id: Identifier of the subject

        Returns:
            Complete SubjectRecord (split unassigned)
        """
        phenotypes = compute_phenotypes(factors, rng, self.noise.phenotype_scale)
        numeric, categorical = synthesize_tabular(factors, self.noise.tabular_scale)
        return SubjectRecord(
            subject_id=subject_id,
            phenotypes=phenotypes,
            localizer=render_localizer(factors, self.noise.image_sigma),
            ecg=synthesize_ecg(factors, self.noise),
            tabular=self.schema.encode(numeric, categorical, phenotypes),
            cine=render_cine(factors, self.noise.image_sigma) if self.include_cine else None,
        )

    def _subject(self, seed: int, index: int) -> tuple[SubjectRecord, LatentFactors]:
        rng = subject_rng(seed, index)
        factors = sample_factors(rng)
        return self.generate_subject(factors, rng, f"sub-{index:05d}"), factors

    def generate_cohort(
        self,
        n: int,
        seed: int,
        root: Optional[Path | str] = None,
        max_workers: int = 1,
    ) -> Cohort:
        """
        Generate ``n`` i.i.d. subjects and optionally write them to ``root``.

        Args:
            n: Number of subjects (>= 1)
            seed: Cohort seed; subject i uses the stream (seed, i)
            root: Directory to write the cohort layout and manifest to
            max_workers: Threads used to render subjects

        Returns:
            Generated Cohort
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
            results = list(pool.map(lambda i: self._subject(seed, i), range(n)))

        records = tuple(record for record, _ in results)
        modalities = ("L", "E", "T", "C") if self.include_cine else ("L", "E", "T")
        cohort = Cohort(records, self.schema, Path(root) if root else None, (), modalities)

        if root is not None:
            root = Path(root)
            save_cohort(cohort, root)
            self._write_latents(root, [(r.subject_id, f) for r, f in results])
            self._write_manifest(root, n, seed)
            logger.info("Wrote synthetic cohort of %d subjects to %s", n, root)
        return cohort

    def _write_latents(self, root: Path, factors: list[tuple[str, LatentFactors]]) -> None:
        rows = []
        for subject_id, f in factors:
            rows.append({
                "subject_id": subject_id,
                "heart_size": f.heart_size,
                "contractility": f.contractility,
                "heart_rate_bpm": f.heart_rate_bpm,
                "sex": f.sex,
                "phase": f.phase,
                "center_dx": f.center_offset[0],
                "center_dy": f.center_offset[1],
                "rotation": f.rotation,
                "seed_localizer": f.noise_seeds[0],
                "seed_ecg": f.noise_seeds[1],
                "seed_tabular": f.noise_seeds[2],
            })
        pd.DataFrame(rows).to_csv(root / "latents.csv", index=False)

    def _write_manifest(self, root: Path, n: int, seed: int) -> None:
        manifest = {
            "n": n,
            "seed": seed,
            "noise": asdict(self.noise),
            "phenotype_noise_sigma": PHENOTYPE_NOISE_SIGMA,
            "factor_ranges": {
                "heart_size": HEART_SIZE_RANGE,
                "contractility": CONTRACTILITY_RANGE,
                "heart_rate_bpm": HEART_RATE_RANGE,
            },
            "include_cine": self.include_cine,
        }
        with open(root / "cohort_manifest.json", "w") as f:
            json.dump(manifest, f, indent=2)


def load_latents(root: Path | str) -> dict[str, LatentFactors]:
    """Read ``latents.csv`` back into LatentFactors keyed by subject_id."""
    frame = pd.read_csv(Path(root) / "latents.csv")
    factors = {}
    for row in frame.itertuples(index=False):
        factors[row.subject_id] = LatentFactors(
            heart_size=float(row.heart_size),
            contractility=float(row.contractility),
            heart_rate_bpm=float(row.heart_rate_bpm),
            sex=int(row.sex),
            phase=float(row.phase),
            center_offset=(float(row.center_dx), float(row.center_dy)),
            rotation=float(row.rotation),
            noise_seeds=(int(row.seed_localizer), int(row.seed_ecg), int(row.seed_tabular)),
        )
    return factors
