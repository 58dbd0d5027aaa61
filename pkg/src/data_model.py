"""Subject records, phenotype and tabular schemas, cohort I/O and splitting.

Directory layout of a cohort root::

    <root>/schema.json
    <root>/cohort_manifest.json      (written by the synthetic generator)
    <root>/latents.csv               (written by the synthetic generator)
    <root>/splits.json               (optional; subject_id -> train|val|test)
    <root>/<subject_id>/localizer.npy   float32 [3, 224, 224]
    <root>/<subject_id>/cine.npy        float32 [3, 224, 224]  (CMR stand-in, optional)
    <root>/<subject_id>/ecg.bin         float32 little-endian [12, 5000]
    <root>/<subject_id>/tabular.json    {"numeric": {...}, "categorical": {...}}
    <root>/<subject_id>/phenotypes.json {name: value} x 18
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator, NamedTuple, Optional, Sequence

import numpy as np

from src.errors import CohortValidationError, RecordRejected
from src.utils.reproducibility import fingerprint

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (3, 224, 224)
ECG_LEADS = 12
ECG_SAMPLING_RATE_HZ = 500
ECG_DURATION_S = 10
ECG_TIMESTEPS = ECG_SAMPLING_RATE_HZ * ECG_DURATION_S

# The first four are the headline phenotypes; the remaining fourteen follow
# the usual ventricular/atrial volume panel.
PHENOTYPE_NAMES: tuple[str, ...] = (
    "LVEF", "RVEF", "LVM", "RVEDV",
    "LVEDV", "LVESV", "LVSV", "LVCO",
    "RVESV", "RVSV",
    "LAV_max", "LAV_min", "LASV", "LAEF",
    "RAV_max", "RAV_min", "RASV", "RAEF",
)
REQUIRED_PHENOTYPES: tuple[str, ...] = ("LVEF", "RVEF", "LVM", "RVEDV")
PHENOTYPE_UNITS: dict[str, str] = {
    "LVEF": "%", "RVEF": "%", "LAEF": "%", "RAEF": "%",
    "LVM": "g", "LVCO": "L/min",
}

MODALITY_FILES: dict[str, str] = {
    "L": "localizer.npy",
    "C": "cine.npy",
    "E": "ecg.bin",
    "T": "tabular.json",
}
PHENOTYPE_FILE = "phenotypes.json"
SCHEMA_FILE = "schema.json"
SPLITS_FILE = "splits.json"
PAIRED_MODALITIES: tuple[str, ...] = ("L", "E", "T")


def phenotype_unit(name: str) -> str:
    """Physical unit of a phenotype (volumes default to mL)."""
    return PHENOTYPE_UNITS.get(name, "mL")


class Split(str, Enum):
    """Subject-level partition label."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"


def normalize_intensity(voxels: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance normalization over a whole stack."""
    voxels = np.asarray(voxels, dtype=np.float32)
    std = float(voxels.std())
    centered = voxels - voxels.mean()
    if std == 0.0:
        return centered.astype(np.float32)
    return (centered / std).astype(np.float32)


@dataclass(frozen=True)
class ImageStack:
    """Three consecutive slices (or frames) resized to 224 x 224."""

    voxels: np.ndarray

    def __post_init__(self):
        if self.voxels.shape != IMAGE_SHAPE:
            raise ValueError(f"image stack must have shape {IMAGE_SHAPE}, got {self.voxels.shape}")
        if not np.isfinite(self.voxels).all():
            raise ValueError("image stack contains NaN or Inf values")


@dataclass(frozen=True)
class EcgRecord:
    """12-lead resting ECG, leads x timesteps."""

    samples: np.ndarray
    sampling_rate_hz: int = ECG_SAMPLING_RATE_HZ
    drift_corrected: bool = False

    def __post_init__(self):
        if self.samples.ndim != 2 or self.samples.shape[0] != ECG_LEADS:
            raise ValueError(f"ECG must have shape [{ECG_LEADS}, timesteps], got {self.samples.shape}")
        if self.sampling_rate_hz <= 0:
            raise ValueError("sampling rate must be positive")
        if not np.isfinite(self.samples).all():
            raise ValueError("ECG contains NaN or Inf values")

    @property
    def duration_s(self) -> float:
        return self.samples.shape[1] / self.sampling_rate_hz


class NumericValue(NamedTuple):
    name: str
    value: float  # z-normalized
    raw: float


class CategoricalValue(NamedTuple):
    name: str
    index: int
    cardinality: int


@dataclass(frozen=True)
class TabularRecord:
    """One subject's tabular features in schema order."""

    numeric: tuple[NumericValue, ...]
    categorical: tuple[CategoricalValue, ...]

    def numeric_array(self) -> np.ndarray:
        return np.array([v.value for v in self.numeric], dtype=np.float32)

    def categorical_array(self) -> np.ndarray:
        return np.array([v.index for v in self.categorical], dtype=np.int64)

    def category(self, name: str) -> int:
        for entry in self.categorical:
            if entry.name == name:
                return entry.index
        raise KeyError(name)


@dataclass(frozen=True)
class PhenotypeVector:
    """The 18 cardiac phenotypes, in physical units."""

    values: np.ndarray
    names: tuple[str, ...] = PHENOTYPE_NAMES

    def __post_init__(self):
        if len(self.values) != len(PHENOTYPE_NAMES) or len(self.names) != len(PHENOTYPE_NAMES):
            raise ValueError(f"phenotype length ≠ {len(PHENOTYPE_NAMES)} (got {len(self.values)})")
        missing = set(REQUIRED_PHENOTYPES) - set(self.names)
        if missing:
            raise ValueError(f"phenotype vector lacks {sorted(missing)}")

    def __getitem__(self, name: str) -> float:
        return float(self.values[self.names.index(name)])

    def as_dict(self) -> dict[str, float]:
        return {name: float(value) for name, value in zip(self.names, self.values)}


@dataclass(frozen=True)
class NumericFeature:
    name: str
    mean: float
    std: float


@dataclass(frozen=True)
class CategoricalFeature:
    name: str
    cardinality: int


@dataclass(frozen=True)
class TabularSchema:
    """
    Cohort-level tabular feature order and normalization constants.

    ``phenotype_stats`` holds mean/std per phenotype; they are only used as
    numeric features when ``inject_phenotypes`` is set (the T^p ablation).
    """

    numeric: tuple[NumericFeature, ...]
    categorical: tuple[CategoricalFeature, ...]
    inject_phenotypes: bool = False
    phenotype_stats: tuple[NumericFeature, ...] = ()

    def __post_init__(self):
        names = [f.name for f in self.numeric] + [f.name for f in self.categorical]
        if len(set(names)) != len(names):
            raise CohortValidationError("schema feature names must be unique")
        for feature in self.numeric + self.phenotype_stats:
            if not (math.isfinite(feature.mean) and feature.std > 0):
                raise CohortValidationError(f"numeric feature {feature.name!r} needs finite mean and std > 0")
        for feature in self.categorical:
            if feature.cardinality < 1:
                raise CohortValidationError(f"categorical feature {feature.name!r} needs cardinality >= 1")
        if self.inject_phenotypes and len(self.phenotype_stats) != len(PHENOTYPE_NAMES):
            raise CohortValidationError("inject_phenotypes requires statistics for all 18 phenotypes")

    @property
    def numeric_features(self) -> tuple[NumericFeature, ...]:
        """Numeric features as tokenized, including injected phenotypes."""
        if self.inject_phenotypes:
            return self.numeric + self.phenotype_stats
        return self.numeric

    @property
    def n_numeric(self) -> int:
        return len(self.numeric_features)

    @property
    def n_categorical(self) -> int:
        return len(self.categorical)

    @property
    def n_tokens(self) -> int:
        return self.n_numeric + self.n_categorical

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(f.cardinality for f in self.categorical)

    def with_injected_phenotypes(self, enabled: bool = True) -> "TabularSchema":
        """Return the schema with the 18 phenotypes appended as numeric features."""
        return replace(self, inject_phenotypes=enabled)

    def encode(
        self,
        numeric: dict[str, float],
        categorical: dict[str, int],
        phenotypes: Optional[PhenotypeVector] = None,
    ) -> TabularRecord:
        """
        Build a schema-ordered TabularRecord from raw feature values.

        Args:
            numeric: Raw numeric values by feature name
            categorical: Category indices by feature name
            phenotypes: Required when the schema injects phenotypes

        Returns:
            TabularRecord with z-normalized numeric values

        Raises:
            ValueError: If a feature is missing or a category is out of range
        """
        raw_values = []
        for feature in self.numeric:
            if feature.name not in numeric:
                raise ValueError(f"missing numeric feature {feature.name!r}")
            raw_values.append((feature, float(numeric[feature.name])))
        if self.inject_phenotypes:
            if phenotypes is None:
                raise ValueError("phenotypes required for an injecting schema")
            for feature in self.phenotype_stats:
                raw_values.append((feature, phenotypes[feature.name]))

        numeric_entries = tuple(
            NumericValue(feature.name, (raw - feature.mean) / feature.std, raw)
            for feature, raw in raw_values
        )

        categorical_entries = []
        for feature in self.categorical:
            if feature.name not in categorical:
                raise ValueError(f"missing categorical feature {feature.name!r}")
            index = int(categorical[feature.name])
            if not 0 <= index < feature.cardinality:
                raise ValueError(
                    f"category index {index} out of range for {feature.name!r} "
                    f"(cardinality {feature.cardinality})"
                )
            categorical_entries.append(CategoricalValue(feature.name, index, feature.cardinality))

        return TabularRecord(numeric_entries, tuple(categorical_entries))

    def to_dict(self) -> dict[str, Any]:
        return {
            "numeric": [vars(f) for f in self.numeric],
            "categorical": [vars(f) for f in self.categorical],
            "inject_phenotypes": self.inject_phenotypes,
            "phenotypes": [vars(f) for f in self.phenotype_stats],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TabularSchema":
        try:
            return cls(
                numeric=tuple(NumericFeature(f["name"], float(f["mean"]), float(f["std"])) for f in data["numeric"]),
                categorical=tuple(CategoricalFeature(f["name"], int(f["cardinality"])) for f in data["categorical"]),
                inject_phenotypes=bool(data.get("inject_phenotypes", False)),
                phenotype_stats=tuple(
                    NumericFeature(f["name"], float(f["mean"]), float(f["std"])) for f in data.get("phenotypes", [])
                ),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, CohortValidationError):
                raise
            raise CohortValidationError(f"malformed tabular schema: {e}") from e

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    @classmethod
    def load(cls, path: Path) -> "TabularSchema":
        path = Path(path)
        if not path.exists():
            raise CohortValidationError(f"schema file not found: {path}")
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise CohortValidationError(f"schema file is not valid JSON: {path}") from e
        return cls.from_dict(data)

    def save(self, path: Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


@dataclass(frozen=True)
class SubjectRecord:
    """
    One subject's paired modalities, phenotypes and split assignment.

    Completeness of the L/E/T pairing is checked at load time for every
    subject; modality payloads that were not requested by the caller are left
    as ``None`` and never read from disk.
    """

    subject_id: str
    phenotypes: PhenotypeVector
    localizer: Optional[ImageStack] = None
    ecg: Optional[EcgRecord] = None
    tabular: Optional[TabularRecord] = None
    split: Optional[Split] = None
    cine: Optional[ImageStack] = None

    def modality(self, name: str) -> Any:
        return {"L": self.localizer, "E": self.ecg, "T": self.tabular, "C": self.cine}[name]


@dataclass(frozen=True)
class Cohort:
    """Immutable collection of validated subjects."""

    records: tuple[SubjectRecord, ...]
    schema: TabularSchema
    root: Optional[Path] = None
    rejected: tuple[tuple[str, str], ...] = ()
    modalities: tuple[str, ...] = PAIRED_MODALITIES
    _index: dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = [r.subject_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise CohortValidationError("subject_id values must be unique within a cohort")
        self._index.update({sid: i for i, sid in enumerate(ids)})

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SubjectRecord]:
        return iter(self.records)

    def __getitem__(self, subject_id: str) -> SubjectRecord:
        return self.records[self._index[subject_id]]

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    def split_ids(self, split: Split | str) -> list[str]:
        split = Split(split)
        return [r.subject_id for r in self.records if r.split == split]

    def subset(self, subject_ids: Iterable[str]) -> list[SubjectRecord]:
        return [self[sid] for sid in subject_ids]

    def with_splits(self, assignment: dict[str, Split]) -> "Cohort":
        records = tuple(replace(r, split=assignment[r.subject_id]) for r in self.records)
        return replace(self, records=records)

    def split_fingerprint(self, split: Split | str) -> str:
        return fingerprint(sorted(self.split_ids(split)))


def _read_modality_file(subject_dir: Path, modality: str) -> Any:
    """Read one modality payload from disk. Every modality read goes through here."""
    path = subject_dir / MODALITY_FILES[modality]
    if modality in ("L", "C"):
        voxels = np.load(path, allow_pickle=False)
        if voxels.dtype != np.float32:
            raise ValueError(f"{path.name} must be float32, got {voxels.dtype}")
        return voxels
    if modality == "E":
        samples = np.fromfile(path, dtype="<f4")
        if samples.size % ECG_LEADS != 0:
            raise ValueError(f"{path.name} size {samples.size} not a multiple of {ECG_LEADS} leads")
        return samples.reshape(ECG_LEADS, -1)
    with open(path, "r") as f:
        return json.load(f)


def _read_phenotypes(subject_dir: Path) -> PhenotypeVector:
    with open(subject_dir / PHENOTYPE_FILE, "r") as f:
        data = json.load(f)
    if len(data) != len(PHENOTYPE_NAMES):
        raise ValueError(f"phenotype length ≠ {len(PHENOTYPE_NAMES)} (got {len(data)})")
    unknown = set(data) - set(PHENOTYPE_NAMES)
    if unknown:
        raise ValueError(f"unknown phenotypes {sorted(unknown)}")
    return PhenotypeVector(np.array([float(data[name]) for name in PHENOTYPE_NAMES], dtype=np.float64))


def _load_subject(subject_dir: Path, schema: TabularSchema, modalities: Sequence[str]) -> SubjectRecord:
    subject_id = subject_dir.name
    required = set(PAIRED_MODALITIES) | set(m for m in modalities if m == "C")
    for modality in sorted(required):
        if not (subject_dir / MODALITY_FILES[modality]).exists():
            raise RecordRejected(subject_id, f"missing modality ({MODALITY_FILES[modality]})")
    if not (subject_dir / PHENOTYPE_FILE).exists():
        raise RecordRejected(subject_id, f"missing phenotypes ({PHENOTYPE_FILE})")

    expected_ecg_bytes = ECG_LEADS * ECG_TIMESTEPS * 4
    if (subject_dir / MODALITY_FILES["E"]).stat().st_size != expected_ecg_bytes:
        raise RecordRejected(subject_id, f"ecg.bin must hold {ECG_LEADS}x{ECG_TIMESTEPS} float32 samples")

    try:
        phenotypes = _read_phenotypes(subject_dir)
        fields: dict[str, Any] = {}
        if "L" in modalities:
            fields["localizer"] = ImageStack(_read_modality_file(subject_dir, "L"))
        if "C" in modalities:
            fields["cine"] = ImageStack(_read_modality_file(subject_dir, "C"))
        if "E" in modalities:
            fields["ecg"] = EcgRecord(_read_modality_file(subject_dir, "E"))
        if "T" in modalities:
            raw = _read_modality_file(subject_dir, "T")
            fields["tabular"] = schema.encode(raw["numeric"], raw["categorical"], phenotypes)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise RecordRejected(subject_id, str(e)) from e

    return SubjectRecord(subject_id=subject_id, phenotypes=phenotypes, **fields)


def load_cohort(
    path: Path | str,
    schema: Optional[TabularSchema] = None,
    modalities: Sequence[str] = PAIRED_MODALITIES,
    max_workers: int = 1,
) -> Cohort:
    """
    Load every valid subject under a cohort root.

    Args:
        path: Cohort root directory
        schema: Tabular schema; read from ``schema.json`` when omitted
        modalities: Modalities whose payloads are read ("L", "E", "T", "C")
        max_workers: Threads used to load subjects in parallel

    Returns:
        Cohort of valid subjects; rejected subjects listed with their reason

    Raises:
        CohortValidationError: If the root or its schema is unusable
    """
    root = Path(path)
    if not root.is_dir():
        raise CohortValidationError(f"cohort directory not found: {root}")
    if schema is None:
        schema = TabularSchema.load(root / SCHEMA_FILE)
    unknown = set(modalities) - set(MODALITY_FILES)
    if unknown:
        raise ValueError(f"unknown modalities {sorted(unknown)}")

    subject_dirs = sorted(p for p in root.iterdir() if p.is_dir())

    def attempt(subject_dir: Path) -> SubjectRecord | RecordRejected:
        try:
            return _load_subject(subject_dir, schema, modalities)
        except RecordRejected as rejection:
            return rejection

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        outcomes = list(pool.map(attempt, subject_dirs))

    records = []
    rejected = []
    for outcome in outcomes:
        if isinstance(outcome, RecordRejected):
            logger.warning("Rejected subject %s: %s", outcome.subject_id, outcome.reason)
            rejected.append((outcome.subject_id, outcome.reason))
        else:
            records.append(outcome)

    splits_path = root / SPLITS_FILE
    if splits_path.exists():
        with open(splits_path, "r") as f:
            assignment = json.load(f)
        records = [replace(r, split=Split(assignment[r.subject_id])) if r.subject_id in assignment else r
                   for r in records]

    logger.info("Loaded %d subjects from %s (%d rejected)", len(records), root, len(rejected))
    return Cohort(tuple(records), schema, root, tuple(rejected), tuple(modalities))


def save_cohort(cohort: Cohort, path: Path | str) -> None:
    """
    Write a cohort in the directory layout read by ``load_cohort``.

    Tabular values are written raw so that reloading re-derives identical
    z-normalized values.
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cohort.schema.with_injected_phenotypes(False).save(root / SCHEMA_FILE)

    for record in cohort:
        subject_dir = root / record.subject_id
        subject_dir.mkdir(exist_ok=True)
        if record.localizer is not None:
            np.save(subject_dir / MODALITY_FILES["L"], record.localizer.voxels.astype(np.float32))
        if record.cine is not None:
            np.save(subject_dir / MODALITY_FILES["C"], record.cine.voxels.astype(np.float32))
        if record.ecg is not None:
            record.ecg.samples.astype("<f4").tofile(subject_dir / MODALITY_FILES["E"])
        if record.tabular is not None:
            base_names = {f.name for f in cohort.schema.numeric}
            payload = {
                "numeric": {v.name: v.raw for v in record.tabular.numeric if v.name in base_names},
                "categorical": {v.name: v.index for v in record.tabular.categorical},
            }
            with open(subject_dir / MODALITY_FILES["T"], "w") as f:
                json.dump(payload, f, indent=2)
        with open(subject_dir / PHENOTYPE_FILE, "w") as f:
            json.dump(record.phenotypes.as_dict(), f, indent=2)

    write_splits(cohort, root)


def write_splits(cohort: Cohort, path: Path | str) -> Optional[Path]:
    """Write ``splits.json`` (subject_id -> split) for every labelled subject."""
    assignment = {r.subject_id: r.split.value for r in cohort if r.split is not None}
    if not assignment:
        return None
    target = Path(path) / SPLITS_FILE
    with open(target, "w") as f:
        json.dump(assignment, f, indent=2, sort_keys=True)
    return target


def largest_remainder_sizes(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer split sizes summing to ``n``; equal remainders favour the earlier split."""
    quotas = [n * f for f in fractions]
    sizes = [math.floor(q) for q in quotas]
    remainders = [q - s for q, s in zip(quotas, sizes)]
    order = sorted(range(len(fractions)), key=lambda i: (-remainders[i], i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_cohort(cohort: Cohort, fractions: Sequence[float], seed: int) -> Cohort:
    """
    Assign every subject to exactly one of train/val/test.

    The assignment depends only on the set of subject_ids, the fractions and
    the seed: ids are sorted lexicographically, permuted with a seeded
    generator and cut at largest-remainder sizes.

    Args:
        cohort: Cohort to split
        fractions: (train, val, test) fractions summing to 1
        seed: Permutation seed

    Returns:
        New Cohort with split labels

    Raises:
        ValueError: If the fractions are not three non-negative values summing to 1
    """
    fractions = [float(f) for f in fractions]
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative values summing to 1, got {fractions}")

    ids = sorted(cohort.subject_ids)
    sizes = largest_remainder_sizes(len(ids), fractions)
    permutation = np.random.default_rng(seed).permutation(len(ids))

    labels = [Split.TRAIN] * sizes[0] + [Split.VAL] * sizes[1] + [Split.TEST] * sizes[2]
    assignment = {ids[index]: label for index, label in zip(permutation, labels)}
    return cohort.with_splits(assignment)
