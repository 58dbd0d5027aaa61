"""Agreement statistics, bootstrap confidence intervals and the data-fraction scaling experiment."""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from src.data_model import PHENOTYPE_NAMES, phenotype_unit
from src.utils.reproducibility import fingerprint

logger = logging.getLogger(__name__)

LOA_MULTIPLIER = 1.96
CONFIDENCE_LEVEL = 0.95
DEFAULT_RESAMPLES = 1000
MIN_BOOTSTRAP_N = 10
CI_NOTE = "95% percentile bootstrap over paired resamples; intervals for md and loa are an extension beyond the point estimates"

SCALING_COLUMNS = ["variant", "fraction", "seed", "phenotype", "pearson_r", "ci_low", "ci_high"]


def _paired(y_pred, y_true, minimum: int) -> tuple[np.ndarray, np.ndarray]:
    y_pred = np.asarray(y_pred, dtype=np.float64).ravel()
    y_true = np.asarray(y_true, dtype=np.float64).ravel()
    if y_pred.shape != y_true.shape:
        raise ValueError(f"length mismatch: {y_pred.size} predictions vs {y_true.size} references")
    if y_pred.size < minimum:
        raise ValueError(f"need at least {minimum} pairs, got {y_pred.size}")
    return y_pred, y_true


def mean_difference(y_pred, y_true) -> float:
    """Mean of ``y_pred - y_true``; positive means overestimation."""
    y_pred, y_true = _paired(y_pred, y_true, 2)
    return float(np.mean(y_pred - y_true))


def limits_of_agreement(y_pred, y_true) -> tuple[float, float]:
    """Bland-Altman limits: md -/+ 1.96 x sample SD of the differences."""
    y_pred, y_true = _paired(y_pred, y_true, 3)
    diffs = y_pred - y_true
    md = float(np.mean(diffs))
    spread = LOA_MULTIPLIER * float(np.std(diffs, ddof=1))
    return md - spread, md + spread


def pearson_r(x, y) -> float:
    x, y = _paired(x, y, 3)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("undefined correlation")
    return float(np.clip(stats.pearsonr(x, y).statistic, -1.0, 1.0))


def _loa_low(y_pred, y_true) -> float:
    return limits_of_agreement(y_pred, y_true)[0]


def _loa_high(y_pred, y_true) -> float:
    return limits_of_agreement(y_pred, y_true)[1]


STATISTICS: dict[str, Callable[[np.ndarray, np.ndarray], float]] = {
    "md": mean_difference,
    "loa_low": _loa_low,
    "loa_high": _loa_high,
    "pearson_r": pearson_r,
}


def bootstrap_ci(
    statistic: Callable[[np.ndarray, np.ndarray], float],
    y_pred,
    y_true,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    confidence: float = CONFIDENCE_LEVEL,
) -> tuple[float, float]:
    """
    Percentile bootstrap interval over paired (pred, true) resamples.

    Resamples on which the statistic is undefined (e.g. zero variance) are
    dropped from the bootstrap distribution.
    """
    y_pred, y_true = _paired(y_pred, y_true, MIN_BOOTSTRAP_N)

    def guarded(a: np.ndarray, b: np.ndarray) -> float:
        try:
            return statistic(a, b)
        except ValueError:
            return np.nan

    result = stats.bootstrap(
        (y_pred, y_true),
        guarded,
        paired=True,
        vectorized=False,
        n_resamples=n_resamples,
        confidence_level=confidence,
        method="percentile",
        random_state=np.random.default_rng(seed),
    )
    distribution = np.asarray(result.bootstrap_distribution, dtype=np.float64)
    if np.isnan(distribution).all():
        raise ValueError("statistic undefined on every bootstrap resample")
    alpha = (1.0 - confidence) / 2.0
    low, high = np.nanpercentile(distribution, [100 * alpha, 100 * (1 - alpha)])
    return float(low), float(high)


@dataclass
class PhenotypeAgreement:
    """Agreement statistics for one phenotype."""

    name: str
    unit: str
    n: int
    md: float
    loa_low: float
    loa_high: float
    pearson_r: Optional[float]
    ci: dict[str, Optional[tuple[float, float]]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.loa_low <= self.md <= self.loa_high:
            raise ValueError(f"{self.name}: md outside its limits of agreement")
        if self.pearson_r is not None and abs(self.pearson_r) > 1.0:
            raise ValueError(f"{self.name}: |pearson_r| > 1")


@dataclass
class AgreementReport:
    """Per-phenotype agreement of one variant on one evaluation split."""

    variant: str
    phenotypes: dict[str, PhenotypeAgreement]
    test_split: str
    n_resamples: int
    seed: int
    ci_note: str = CI_NOTE

    def to_dict(self) -> dict:
        return {
            "test_split": self.test_split,
            "n_resamples": self.n_resamples,
            "seed": self.seed,
            "ci_note": self.ci_note,
            "phenotypes": {name: asdict(entry) for name, entry in self.phenotypes.items()},
        }

    def frame(self) -> pd.DataFrame:
        """One row per phenotype with point estimates."""
        return pd.DataFrame(
            [{"phenotype": e.name, "unit": e.unit, "n": e.n, "md": e.md, "loa_low": e.loa_low,
              "loa_high": e.loa_high, "pearson_r": e.pearson_r} for e in self.phenotypes.values()]
        )


def _phenotype_agreement(name: str, y_pred: np.ndarray, y_true: np.ndarray, n_resamples: int, seed: int) -> PhenotypeAgreement:
    md = mean_difference(y_pred, y_true)
    loa_low, loa_high = limits_of_agreement(y_pred, y_true)
    try:
        r: Optional[float] = pearson_r(y_pred, y_true)
    except ValueError:
        logger.warning("Pearson R undefined for %s (constant values)", name)
        r = None

    intervals: dict[str, Optional[tuple[float, float]]] = {}
    for stat_name, statistic in STATISTICS.items():
        if len(y_pred) < MIN_BOOTSTRAP_N or (stat_name == "pearson_r" and r is None):
            intervals[stat_name] = None
            continue
        try:
            intervals[stat_name] = bootstrap_ci(statistic, y_pred, y_true, n_resamples, seed)
        except ValueError:
            intervals[stat_name] = None
    return PhenotypeAgreement(name, phenotype_unit(name), len(y_pred), md, loa_low, loa_high, r, intervals)


def build_agreement_report(
    predictions: pd.DataFrame,
    variant: str,
    n_resamples: int = DEFAULT_RESAMPLES,
    seed: int = 0,
    names: Sequence[str] = PHENOTYPE_NAMES,
) -> AgreementReport:
    """
    Agreement statistics for every phenotype in long-format predictions.

    Args:
        predictions: Columns subject_id, phenotype_name, y_true, y_pred
        variant: Variant label
        n_resamples: Bootstrap resamples per statistic
        seed: Bootstrap seed
        names: Phenotypes to report, in order

    Returns:
        AgreementReport with point estimates and bootstrap intervals
    """
    missing = {"subject_id", "phenotype_name", "y_true", "y_pred"} - set(predictions.columns)
    if missing:
        raise ValueError(f"predictions lack columns {sorted(missing)}")

    entries = {}
    for name in names:
        rows = predictions[predictions["phenotype_name"] == name].sort_values("subject_id")
        if rows.empty:
            raise ValueError(f"no predictions for {name}")
        entries[name] = _phenotype_agreement(
            name, rows["y_pred"].to_numpy(), rows["y_true"].to_numpy(), n_resamples, seed
        )

    test_split = fingerprint(sorted(predictions["subject_id"].unique().tolist()))
    return AgreementReport(variant, entries, test_split, n_resamples, seed)


def write_agreement_reports(reports: Sequence[AgreementReport], path: Path) -> Path:
    """Merge reports into ``agreement_report.json`` (variant -> phenotype -> statistics)."""
    path = Path(path)
    existing: dict = {}
    if path.exists():
        with open(path, "r") as f:
            existing = json.load(f)
    for report in reports:
        existing[report.variant] = report.to_dict()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(existing, f, indent=2, sort_keys=True)
    return path


CellRunner = Callable[[str, float, int], pd.DataFrame]


def scaling_experiment(
    variants: Sequence[str],
    fractions: Sequence[float],
    seeds: Sequence[int],
    cell_runner: CellRunner,
    n_resamples: int = DEFAULT_RESAMPLES,
    ci_seed: int = 0,
    max_workers: int = 1,
    names: Sequence[str] = PHENOTYPE_NAMES,
) -> pd.DataFrame:
    """
    Pearson R per phenotype for every (variant, fraction, seed) cell.

    ``cell_runner`` fine-tunes one cell and returns its test-split predictions.
    Every cell must be evaluated on the same test subjects.

    Returns:
        Long-format table with columns variant, fraction, seed, phenotype,
        pearson_r, ci_low, ci_high; the test-split hash is in ``attrs``
    """
    cells = [(v, float(f), int(s)) for v in variants for f in fractions for s in seeds]

    def run(cell: tuple[str, float, int]) -> tuple[tuple[str, float, int], pd.DataFrame]:
        variant, fraction, seed = cell
        logger.info("scaling cell variant=%s fraction=%g seed=%d", variant, fraction, seed)
        return cell, cell_runner(variant, fraction, seed)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        outcomes = list(pool.map(run, cells))

    rows = []
    test_split: Optional[str] = None
    for (variant, fraction, seed), predictions in outcomes:
        split = fingerprint(sorted(predictions["subject_id"].unique().tolist()))
        if test_split is None:
            test_split = split
        elif split != test_split:
            raise ValueError(f"test split differs for cell {variant}/{fraction:g}/{seed}")
        for name in names:
            part = predictions[predictions["phenotype_name"] == name].sort_values("subject_id")
            y_pred, y_true = part["y_pred"].to_numpy(), part["y_true"].to_numpy()
            try:
                r = pearson_r(y_pred, y_true)
                low, high = bootstrap_ci(pearson_r, y_pred, y_true, n_resamples, ci_seed) \
                    if len(part) >= MIN_BOOTSTRAP_N else (np.nan, np.nan)
            except ValueError:
                r, low, high = np.nan, np.nan, np.nan
            rows.append({"variant": variant, "fraction": fraction, "seed": seed, "phenotype": name,
                         "pearson_r": r, "ci_low": low, "ci_high": high})

    table = pd.DataFrame(rows, columns=SCALING_COLUMNS)
    table.attrs["test_split"] = test_split
    return table
