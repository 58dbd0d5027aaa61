"""Shared fixtures: a small synthetic cohort on disk and miniature encoder configs."""

import pytest
import yaml

from src.data_model import load_cohort, split_cohort, write_splits
from src.synthetic_cohort import TABULAR_SCHEMA, SyntheticCohortGenerator
from tests.helpers import TINY_SIZES, tiny_config

N_SUBJECTS = 16
SPLIT_FRACTIONS = (0.5, 0.25, 0.25)


@pytest.fixture(scope="session")
def cohort_root(tmp_path_factory):
    """16 synthetic subjects (8 train / 4 val / 4 test) written to disk."""
    root = tmp_path_factory.mktemp("cohort")
    cohort = SyntheticCohortGenerator().generate_cohort(N_SUBJECTS, seed=3, root=root, max_workers=4)
    write_splits(split_cohort(cohort, SPLIT_FRACTIONS, seed=7), root)
    return root


@pytest.fixture(scope="session")
def cohort(cohort_root):
    return load_cohort(cohort_root, modalities=("L", "E", "T", "C"), max_workers=4)


@pytest.fixture(scope="session")
def schema():
    return TABULAR_SCHEMA


@pytest.fixture
def tiny_configs():
    return {m: tiny_config(m) for m in ("L", "E", "T", "C")}


@pytest.fixture
def tiny_config_file(tmp_path, cohort_root):
    """Config file for fast CLI runs against the session cohort."""
    config = {
        "experiment": {"variant": "C-TRIP", "seed": 0, "deterministic": False, "runs_dir": str(tmp_path / "runs")},
        "data": {"root": str(cohort_root), "fractions": list(SPLIT_FRACTIONS), "split_seed": 7, "num_workers": 0},
        "synthetic": {"n_subjects": N_SUBJECTS, "seed": 3},
        "encoders": {m: dict(TINY_SIZES[m]) for m in ("L", "E", "T")},
        "stage1": {"epochs": 1, "bs": 4, "lr": 5.0e-4, "mask_ratio": 0.75, "patience": 20},
        "stage2": {"epochs": 1, "bs": 4, "lr": 1.0e-4, "projection_dim": 16, "tau_le": 0.1, "tau_lt": 0.25},
        "stage3": {"epochs": 1, "bs": 4, "lr_head": 1.0e-3, "lr_encoder": 1.0e-4, "fraction": 1.0, "hidden_dim": 16},
        "evaluation": {"n_resamples": 50, "seed": 0, "fractions": [0.5, 1.0], "seeds": [0], "variants": ["L_sup"]},
    }
    path = tmp_path / "config.yaml"
    with open(path, "w") as f:
        yaml.safe_dump(config, f)
    return path
