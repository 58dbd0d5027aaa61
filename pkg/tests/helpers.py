"""Builders shared by the test modules."""

import numpy as np

from src.data_model import PHENOTYPE_NAMES, Cohort, PhenotypeVector, Split, SubjectRecord
from src.encoders import EncoderConfig
from src.synthetic_cohort import TABULAR_SCHEMA

TINY_SIZES = {
    "L": dict(embed_dim=16, depth=2, num_heads=2, decoder_dim=8, decoder_depth=1, patch_size=32),
    "C": dict(embed_dim=16, depth=2, num_heads=2, decoder_dim=8, decoder_depth=1, patch_size=32),
    "E": dict(embed_dim=8, depth=2, num_heads=2, decoder_dim=4, decoder_depth=1, patch_len=500),
    "T": dict(embed_dim=8, depth=2, num_heads=2, decoder_dim=4, decoder_depth=1),
}


def tiny_config(modality: str, **overrides) -> EncoderConfig:
    sizes = dict(TINY_SIZES[modality])
    sizes.update(overrides)
    return EncoderConfig.default(modality, **sizes)


def label_only_cohort(n_train: int, n_val: int = 0, n_test: int = 0) -> Cohort:
    """Cohort without modality payloads, for split and subsampling logic."""
    values = np.arange(len(PHENOTYPE_NAMES), dtype=np.float64) + 1.0
    records = []
    for split, count in ((Split.TRAIN, n_train), (Split.VAL, n_val), (Split.TEST, n_test)):
        for _ in range(count):
            records.append(SubjectRecord(f"sub-{len(records):05d}", PhenotypeVector(values), split=split))
    return Cohort(tuple(records), TABULAR_SCHEMA)
