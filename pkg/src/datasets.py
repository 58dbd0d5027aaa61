"""torch Dataset views over a Cohort."""

from typing import Any, NamedTuple, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset
from torchvision.transforms import v2

from src.data_model import Cohort, SubjectRecord
from src.patching import correct_baseline_drift


class TabularInputs(NamedTuple):
    numeric: torch.Tensor  # [B, n_numeric] float
    categorical: torch.Tensor  # [B, n_categorical] long


def localizer_augmentation() -> v2.Compose:
    """Random crop, scale and rotation for localizer training images."""
    return v2.Compose([
        v2.RandomResizedCrop(224, scale=(0.8, 1.0), ratio=(0.9, 1.1), antialias=True),
        v2.RandomRotation(degrees=10),
    ])


class CohortDataset(Dataset):
    """
    Tensors for a subset of subjects and modalities.

    ECG records are drift-corrected once at construction. Augmentation applies
    to the localizer only.
    """

    def __init__(
        self,
        cohort: Cohort,
        subject_ids: Sequence[str],
        modalities: Sequence[str],
        augment_localizer: bool = False,
    ):
        self.records: list[SubjectRecord] = cohort.subset(subject_ids)
        self.modalities = tuple(modalities)
        self.augment = localizer_augmentation() if augment_localizer and "L" in self.modalities else None

        for modality in self.modalities:
            if any(record.modality(modality) is None for record in self.records):
                raise ValueError(f"modality {modality!r} was not loaded for every requested subject")

        self._ecg: Optional[list[np.ndarray]] = None
        if "E" in self.modalities:
            self._ecg = []
            for record in self.records:
                ecg = record.ecg if record.ecg.drift_corrected else correct_baseline_drift(record.ecg)
                self._ecg.append(ecg.samples)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    def __getitem__(self, index: int) -> dict[str, Any]:
        record = self.records[index]
        item: dict[str, Any] = {
            "index": index,
            "y": torch.as_tensor(record.phenotypes.values, dtype=torch.float32),
        }
        if "L" in self.modalities:
            localizer = torch.from_numpy(record.localizer.voxels.copy())
            item["L"] = self.augment(localizer) if self.augment is not None else localizer
        if "C" in self.modalities:
            item["C"] = torch.from_numpy(record.cine.voxels.copy())
        if "E" in self.modalities:
            item["E"] = torch.from_numpy(self._ecg[index].copy())
        if "T" in self.modalities:
            item["T_num"] = torch.from_numpy(record.tabular.numeric_array())
            item["T_cat"] = torch.from_numpy(record.tabular.categorical_array())
        return item


def make_loader(
    dataset: Dataset,
    batch_size: int,
    shuffle: bool,
    seed: int = 0,
    num_workers: int = 0,
    drop_last: bool = False,
) -> DataLoader:
    """DataLoader with a seeded shuffling generator."""
    generator = torch.Generator()
    generator.manual_seed(seed)
    return DataLoader(
        dataset,
        batch_size=batch_size,
        shuffle=shuffle,
        num_workers=num_workers,
        drop_last=drop_last,
        generator=generator,
    )


def modality_inputs(batch: dict[str, Any], modality: str, device: torch.device | str = "cpu") -> torch.Tensor | TabularInputs:
    """Extract one modality's model inputs from a collated batch."""
    if modality == "T":
        return TabularInputs(batch["T_num"].to(device), batch["T_cat"].to(device))
    return batch[modality].to(device)
