"""Optimizer, schedule, early stopping and curve logging shared by all stages."""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional

import pandas as pd
import torch
from tqdm.auto import tqdm

from src.errors import NumericalDivergenceError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainHparams:
    """Optimization settings for one stage."""

    epochs: int
    batch_size: int
    lr: float
    weight_decay: float = 0.05
    patience: int = 20
    min_delta: float = 0.0
    seed: int = 0
    num_workers: int = 0
    device: Optional[str] = None
    progress: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")


class EarlyStopping:
    """Stops when the monitored loss has not improved for ``patience`` epochs."""

    def __init__(self, patience: int = 20, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = math.inf
        self.best_epoch = -1
        self.stale_epochs = 0

    def step(self, value: float, epoch: int) -> bool:
        """
        Record an epoch's monitored value.

        Returns:
            True if the value is a new best
        """
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.stale_epochs = 0
            return True
        self.stale_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale_epochs >= self.patience


class CurveLog:
    """Per-epoch rows written as a CSV training curve."""

    def __init__(self, columns: Iterable[str]):
        self.columns = list(columns)
        self.rows: list[dict[str, Any]] = []

    def append(self, **row: Any) -> None:
        self.rows.append({column: row.get(column) for column in self.columns})

    @property
    def frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=self.columns)

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False)
        return path


def build_optimizer(param_groups: list[dict[str, Any]], weight_decay: float) -> torch.optim.AdamW:
    """AdamW over parameter groups; groups carry their own ``lr``."""
    groups = [g for g in param_groups if any(p.requires_grad for p in g["params"])]
    for group in groups:
        group["params"] = [p for p in group["params"] if p.requires_grad]
    return torch.optim.AdamW(groups, weight_decay=weight_decay)


def build_scheduler(optimizer: torch.optim.Optimizer, epochs: int) -> torch.optim.lr_scheduler.CosineAnnealingLR:
    return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(1, epochs))


def check_finite(loss: torch.Tensor, stage: str, epoch: int, batch: int) -> None:
    """Abort training on a NaN or infinite loss."""
    if not torch.isfinite(loss).all():
        raise NumericalDivergenceError(
            f"{stage}: non-finite loss {loss.item()} at epoch {epoch}, batch {batch}"
        )


def epoch_range(epochs: int, desc: str, progress: bool) -> Iterable[int]:
    return tqdm(range(epochs), desc=desc, disable=not progress, leave=False)


def copy_state(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}
