"""Stage III: phenotype regression from a single input modality (the localizer for aligned variants)."""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.checkpoints import CheckpointStore
from src.contrastive import ProjectionHead
from src.data_model import IMAGE_SHAPE, PHENOTYPE_NAMES, Cohort, ImageStack, PhenotypeVector, Split, TabularSchema
from src.datasets import CohortDataset, make_loader, modality_inputs
from src.encoders import EncoderConfig, ModalityEncoder
from src.training import (
    CurveLog,
    EarlyStopping,
    build_optimizer,
    build_scheduler,
    check_finite,
    copy_state,
    epoch_range,
)
from src.utils.reproducibility import fingerprint, resolve_device, set_seed

logger = logging.getLogger(__name__)

N_PHENOTYPES = len(PHENOTYPE_NAMES)


@dataclass(frozen=True)
class FinetuneConfig:
    """Stage-III settings; ``fraction`` is the share of training subjects with labels."""

    fraction: float = 1.0
    lr_head: float = 1e-3
    lr_encoder: float = 1e-4
    epochs: int = 100
    batch_size: int = 64
    weight_decay: float = 0.05
    hidden_dim: int = 256
    patience: int = 20
    min_delta: float = 0.0
    seed: int = 0
    num_workers: int = 0
    device: Optional[str] = None
    progress: bool = False

    def __post_init__(self):
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")
        if self.lr_head < 0 or self.lr_encoder < 0:
            raise ValueError("learning rates must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


class TargetNormalizer:
    """Per-phenotype z-normalization fitted on training targets."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        if self.mean.shape != (N_PHENOTYPES,) or self.std.shape != (N_PHENOTYPES,):
            raise ValueError(f"normalizer needs {N_PHENOTYPES} means and stds")
        if not (self.std > 0).all():
            raise ValueError("normalizer stds must be positive")

    @classmethod
    def fit(cls, targets: np.ndarray) -> "TargetNormalizer":
        targets = np.asarray(targets, dtype=np.float64)
        std = targets.std(axis=0)
        std[~(std > 0)] = 1.0
        return cls(targets.mean(axis=0), std)

    @classmethod
    def identity(cls) -> "TargetNormalizer":
        return cls(np.zeros(N_PHENOTYPES), np.ones(N_PHENOTYPES))

    def normalize(self, values):
        if isinstance(values, torch.Tensor):
            return (values - values.new_tensor(self.mean)) / values.new_tensor(self.std)
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, values):
        if isinstance(values, torch.Tensor):
            return values * values.new_tensor(self.std) + values.new_tensor(self.mean)
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, list[float]]) -> "TargetNormalizer":
        return cls(np.array(data["mean"]), np.array(data["std"]))


class RegressionHead(nn.Module):
    """Two-layer perceptron with 18 outputs."""

    def __init__(self, in_dim: int, hidden_dim: int = 256, out_dim: int = N_PHENOTYPES):
        super().__init__()
        if out_dim != N_PHENOTYPES:
            raise ValueError(f"regression head must have {N_PHENOTYPES} outputs")
        self.net = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.GELU(), nn.Linear(hidden_dim, out_dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class PhenotypeRegressor(nn.Module):
    """
    Encoder [CLS] output, optionally projected into the shared space, fed to a regression head.

    ``forward`` returns z-normalized predictions; ``predict`` returns physical units.
    """

    def __init__(
        self,
        encoder: ModalityEncoder,
        projection: Optional[ProjectionHead] = None,
        hidden_dim: int = 256,
        normalizer: Optional[TargetNormalizer] = None,
    ):
        super().__init__()
        self.encoder = encoder
        self.projection = projection
        in_dim = projection.linear.out_features if projection is not None else encoder.config.embed_dim
        self.head = RegressionHead(in_dim, hidden_dim)
        self.normalizer = normalizer or TargetNormalizer.identity()

    @property
    def modality(self) -> str:
        return self.encoder.modality

    def backbone_parameters(self) -> list[nn.Parameter]:
        params = list(self.encoder.parameters())
        if self.projection is not None:
            params += list(self.projection.parameters())
        return params

    def features(self, inputs: Any) -> torch.Tensor:
        cls = self.encoder(inputs).cls
        return self.projection(cls) if self.projection is not None else cls

    def forward(self, inputs: Any) -> torch.Tensor:
        return self.head(self.features(inputs))

    @torch.no_grad()
    def predict(self, inputs: Any) -> torch.Tensor:
        self.eval()
        return self.normalizer.denormalize(self(inputs).double())


def subsample_training(cohort: Cohort, fraction: float, seed: int) -> list[str]:
    """
    Nested subject-level subsample of the training split.

    ceil(fraction * n_train) subjects are taken as a prefix of one seeded
    permutation, so a smaller fraction's subset lies inside a larger one's.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    train_ids = sorted(cohort.split_ids(Split.TRAIN))
    if not train_ids:
        raise ValueError("cohort has no training split")
    count = max(1, math.ceil(fraction * len(train_ids) - 1e-9))
    order = np.random.default_rng(seed).permutation(len(train_ids))
    return sorted(train_ids[i] for i in order[:count])


def build_finetune_optimizer(regressor: PhenotypeRegressor, config: FinetuneConfig) -> torch.optim.AdamW:
    """Two parameter groups: the head at ``lr_head``, encoder (and projection) at ``lr_encoder``."""
    return build_optimizer([
        {"params": list(regressor.head.parameters()), "lr": config.lr_head},
        {"params": regressor.backbone_parameters(), "lr": config.lr_encoder},
    ], config.weight_decay)


@torch.no_grad()
def _mean_loss(regressor: PhenotypeRegressor, loader, device: torch.device) -> float:
    regressor.eval()
    total, count = 0.0, 0
    for batch in loader:
        targets = regressor.normalizer.normalize(batch["y"].double()).float().to(device)
        predictions = regressor(modality_inputs(batch, regressor.modality, device))
        total += F.mse_loss(predictions, targets, reduction="sum").item() / N_PHENOTYPES
        count += targets.shape[0]
    return total / max(count, 1)


@torch.no_grad()
def predict_cohort(
    regressor: PhenotypeRegressor,
    cohort: Cohort,
    subject_ids: Sequence[str],
    batch_size: int = 64,
    device: Optional[str] = None,
) -> pd.DataFrame:
    """Long-format predictions: subject_id, phenotype_name, y_true, y_pred."""
    torch_device = resolve_device(device)
    regressor = regressor.to(torch_device)
    dataset = CohortDataset(cohort, subject_ids, [regressor.modality])
    rows = []
    offset = 0
    for batch in make_loader(dataset, batch_size, False):
        predictions = regressor.predict(modality_inputs(batch, regressor.modality, torch_device)).cpu().numpy()
        truth = batch["y"].double().numpy()
        for pred_row, true_row in zip(predictions, truth):
            sid = dataset.records[offset].subject_id
            offset += 1
            rows.extend(
                {"subject_id": sid, "phenotype_name": name, "y_true": float(t), "y_pred": float(p)}
                for name, t, p in zip(PHENOTYPE_NAMES, true_row, pred_row)
            )
    return pd.DataFrame(rows, columns=["subject_id", "phenotype_name", "y_true", "y_pred"])


@dataclass
class FinetuneResult:
    regressor: PhenotypeRegressor
    train_ids: list[str]
    curve: pd.DataFrame
    predictions: pd.DataFrame
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def head(self) -> RegressionHead:
        return self.regressor.head

    @property
    def encoder(self) -> ModalityEncoder:
        return self.regressor.encoder


def finetune_stage3(
    encoder: ModalityEncoder,
    cohort: Cohort,
    config: FinetuneConfig,
    projection: Optional[ProjectionHead] = None,
    curve_path: Optional[Path] = None,
    predictions_path: Optional[Path] = None,
) -> FinetuneResult:
    """
    Fine-tune a regression head (and the encoder) on z-normalized phenotypes.

    Only the encoder's own modality is read. Validation MSE drives early
    stopping and the best weights are restored; predictions are produced for
    the full test split (validation split when there is none).

    Args:
        encoder: Encoder to fine-tune (pretrained, aligned or randomly initialized)
        cohort: Split cohort with the encoder's modality loaded
        config: Fraction, learning rates, epochs, seed
        projection: Shared-space projection of aligned variants
        curve_path: Where to write ``epoch, train_loss, val_loss``
        predictions_path: Where to write the long-format predictions

    Returns:
        FinetuneResult with the trained regressor

    Raises:
        NumericalDivergenceError: On a non-finite loss
    """
    set_seed(config.seed)
    device = resolve_device(config.device)
    train_ids = subsample_training(cohort, config.fraction, config.seed)
    val_ids = cohort.split_ids(Split.VAL)
    eval_ids = cohort.split_ids(Split.TEST) or val_ids

    targets = np.stack([cohort[sid].phenotypes.values for sid in train_ids])
    regressor = PhenotypeRegressor(encoder, projection, config.hidden_dim, TargetNormalizer.fit(targets)).to(device)
    if config.lr_encoder == 0:
        for param in regressor.backbone_parameters():
            param.requires_grad_(False)

    modality = regressor.modality
    train_loader = make_loader(CohortDataset(cohort, train_ids, [modality]), config.batch_size, True,
                               config.seed, config.num_workers)
    val_loader = None
    if val_ids:
        val_loader = make_loader(CohortDataset(cohort, val_ids, [modality]), config.batch_size, False,
                                 config.seed, config.num_workers)

    optimizer = build_finetune_optimizer(regressor, config)
    scheduler = build_scheduler(optimizer, config.epochs)
    stopper = EarlyStopping(config.patience, config.min_delta)
    curve = CurveLog(["epoch", "train_loss", "val_loss"])
    best_state = copy_state(regressor)

    for epoch in epoch_range(config.epochs, f"stage3 {modality} {config.fraction:g}", config.progress):
        regressor.train()
        total, count = 0.0, 0
        for step, batch in enumerate(train_loader):
            inputs = modality_inputs(batch, modality, device)
            y = regressor.normalizer.normalize(batch["y"].double()).float().to(device)
            loss = F.mse_loss(regressor(inputs), y)
            check_finite(loss, "stage3", epoch, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * y.shape[0]
            count += y.shape[0]
        scheduler.step()
        train_loss = total / max(count, 1)

        val_loss = _mean_loss(regressor, val_loader, device) if val_loader else train_loss
        curve.append(epoch=epoch, train_loss=train_loss, val_loss=val_loss)
        logger.debug("stage3 epoch %d: train %.5f val %.5f", epoch, train_loss, val_loss)

        if stopper.step(val_loss, epoch):
            best_state = copy_state(regressor)
        if stopper.should_stop:
            logger.info("stage3: early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    regressor.load_state_dict(best_state)
    if curve_path is not None:
        curve.to_csv(curve_path)

    predictions = predict_cohort(regressor, cohort, eval_ids, config.batch_size, config.device) if eval_ids else \
        pd.DataFrame(columns=["subject_id", "phenotype_name", "y_true", "y_pred"])
    if predictions_path is not None:
        Path(predictions_path).parent.mkdir(parents=True, exist_ok=True)
        predictions.to_csv(predictions_path, index=False)

    metadata = {
        "modality": modality,
        "fraction": config.fraction,
        "seed": config.seed,
        "n_train": len(train_ids),
        "epochs_run": len(curve.rows),
        "best_epoch": stopper.best_epoch,
        "best_val_loss": stopper.best,
        "test_split": fingerprint(sorted(eval_ids)),
    }
    logger.info("stage3 %s fraction %g: %d subjects, best val %.5f", modality, config.fraction, len(train_ids), stopper.best)
    return FinetuneResult(regressor, train_ids, curve.frame, predictions, metadata)


def predict_phenotypes(model: PhenotypeRegressor, localizer: ImageStack | np.ndarray) -> PhenotypeVector:
    """Phenotypes in physical units from one localizer stack."""
    if model.modality not in ("L", "C"):
        raise ValueError(f"model reads modality {model.modality!r}, not an image stack")
    voxels = localizer.voxels if isinstance(localizer, ImageStack) else np.asarray(localizer)
    if voxels.shape != IMAGE_SHAPE:
        raise ValueError(f"localizer must have shape {IMAGE_SHAPE}, got {voxels.shape}")
    param = next(model.parameters())
    inputs = torch.as_tensor(voxels, dtype=param.dtype, device=param.device).unsqueeze(0)
    values = model.predict(inputs)[0].cpu().numpy()
    return PhenotypeVector(values.astype(np.float64))


@dataclass
class RegressorCheckpoint:
    """Fine-tuned regressor weights with the normalizer needed to denormalize outputs."""

    name: str
    config: EncoderConfig
    projection_dim: Optional[int]
    hidden_dim: int
    normalizer: TargetNormalizer
    state_dict: dict[str, torch.Tensor]
    fingerprint: str
    metadata: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_result(cls, name: str, result: FinetuneResult, schema: Optional[TabularSchema], hidden_dim: int) -> "RegressorCheckpoint":
        regressor = result.regressor
        projection_dim = regressor.projection.linear.out_features if regressor.projection is not None else None
        return cls(
            name=name,
            config=regressor.encoder.config,
            projection_dim=projection_dim,
            hidden_dim=hidden_dim,
            normalizer=regressor.normalizer,
            state_dict={k: v.detach().cpu() for k, v in regressor.state_dict().items()},
            fingerprint=regressor.encoder.config.fingerprint(schema),
            metadata=result.metadata,
        )

    def save(self, store: CheckpointStore) -> Path:
        payload = {
            "config": asdict(self.config),
            "projection_dim": self.projection_dim,
            "hidden_dim": self.hidden_dim,
            "normalizer": self.normalizer.to_dict(),
            "state_dict": self.state_dict,
        }
        return store.save(self.name, payload, self.fingerprint, "stage3", self.metadata)

    @classmethod
    def load(cls, store: CheckpointStore, name: str, expected_fingerprint: Optional[str] = None) -> "RegressorCheckpoint":
        payload, sidecar = store.load(name, expected_fingerprint)
        return cls(
            name=name,
            config=EncoderConfig(**payload["config"]),
            projection_dim=payload["projection_dim"],
            hidden_dim=payload["hidden_dim"],
            normalizer=TargetNormalizer.from_dict(payload["normalizer"]),
            state_dict=payload["state_dict"],
            fingerprint=sidecar["fingerprint"],
            metadata=sidecar.get("metadata", {}),
        )

    def build_regressor(self, schema: Optional[TabularSchema] = None) -> PhenotypeRegressor:
        encoder = ModalityEncoder(self.config, schema)
        projection = ProjectionHead(self.config.embed_dim, self.projection_dim) if self.projection_dim else None
        regressor = PhenotypeRegressor(encoder, projection, self.hidden_dim, self.normalizer)
        regressor.load_state_dict(self.state_dict)
        return regressor.eval()
