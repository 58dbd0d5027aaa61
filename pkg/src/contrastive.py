"""Localizer-centric contrastive alignment (Stage II)."""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.checkpoints import CheckpointStore
from src.data_model import Cohort, Split, TabularSchema
from src.datasets import CohortDataset, make_loader, modality_inputs
from src.encoders import EncoderCheckpoint, EncoderConfig, ModalityEncoder
from src.errors import FingerprintMismatchError
from src.training import (
    CurveLog,
    EarlyStopping,
    TrainHparams,
    build_optimizer,
    build_scheduler,
    check_finite,
    copy_state,
    epoch_range,
)
from src.utils.reproducibility import fingerprint, resolve_device, set_seed

logger = logging.getLogger(__name__)

PROJECTION_DIM = 256
TAU_MIN, TAU_MAX = 0.01, 1.0
UNIT_NORM_ATOL = 1e-4

# Each alignment edge pairs the localizer with one partner modality.
EDGE_PARTNERS: dict[str, str] = {"LE": "E", "LT": "T"}

CURVE_COLUMNS = [
    "epoch", "total_loss", "loss_LE", "loss_LT", "tau_LE", "tau_LT",
    "pos_sim_LE", "neg_sim_LE", "pos_sim_LT", "neg_sim_LT", "val_loss",
]


class ProjectionHead(nn.Module):
    """Linear map into the shared space followed by L2 normalization."""

    def __init__(self, in_dim: int, out_dim: int = PROJECTION_DIM):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.linear(x), dim=-1)


class TemperaturePair(nn.Module):
    """Learnable pair-specific temperatures, log-parameterized and clamped to [0.01, 1.0]."""

    def __init__(self, tau_le: float = 0.1, tau_lt: float = 0.25):
        super().__init__()
        for tau in (tau_le, tau_lt):
            if not TAU_MIN <= tau <= TAU_MAX:
                raise ValueError(f"temperature {tau} outside [{TAU_MIN}, {TAU_MAX}]")
        self.log_tau_le = nn.Parameter(torch.tensor(math.log(tau_le)))
        self.log_tau_lt = nn.Parameter(torch.tensor(math.log(tau_lt)))

    @property
    def tau_le(self) -> torch.Tensor:
        return self.log_tau_le.exp().clamp(TAU_MIN, TAU_MAX)

    @property
    def tau_lt(self) -> torch.Tensor:
        return self.log_tau_lt.exp().clamp(TAU_MIN, TAU_MAX)

    def for_edge(self, edge: str) -> torch.Tensor:
        return {"LE": self.tau_le, "LT": self.tau_lt}[edge]

    @torch.no_grad()
    def clamp_(self) -> None:
        """Keep the stored parameters inside the allowed range."""
        for param in (self.log_tau_le, self.log_tau_lt):
            param.clamp_(math.log(TAU_MIN), math.log(TAU_MAX))


def _check_pair(z_a: torch.Tensor, z_b: torch.Tensor) -> None:
    if z_a.ndim != 2 or z_a.shape != z_b.shape:
        raise ValueError(f"embedding batches must have equal [N, d] shapes, got {tuple(z_a.shape)} and {tuple(z_b.shape)}")
    if z_a.shape[0] < 2:
        raise ValueError("InfoNCE needs N >= 2 (no negatives)")
    for z in (z_a, z_b):
        norms = z.detach().norm(dim=-1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=UNIT_NORM_ATOL):
            raise ValueError("embedding rows must be unit-normalized")


def info_nce_directional(z_a: torch.Tensor, z_b: torch.Tensor, tau: float | torch.Tensor) -> torch.Tensor:
    """
    One-directional InfoNCE: rows of ``z_a`` are anchors, rows of ``z_b`` candidates.

    The matched candidate for anchor i is row i of ``z_b``; every other row is
    an in-batch negative.
    """
    _check_pair(z_a, z_b)
    logits = (z_a @ z_b.T) / tau
    targets = torch.arange(z_a.shape[0], device=z_a.device)
    return F.cross_entropy(logits, targets)


def bidirectional_loss(z_l: torch.Tensor, z_m: torch.Tensor, tau: float | torch.Tensor) -> torch.Tensor:
    return 0.5 * (info_nce_directional(z_l, z_m, tau) + info_nce_directional(z_m, z_l, tau))


def total_loss(
    z_l: torch.Tensor,
    z_e: torch.Tensor,
    z_t: torch.Tensor,
    temps: TemperaturePair | tuple[float | torch.Tensor, float | torch.Tensor],
) -> torch.Tensor:
    """
    Localizer-centric objective: mean of the L-E and L-T bidirectional losses.

    There is no E-T term; E and T interact only through the localizer.
    """
    if not len(z_l) == len(z_e) == len(z_t):
        raise ValueError(f"batch misalignment: {len(z_l)}, {len(z_e)}, {len(z_t)} rows")
    tau_le, tau_lt = (temps.tau_le, temps.tau_lt) if isinstance(temps, TemperaturePair) else temps
    return 0.5 * (bidirectional_loss(z_l, z_e, tau_le) + bidirectional_loss(z_l, z_t, tau_lt))


def alignment_loss(
    embeddings: Mapping[str, torch.Tensor],
    edges: Sequence[str],
    temps: TemperaturePair,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """
    Mean bidirectional loss over the active edges.

    With both edges this equals ``total_loss``; a bimodal variant has a single
    edge and its loss is that edge's term.
    """
    if not edges:
        raise ValueError("no alignment edges")
    terms = {
        edge: bidirectional_loss(embeddings["L"], embeddings[EDGE_PARTNERS[edge]], temps.for_edge(edge))
        for edge in edges
    }
    return torch.stack(list(terms.values())).mean(), terms


@torch.no_grad()
def similarity_statistics(z_l: torch.Tensor, z_m: torch.Tensor) -> tuple[float, float]:
    """Mean cosine similarity of matched pairs and of all mismatched pairs."""
    if len(z_l) < 2 or z_l.shape != z_m.shape:
        raise ValueError("similarity statistics need two aligned batches with N >= 2")
    sims = z_l @ z_m.T
    n = sims.shape[0]
    positive = sims.diagonal().mean()
    negative = (sims.sum() - sims.diagonal().sum()) / (n * (n - 1))
    return float(positive), float(negative)


@dataclass(frozen=True)
class AlignmentSettings:
    projection_dim: int = PROJECTION_DIM
    tau_le: float = 0.1
    tau_lt: float = 0.25
    freeze_encoders: bool = False


class ModalityAligner(nn.Module):
    """Localizer encoder plus partner encoders, projection heads and temperatures."""

    def __init__(
        self,
        encoders: Mapping[str, ModalityEncoder],
        edges: Sequence[str],
        settings: AlignmentSettings = AlignmentSettings(),
    ):
        super().__init__()
        unknown = set(edges) - set(EDGE_PARTNERS)
        if unknown or not edges:
            raise ValueError(f"alignment edges must be a non-empty subset of {sorted(EDGE_PARTNERS)}, got {list(edges)}")
        self.edges = tuple(e for e in EDGE_PARTNERS if e in edges)
        self.modalities = ("L",) + tuple(EDGE_PARTNERS[e] for e in self.edges)
        missing = set(self.modalities) - set(encoders)
        if missing:
            raise ValueError(f"missing encoders for {sorted(missing)}")

        self.settings = settings
        self.encoders = nn.ModuleDict({m: encoders[m] for m in self.modalities})
        self.projections = nn.ModuleDict({
            m: ProjectionHead(encoders[m].config.embed_dim, settings.projection_dim) for m in self.modalities
        })
        self.temperatures = TemperaturePair(settings.tau_le, settings.tau_lt)

    @classmethod
    def from_stage1(
        cls,
        checkpoints: Mapping[str, EncoderCheckpoint],
        edges: Sequence[str],
        schema: Optional[TabularSchema],
        settings: AlignmentSettings = AlignmentSettings(),
        seed: int = 0,
    ) -> "ModalityAligner":
        """Stage-I encoders with projection heads initialized from ``seed``."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            encoders = {m: ckpt.build_encoder(schema) for m, ckpt in checkpoints.items()}
            return cls(encoders, edges, settings)

    def embed(self, modality: str, inputs: Any) -> torch.Tensor:
        """Unit-norm shared-space embedding [B, projection_dim] of one modality."""
        return self.projections[modality](self.encoders[modality](inputs).cls)

    def forward(self, inputs: Mapping[str, Any]) -> dict[str, torch.Tensor]:
        return {m: self.embed(m, inputs[m]) for m in self.modalities}

    def loss(self, embeddings: Mapping[str, torch.Tensor]) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        return alignment_loss(embeddings, self.edges, self.temperatures)


def alignment_fingerprint(
    configs: Mapping[str, EncoderConfig],
    edges: Sequence[str],
    settings: AlignmentSettings,
    schema: Optional[TabularSchema],
) -> str:
    return fingerprint({
        "encoders": {m: configs[m].fingerprint(schema) for m in sorted(configs)},
        "edges": list(edges),
        "projection_dim": settings.projection_dim,
    })


@dataclass
class AlignmentCheckpoint:
    """Aligned encoders, projection heads and temperatures of one variant."""

    variant: str
    configs: dict[str, EncoderConfig]
    edges: tuple[str, ...]
    settings: AlignmentSettings
    state_dict: dict[str, torch.Tensor]
    fingerprint: str
    stage: str = "stage2"
    metadata: dict[str, Any] = field(default_factory=dict)

    @staticmethod
    def name_for(variant: str) -> str:
        return f"stage2_{variant}"

    @property
    def name(self) -> str:
        return self.name_for(self.variant)

    def save(self, store: CheckpointStore) -> Path:
        payload = {
            "variant": self.variant,
            "configs": {m: asdict(c) for m, c in self.configs.items()},
            "edges": list(self.edges),
            "settings": asdict(self.settings),
            "state_dict": self.state_dict,
        }
        return store.save(self.name, payload, self.fingerprint, self.stage, self.metadata)

    @classmethod
    def load(cls, store: CheckpointStore, variant: str, expected_fingerprint: Optional[str] = None) -> "AlignmentCheckpoint":
        payload, sidecar = store.load(cls.name_for(variant), expected_fingerprint)
        return cls(
            variant=payload["variant"],
            configs={m: EncoderConfig(**c) for m, c in payload["configs"].items()},
            edges=tuple(payload["edges"]),
            settings=AlignmentSettings(**payload["settings"]),
            state_dict=payload["state_dict"],
            fingerprint=sidecar["fingerprint"],
            stage=sidecar["stage"],
            metadata=sidecar.get("metadata", {}),
        )

    def build_aligner(self, schema: Optional[TabularSchema] = None) -> ModalityAligner:
        encoders = {m: ModalityEncoder(config, schema) for m, config in self.configs.items()}
        aligner = ModalityAligner(encoders, self.edges, self.settings)
        aligner.load_state_dict(self.state_dict)
        return aligner

    def localizer_encoder(self) -> ModalityEncoder:
        encoder = ModalityEncoder(self.configs["L"])
        prefix = "encoders.L."
        encoder.load_state_dict({k[len(prefix):]: v for k, v in self.state_dict.items() if k.startswith(prefix)})
        return encoder


def _verify_stage1(checkpoints: Mapping[str, EncoderCheckpoint], schema: Optional[TabularSchema]) -> None:
    for modality, checkpoint in checkpoints.items():
        expected = checkpoint.config.fingerprint(schema)
        if checkpoint.fingerprint != expected:
            raise FingerprintMismatchError(checkpoint.name, expected, checkpoint.fingerprint)


@torch.no_grad()
def _collect_embeddings(aligner: ModalityAligner, loader, device: torch.device) -> dict[str, torch.Tensor]:
    aligner.eval()
    chunks: dict[str, list[torch.Tensor]] = {m: [] for m in aligner.modalities}
    for batch in loader:
        embeddings = aligner({m: modality_inputs(batch, m, device) for m in aligner.modalities})
        for m, z in embeddings.items():
            chunks[m].append(z)
    return {m: torch.cat(parts) for m, parts in chunks.items()}


@torch.no_grad()
def _batched_loss(aligner: ModalityAligner, embeddings: Mapping[str, torch.Tensor], batch_size: int) -> float:
    """Alignment loss over consecutive chunks of precomputed embeddings."""
    n = len(embeddings["L"])
    values, weights = [], []
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        if stop - start < 2:
            continue
        loss, _ = aligner.loss({m: z[start:stop] for m, z in embeddings.items()})
        values.append(loss.item())
        weights.append(stop - start)
    return float(np.average(values, weights=weights)) if values else float("nan")


def align_stage2(
    cohort: Cohort,
    checkpoints: Mapping[str, EncoderCheckpoint],
    hparams: TrainHparams,
    edges: Sequence[str] = ("LE", "LT"),
    settings: AlignmentSettings = AlignmentSettings(),
    schema: Optional[TabularSchema] = None,
    variant: str = "C-TRIP",
    curve_path: Optional[Path] = None,
) -> AlignmentCheckpoint:
    """
    Jointly fine-tune encoders, projection heads and temperatures on the alignment loss.

    Batches carry full (unmasked) sequences. Validation loss drives early
    stopping; per-epoch similarity statistics are computed on the validation
    split.

    Args:
        cohort: Split cohort with L and the partner modalities loaded
        checkpoints: Stage-I checkpoints keyed by modality
        hparams: Optimization settings
        edges: Active alignment edges ("LE", "LT")
        settings: Projection size, temperature inits, encoder freezing
        schema: Tabular schema the T checkpoint was trained under
        variant: Variant name stored in the checkpoint
        curve_path: Where to write the per-epoch curve

    Returns:
        AlignmentCheckpoint with best-validation weights

    Raises:
        FingerprintMismatchError: If a Stage-I checkpoint does not match its config/schema
        NumericalDivergenceError: On a non-finite loss
    """
    schema = schema if schema is not None else cohort.schema
    _verify_stage1(checkpoints, schema)
    train_ids = cohort.split_ids(Split.TRAIN)
    val_ids = cohort.split_ids(Split.VAL)
    if len(train_ids) < 2:
        raise ValueError("alignment needs at least two training subjects")

    set_seed(hparams.seed)
    device = resolve_device(hparams.device)
    aligner = ModalityAligner.from_stage1(checkpoints, edges, schema, settings, hparams.seed).to(device)
    if settings.freeze_encoders:
        for param in aligner.encoders.parameters():
            param.requires_grad_(False)

    modalities = aligner.modalities
    train_loader = make_loader(CohortDataset(cohort, train_ids, modalities), hparams.batch_size, True,
                               hparams.seed, hparams.num_workers)
    monitor_ids = val_ids if len(val_ids) >= 2 else train_ids
    monitor_loader = make_loader(CohortDataset(cohort, monitor_ids, modalities), hparams.batch_size, False,
                                 hparams.seed, hparams.num_workers)

    temperature_params = list(aligner.temperatures.parameters())
    other_params = [p for n, p in aligner.named_parameters() if not n.startswith("temperatures.")]
    optimizer = build_optimizer([
        {"params": other_params, "lr": hparams.lr},
        {"params": temperature_params, "lr": hparams.lr, "weight_decay": 0.0},
    ], hparams.weight_decay)
    scheduler = build_scheduler(optimizer, hparams.epochs)
    stopper = EarlyStopping(hparams.patience, hparams.min_delta)
    curve = CurveLog(CURVE_COLUMNS)

    initial = _collect_embeddings(aligner, monitor_loader, device)
    initial_loss = _batched_loss(aligner, initial, hparams.batch_size)
    initial_stats = {e: similarity_statistics(initial["L"], initial[EDGE_PARTNERS[e]]) for e in aligner.edges}
    best_state = copy_state(aligner)

    for epoch in epoch_range(hparams.epochs, "stage2", hparams.progress):
        aligner.train()
        totals = {"total": 0.0, **{e: 0.0 for e in aligner.edges}}
        count = 0
        for step, batch in enumerate(train_loader):
            size = batch["y"].shape[0]
            if size < 2:
                continue
            embeddings = aligner({m: modality_inputs(batch, m, device) for m in modalities})
            loss, terms = aligner.loss(embeddings)
            check_finite(loss, "stage2", epoch, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            aligner.temperatures.clamp_()
            totals["total"] += loss.item() * size
            for edge, term in terms.items():
                totals[edge] += term.item() * size
            count += size
        scheduler.step()

        monitored = _collect_embeddings(aligner, monitor_loader, device)
        val_loss = _batched_loss(aligner, monitored, hparams.batch_size)
        row: dict[str, Any] = {
            "epoch": epoch,
            "total_loss": totals["total"] / max(count, 1),
            "tau_LE": float(aligner.temperatures.tau_le),
            "tau_LT": float(aligner.temperatures.tau_lt),
            "val_loss": val_loss,
        }
        for edge in aligner.edges:
            pos, neg = similarity_statistics(monitored["L"], monitored[EDGE_PARTNERS[edge]])
            row.update({f"loss_{edge}": totals[edge] / max(count, 1), f"pos_sim_{edge}": pos, f"neg_sim_{edge}": neg})
        curve.append(**row)
        logger.info("stage2 epoch %d: train %.5f val %.5f tau_LE %.4f tau_LT %.4f",
                    epoch, row["total_loss"], val_loss, row["tau_LE"], row["tau_LT"])

        if stopper.step(val_loss, epoch):
            best_state = copy_state(aligner)
        if stopper.should_stop:
            logger.info("stage2: early stop at epoch %d (best %d)", epoch, stopper.best_epoch)
            break

    aligner.load_state_dict(best_state)
    if curve_path is not None:
        curve.to_csv(curve_path)

    final = _collect_embeddings(aligner, monitor_loader, device)
    final_stats = {e: similarity_statistics(final["L"], final[EDGE_PARTNERS[e]]) for e in aligner.edges}
    configs = {m: checkpoints[m].config for m in modalities}
    metadata = {
        "variant": variant,
        "seed": hparams.seed,
        "epochs_run": len(curve.rows),
        "best_epoch": stopper.best_epoch,
        "initial_val_loss": initial_loss,
        "best_val_loss": stopper.best,
        "initial_similarity": {e: list(s) for e, s in initial_stats.items()},
        "final_similarity": {e: list(s) for e, s in final_stats.items()},
        "split": cohort.split_fingerprint(Split.VAL),
    }
    return AlignmentCheckpoint(
        variant=variant,
        configs=configs,
        edges=aligner.edges,
        settings=settings,
        state_dict={k: v.detach().cpu() for k, v in aligner.state_dict().items()},
        fingerprint=alignment_fingerprint(configs, aligner.edges, settings, schema),
        metadata=metadata,
    )


@dataclass(frozen=True)
class AlignedEmbedding:
    """Shared-space embeddings of one subject; absent modalities are None and listed in ``missing``."""

    subject_id: str
    z_L: Optional[np.ndarray] = None
    z_E: Optional[np.ndarray] = None
    z_T: Optional[np.ndarray] = None
    missing: tuple[str, ...] = ()

    def get(self, modality: str) -> Optional[np.ndarray]:
        return {"L": self.z_L, "E": self.z_E, "T": self.z_T}[modality]


@torch.no_grad()
def embed_batch(
    aligner: ModalityAligner,
    cohort: Cohort,
    subject_ids: Optional[Sequence[str]] = None,
    batch_size: int = 64,
    device: Optional[str] = None,
) -> list[AlignedEmbedding]:
    """
    Deterministic shared-space embeddings for each subject.

    A modality that the aligner has no encoder for, or that was not loaded for
    a subject, is left absent and flagged in ``missing``.
    """
    ids = list(subject_ids) if subject_ids is not None else cohort.subject_ids
    torch_device = resolve_device(device)
    aligner = aligner.to(torch_device).eval()

    vectors: dict[str, dict[str, np.ndarray]] = {m: {} for m in ("L", "E", "T")}
    for modality in aligner.modalities:
        present = [sid for sid in ids if cohort[sid].modality(modality) is not None]
        if not present:
            continue
        loader = make_loader(CohortDataset(cohort, present, [modality]), batch_size, False)
        offset = 0
        for batch in loader:
            z = aligner.embed(modality, modality_inputs(batch, modality, torch_device)).cpu().numpy()
            for row in z:
                vectors[modality][present[offset]] = row
                offset += 1

    results = []
    for sid in ids:
        found = {m: vectors[m].get(sid) for m in ("L", "E", "T")}
        missing = tuple(m for m in ("L", "E", "T") if found[m] is None)
        if missing:
            logger.debug("subject %s has no embedding for %s", sid, ",".join(missing))
        results.append(AlignedEmbedding(sid, found["L"], found["E"], found["T"], missing))
    return results
