"""Per-modality transformer encoders, masked-reconstruction decoders and Stage-I pretraining."""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from src.checkpoints import CheckpointStore
from src.data_model import Cohort, Split, TabularSchema
from src.datasets import CohortDataset, TabularInputs, make_loader, modality_inputs
from src.patching import MaskPlan, TokenSequence, TabularTokenizer, patch_ecg, patch_images, sample_batch_masks
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

IMAGE_MODALITIES = ("L", "C")
ENCODER_MODALITIES = ("L", "E", "T", "C")

_DEFAULT_SIZES = {
    "L": dict(embed_dim=768, depth=12, num_heads=12, decoder_dim=384, decoder_depth=2),
    "C": dict(embed_dim=768, depth=12, num_heads=12, decoder_dim=384, decoder_depth=2),
    "E": dict(embed_dim=384, depth=6, num_heads=6, decoder_dim=192, decoder_depth=2),
    "T": dict(embed_dim=384, depth=6, num_heads=6, decoder_dim=192, decoder_depth=2),
}


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of one modality's encoder and its reconstruction decoder."""

    modality: str
    embed_dim: int
    depth: int
    num_heads: int
    decoder_dim: int
    decoder_depth: int
    decoder_num_heads: Optional[int] = None
    mask_ratio: float = 0.75
    mlp_ratio: float = 4.0
    patch_size: int = 16
    patch_len: int = 100
    image_size: int = 224
    image_channels: int = 3
    ecg_leads: int = 12
    ecg_timesteps: int = 5000

    def __post_init__(self):
        if self.modality not in ENCODER_MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.embed_dim % self.num_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not self.decoder_depth < self.depth:
            raise ValueError("decoder_depth must be smaller than depth")
        if self.decoder_dim % self.resolved_decoder_heads != 0:
            raise ValueError(f"decoder_dim {self.decoder_dim} not divisible by {self.resolved_decoder_heads} heads")
        multiple = 4 if self.modality in IMAGE_MODALITIES else 2
        for dim in (self.embed_dim, self.decoder_dim):
            if dim % multiple != 0:
                raise ValueError(f"dimension {dim} must be divisible by {multiple} for sinusoidal positions")
        if self.modality in IMAGE_MODALITIES and self.image_size % self.patch_size != 0:
            raise ValueError(f"{self.image_size} not divisible by {self.patch_size}")
        if self.modality == "E" and self.ecg_timesteps % self.patch_len != 0:
            raise ValueError(f"{self.ecg_timesteps} not divisible by {self.patch_len}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in (0, 1)")

    @classmethod
    def default(cls, modality: str, **overrides: Any) -> "EncoderConfig":
        params = dict(_DEFAULT_SIZES[modality])
        params.update(overrides)
        return cls(modality=modality, **params)

    @property
    def resolved_decoder_heads(self) -> int:
        if self.decoder_num_heads:
            return self.decoder_num_heads
        heads = max(1, self.num_heads // 2)
        while self.decoder_dim % heads:
            heads -= 1
        return heads

    @property
    def token_dim(self) -> Optional[int]:
        """Raw token width; None for tabular, whose tokenizer embeds directly."""
        if self.modality in IMAGE_MODALITIES:
            return self.patch_size * self.patch_size * self.image_channels
        if self.modality == "E":
            return self.patch_len
        return None

    @property
    def grid(self) -> Optional[tuple[int, int]]:
        if self.modality in IMAGE_MODALITIES:
            side = self.image_size // self.patch_size
            return side, side
        return None

    def num_tokens(self, schema: Optional[TabularSchema] = None) -> int:
        if self.modality in IMAGE_MODALITIES:
            side = self.image_size // self.patch_size
            return side * side
        if self.modality == "E":
            return self.ecg_leads * (self.ecg_timesteps // self.patch_len)
        if schema is None:
            raise ValueError("tabular encoders need a schema")
        return schema.n_tokens

    def fingerprint(self, schema: Optional[TabularSchema] = None) -> str:
        return fingerprint({
            "config": asdict(self),
            "schema": schema.fingerprint() if self.modality == "T" and schema is not None else None,
        })


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = np.arange(dim // 2, dtype=np.float64) / (dim / 2.0)
    omega = 1.0 / 10000 ** omega
    angles = np.einsum("m,d->md", positions.reshape(-1).astype(np.float64), omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def sincos_table(num_positions: int, dim: int, grid: Optional[tuple[int, int]] = None) -> torch.Tensor:
    """
    Fixed sinusoidal position table [num_positions, dim].

    With a grid, half the channels encode the patch row and half the column.
    """
    index = np.arange(num_positions)
    if grid is None:
        table = _sincos_1d(dim, index)
    else:
        rows, cols = index // grid[1], index % grid[1]
        table = np.concatenate([_sincos_1d(dim // 2, rows), _sincos_1d(dim // 2, cols)], axis=1)
    return torch.from_numpy(table.astype(np.float32))


class Attention(nn.Module):
    """Multi-head self-attention that can return its softmax weights."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, return_attention: bool = False) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        batch, length, dim = x.shape
        qkv = self.qkv(x).reshape(batch, length, 3, self.num_heads, dim // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(batch, length, dim)
        return self.proj(out), attn if return_attention else None


class Block(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor, return_attention: bool = False) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        attended, weights = self.attn(self.norm1(x), return_attention)
        x = x + attended
        x = x + self.mlp(self.norm2(x))
        return x, weights


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.xavier_uniform_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


class EncoderOutput(NamedTuple):
    latent: torch.Tensor  # [B, 1 + n_visible, embed_dim]
    cls: torch.Tensor  # [B, embed_dim]
    attention: Optional[torch.Tensor]  # final block [B, heads, 1 + n, 1 + n]


class ModalityEncoder(nn.Module):
    """
    Transformer encoder for one modality.

    A learned [CLS] token is prepended; fixed sinusoidal positions are added
    by each token's original position, so any visible subset can be encoded.
    """

    def __init__(self, config: EncoderConfig, schema: Optional[TabularSchema] = None):
        super().__init__()
        self.config = config
        self.modality = config.modality
        self.num_tokens = config.num_tokens(schema)
        self.grid = config.grid
        dim = config.embed_dim

        if config.modality == "T":
            self.tokenizer = TabularTokenizer.from_schema(schema, dim)
        else:
            self.patch_embed = nn.Linear(config.token_dim, dim)

        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.register_buffer("pos_table", sincos_table(self.num_tokens, dim, self.grid), persistent=False)
        self.blocks = nn.ModuleList(Block(dim, config.num_heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(dim)

        self.apply(_init_weights)
        nn.init.normal_(self.cls_token, std=0.02)
        if config.modality == "T":
            self.tokenizer.reset_parameters()

    def tokenize(self, inputs: torch.Tensor) -> torch.Tensor:
        """Raw patch tokens for image or ECG inputs."""
        if self.modality in IMAGE_MODALITIES:
            return patch_images(inputs, self.config.patch_size)
        if self.modality == "E":
            return patch_ecg(inputs, self.config.patch_len)
        raise ValueError("tabular inputs are embedded directly; use embed()")

    def embed_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-1] != self.config.token_dim:
            raise ValueError(f"token_dim {tokens.shape[-1]} does not match the {self.modality} input projection ({self.config.token_dim})")
        return self.patch_embed(tokens)

    def embed(self, inputs: torch.Tensor | TabularInputs) -> torch.Tensor:
        """Embedded tokens [B, num_tokens, embed_dim] for a batch of raw inputs."""
        if self.modality == "T":
            dtype = self.tokenizer.numeric_weight.dtype
            return self.tokenizer(inputs.numeric.to(dtype), inputs.categorical)
        return self.embed_tokens(self.tokenize(inputs))

    def encode(
        self,
        tokens: torch.Tensor,
        ids_keep: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ) -> EncoderOutput:
        """
        Encode embedded tokens, optionally only the positions in ``ids_keep``.

        Args:
            tokens: [B, num_tokens, embed_dim] embedded tokens
            ids_keep: [B, n_visible] positions to keep, in any order
            return_attention: Also return the final block's attention weights

        Returns:
            EncoderOutput with all output tokens and the [CLS] output
        """
        batch, length, dim = tokens.shape
        if length != self.num_tokens or dim != self.config.embed_dim:
            raise ValueError(f"expected [B, {self.num_tokens}, {self.config.embed_dim}] tokens, got {tuple(tokens.shape)}")

        if ids_keep is None:
            positions = torch.arange(length, device=tokens.device).expand(batch, length)
        else:
            ids_keep = ids_keep.reshape(1, -1) if ids_keep.ndim == 1 else ids_keep
            positions = ids_keep.expand(batch, -1) if ids_keep.shape[0] == 1 else ids_keep
            tokens = torch.gather(tokens, 1, positions.unsqueeze(-1).expand(-1, -1, dim))

        x = tokens + self.pos_table[positions]
        x = torch.cat([self.cls_token.expand(batch, -1, -1), x], dim=1)

        attention = None
        for i, block in enumerate(self.blocks):
            x, weights = block(x, return_attention and i == len(self.blocks) - 1)
            if weights is not None:
                attention = weights
        x = self.norm(x)
        return EncoderOutput(x, x[:, 0], attention)

    def forward(
        self,
        inputs: torch.Tensor | TabularInputs,
        ids_keep: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ) -> EncoderOutput:
        return self.encode(self.embed(inputs), ids_keep, return_attention)


class TabularPrediction(NamedTuple):
    numeric: torch.Tensor  # [B, n_numeric]
    logits: tuple[torch.Tensor, ...]  # one [B, cardinality] per categorical feature


class MaskedDecoder(nn.Module):
    """
    Lightweight decoder reconstructing masked tokens from visible latents.

    A shared mask token fills the masked positions; for tabular inputs the full
    sequence is reconstructed (numeric values plus per-feature logits).
    """

    def __init__(self, config: EncoderConfig, num_tokens: int, schema: Optional[TabularSchema] = None):
        super().__init__()
        self.config = config
        self.modality = config.modality
        self.num_tokens = num_tokens
        dim = config.decoder_dim

        self.embed = nn.Linear(config.embed_dim, dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.register_buffer("pos_table", sincos_table(num_tokens, dim, config.grid), persistent=False)
        self.blocks = nn.ModuleList(
            Block(dim, config.resolved_decoder_heads, config.mlp_ratio) for _ in range(config.decoder_depth)
        )
        self.norm = nn.LayerNorm(dim)

        if config.modality == "T":
            self.n_numeric = schema.n_numeric
            self.numeric_head = nn.Linear(dim, 1)
            self.categorical_heads = nn.ModuleList(nn.Linear(dim, c) for c in schema.cardinalities)
        else:
            self.pred = nn.Linear(dim, config.token_dim)

        self.apply(_init_weights)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(self, latent: torch.Tensor, mask: MaskPlan) -> torch.Tensor | TabularPrediction:
        mask = mask.batched()
        batch = latent.shape[0]
        if latent.shape[1] - 1 != mask.num_visible or mask.num_tokens != self.num_tokens:
            raise ValueError(
                f"inconsistent mask: {latent.shape[1] - 1} visible latents vs plan with "
                f"{mask.num_visible} visible of {mask.num_tokens} tokens (decoder expects {self.num_tokens})"
            )
        visible_idx = mask.visible_idx.expand(batch, -1)
        masked_idx = mask.masked_idx.expand(batch, -1)

        x = self.embed(latent)
        cls, visible = x[:, :1], x[:, 1:]
        dim = x.shape[-1]
        filler = self.mask_token.to(x.dtype).expand(batch, mask.num_masked, -1)
        restore = torch.argsort(torch.cat([visible_idx, masked_idx], dim=1), dim=1)
        full = torch.gather(torch.cat([visible, filler], dim=1), 1, restore.unsqueeze(-1).expand(-1, -1, dim))
        x = torch.cat([cls, full + self.pos_table], dim=1)

        for block in self.blocks:
            x, _ = block(x)
        x = self.norm(x)[:, 1:]

        if self.modality == "T":
            numeric = self.numeric_head(x[:, : self.n_numeric]).squeeze(-1)
            logits = tuple(head(x[:, self.n_numeric + j]) for j, head in enumerate(self.categorical_heads))
            return TabularPrediction(numeric, logits)

        predictions = self.pred(x)
        return torch.gather(predictions, 1, masked_idx.unsqueeze(-1).expand(-1, -1, predictions.shape[-1]))


def reconstruct(decoder: MaskedDecoder, latent: torch.Tensor, mask: MaskPlan) -> torch.Tensor | TabularPrediction:
    """Predictions at the masked positions (all positions for tabular)."""
    return decoder(latent, mask)


def mae_loss(
    modality: str,
    predictions: torch.Tensor | TabularPrediction,
    targets: torch.Tensor | TabularInputs,
    mask: Optional[MaskPlan] = None,
) -> torch.Tensor:
    """
    Masked-reconstruction loss.

    Images and ECG: mean squared error over masked tokens only; ``targets`` are
    the full raw token tensor and are gathered at ``mask.masked_idx``.
    Tabular: MSE over numeric features plus the mean cross-entropy over
    categorical features, with equal weight, over the full sequence.
    """
    if modality == "T":
        terms = []
        if predictions.numeric.numel():
            terms.append(F.mse_loss(predictions.numeric, targets.numeric.to(predictions.numeric.dtype)))
        if predictions.logits:
            ce = [F.cross_entropy(logits, targets.categorical[:, j]) for j, logits in enumerate(predictions.logits)]
            terms.append(torch.stack(ce).mean())
        return torch.stack(terms).sum()

    if mask is None:
        raise ValueError("image and ECG reconstruction losses need the mask plan")
    if targets.ndim == 2:
        targets = targets.unsqueeze(0)
        predictions = predictions.unsqueeze(0) if predictions.ndim == 2 else predictions
    mask = mask.batched()
    masked_idx = mask.masked_idx.expand(targets.shape[0], -1)
    masked_targets = torch.gather(targets, 1, masked_idx.unsqueeze(-1).expand(-1, -1, targets.shape[-1]))
    if predictions.shape != masked_targets.shape:
        raise ValueError(f"prediction shape {tuple(predictions.shape)} does not match masked targets {tuple(masked_targets.shape)}")
    return F.mse_loss(predictions, masked_targets.to(predictions.dtype))


class MaskedAutoencoder(nn.Module):
    """Encoder plus decoder for Stage-I masked data modeling."""

    def __init__(self, config: EncoderConfig, schema: Optional[TabularSchema] = None):
        super().__init__()
        self.config = config
        self.encoder = ModalityEncoder(config, schema)
        self.decoder = MaskedDecoder(config, self.encoder.num_tokens, schema)

    @property
    def num_tokens(self) -> int:
        return self.encoder.num_tokens

    def forward(self, inputs: torch.Tensor | TabularInputs, mask: MaskPlan) -> tuple[torch.Tensor, Any]:
        if self.config.modality == "T":
            tokens, targets = self.encoder.embed(inputs), inputs
        else:
            targets = self.encoder.tokenize(inputs)
            tokens = self.encoder.embed_tokens(targets)
        mask = mask.batched()
        latent = self.encoder.encode(tokens, mask.visible_idx).latent
        predictions = reconstruct(self.decoder, latent, mask)
        return mae_loss(self.config.modality, predictions, targets, mask), predictions


def encode(
    encoder: ModalityEncoder,
    seq: TokenSequence,
    mask: Optional[MaskPlan] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    Encode one token sequence.

    Image/ECG sequences carry raw patch tokens; tabular sequences carry
    tokenizer embeddings. With ``mask`` only the visible positions are encoded.

    Returns:
        (latent tokens [n_visible + 1, embed_dim], cls embedding [embed_dim])
    """
    if seq.num_tokens != encoder.num_tokens:
        raise ValueError(f"expected {encoder.num_tokens} tokens, got {seq.num_tokens}")
    tokens = seq.tokens if encoder.modality == "T" else encoder.embed_tokens(seq.tokens)
    if tokens.shape[-1] != encoder.config.embed_dim:
        raise ValueError(f"token_dim {tokens.shape[-1]} does not match embed_dim {encoder.config.embed_dim}")
    ids_keep = mask.visible_idx.reshape(1, -1) if mask is not None else None
    output = encoder.encode(tokens.unsqueeze(0), ids_keep)
    return output.latent[0], output.cls[0]


@dataclass
class EncoderCheckpoint:
    """Stage-I weights for one modality with the fingerprint they were trained under."""

    config: EncoderConfig
    state_dict: dict[str, torch.Tensor]
    fingerprint: str
    stage: str = "stage1"
    metadata: dict[str, Any] = field(default_factory=dict)

    @staticmethod
    def name_for(modality: str) -> str:
        return f"stage1_{modality}"

    @property
    def name(self) -> str:
        return self.name_for(self.config.modality)

    def save(self, store: CheckpointStore) -> Path:
        payload = {"config": asdict(self.config), "state_dict": self.state_dict}
        return store.save(self.name, payload, self.fingerprint, self.stage, self.metadata)

    @classmethod
    def load(cls, store: CheckpointStore, config: EncoderConfig, schema: Optional[TabularSchema] = None) -> "EncoderCheckpoint":
        """Load and refuse weights trained under a different config or schema."""
        payload, sidecar = store.load(cls.name_for(config.modality), config.fingerprint(schema))
        return cls(
            config=EncoderConfig(**payload["config"]),
            state_dict=payload["state_dict"],
            fingerprint=sidecar["fingerprint"],
            stage=sidecar["stage"],
            metadata=sidecar.get("metadata", {}),
        )

    def build_encoder(self, schema: Optional[TabularSchema] = None) -> ModalityEncoder:
        encoder = ModalityEncoder(self.config, schema)
        prefix = "encoder."
        encoder.load_state_dict({k[len(prefix):]: v for k, v in self.state_dict.items() if k.startswith(prefix)})
        return encoder


@torch.no_grad()
def reconstruction_loss(
    model: MaskedAutoencoder,
    loader: torch.utils.data.DataLoader,
    mask_seed: int,
    device: torch.device,
) -> float:
    """Mean reconstruction loss over a loader with a reproducible mask stream."""
    model.eval()
    generator = torch.Generator().manual_seed(mask_seed)
    total, count = 0.0, 0
    for batch in loader:
        inputs = modality_inputs(batch, model.config.modality, device)
        size = batch["y"].shape[0]
        mask = sample_batch_masks(size, model.num_tokens, model.config.mask_ratio, generator, device)
        loss, _ = model(inputs, mask)
        total += loss.item() * size
        count += size
    return total / max(count, 1)


def pretrain_stage1(
    cohort: Cohort,
    config: EncoderConfig,
    hparams: TrainHparams,
    schema: Optional[TabularSchema] = None,
    curve_path: Optional[Path] = None,
) -> EncoderCheckpoint:
    """
    Masked-reconstruction pretraining of one modality's encoder and decoder.

    AdamW with cosine-annealed lr, early stopping on validation reconstruction
    loss (best weights restored); random crop/scale/rotation augment localizer
    training images only.

    Args:
        cohort: Cohort with train/val split labels and the modality loaded
        config: Encoder architecture
        hparams: Optimization settings
        schema: Tabular schema (required for T)
        curve_path: Where to write ``epoch, train_loss, val_loss``

    Returns:
        EncoderCheckpoint with best-validation weights

    Raises:
        NumericalDivergenceError: On a non-finite loss
    """
    modality = config.modality
    if modality == "T" and schema is None:
        schema = cohort.schema
    train_ids = cohort.split_ids(Split.TRAIN)
    val_ids = cohort.split_ids(Split.VAL)
    if not train_ids:
        raise ValueError("cohort has no training split; run split_cohort first")

    set_seed(hparams.seed)
    device = resolve_device(hparams.device)
    train_set = CohortDataset(cohort, train_ids, [modality], augment_localizer=modality == "L")
    train_loader = make_loader(train_set, hparams.batch_size, True, hparams.seed, hparams.num_workers)
    val_loader = None
    if val_ids:
        val_set = CohortDataset(cohort, val_ids, [modality])
        val_loader = make_loader(val_set, hparams.batch_size, False, hparams.seed, hparams.num_workers)

    model = MaskedAutoencoder(config, schema).to(device)
    optimizer = build_optimizer([{"params": list(model.parameters()), "lr": hparams.lr}], hparams.weight_decay)
    scheduler = build_scheduler(optimizer, hparams.epochs)
    stopper = EarlyStopping(hparams.patience, hparams.min_delta)
    curve = CurveLog(["epoch", "train_loss", "val_loss"])
    mask_generator = torch.Generator().manual_seed(hparams.seed)

    initial_loss = reconstruction_loss(model, train_loader, hparams.seed + 1, device)
    best_state = copy_state(model)
    train_loss = initial_loss

    for epoch in epoch_range(hparams.epochs, f"stage1 {modality}", hparams.progress):
        model.train()
        total, count = 0.0, 0
        for step, batch in enumerate(train_loader):
            inputs = modality_inputs(batch, modality, device)
            size = batch["y"].shape[0]
            mask = sample_batch_masks(size, model.num_tokens, config.mask_ratio, mask_generator, device)
            loss, _ = model(inputs, mask)
            check_finite(loss, f"stage1 {modality}", epoch, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * size
            count += size
        scheduler.step()
        train_loss = total / max(count, 1)

        val_loss = reconstruction_loss(model, val_loader, hparams.seed + 2, device) if val_loader else train_loss
        curve.append(epoch=epoch, train_loss=train_loss, val_loss=val_loss)
        logger.info("stage1 %s epoch %d: train %.5f val %.5f", modality, epoch, train_loss, val_loss)

        if stopper.step(val_loss, epoch):
            best_state = copy_state(model)
        if stopper.should_stop:
            logger.info("stage1 %s: early stop at epoch %d (best %d)", modality, epoch, stopper.best_epoch)
            break

    model.load_state_dict(best_state)
    if curve_path is not None:
        curve.to_csv(curve_path)

    metadata = {
        "modality": modality,
        "seed": hparams.seed,
        "epochs_run": len(curve.rows),
        "best_epoch": stopper.best_epoch,
        "initial_train_loss": initial_loss,
        "final_train_loss": train_loss,
        "best_val_loss": stopper.best,
    }
    return EncoderCheckpoint(
        config=config,
        state_dict={k: v.detach().cpu() for k, v in model.state_dict().items()},
        fingerprint=config.fingerprint(schema),
        metadata=metadata,
    )
