"""Tokenization of each modality, random masking and baseline-drift correction.

Batched helpers (``patch_images``, ``patch_ecg``, ``sample_batch_masks``) are what
the training loops call; the single-record operations wrap them and return
``TokenSequence`` objects.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from scipy import ndimage

from src.data_model import EcgRecord, ImageStack, TabularRecord, TabularSchema

DEFAULT_MASK_RATIO = 0.75
DRIFT_WINDOW_S = 0.6


@dataclass(frozen=True)
class TokenSequence:
    """Embedded or raw tokens of one sample with their original positions."""

    tokens: torch.Tensor  # [num_tokens, token_dim]
    positions: torch.Tensor  # long [num_tokens]
    modality: str

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ValueError(f"tokens must be [num_tokens, token_dim], got {tuple(self.tokens.shape)}")
        if self.positions.shape != (self.tokens.shape[0],):
            raise ValueError("positions must have one entry per token")
        if self.positions.numel() > 1 and not bool((self.positions[1:] > self.positions[:-1]).all()):
            raise ValueError("positions must be unique and sorted ascending")

    @classmethod
    def from_unordered(cls, tokens: torch.Tensor, positions: torch.Tensor, modality: str) -> "TokenSequence":
        """Build a sequence from tokens in arbitrary order, sorting by position."""
        order = torch.argsort(positions)
        return cls(tokens[order], positions[order], modality)

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]

    def select(self, indices: torch.Tensor) -> "TokenSequence":
        """Sub-sequence at the given (sorted) token indices."""
        return TokenSequence(self.tokens[indices], self.positions[indices], self.modality)


@dataclass(frozen=True)
class MaskPlan:
    """
    Partition of token positions into visible and masked sets.

    Index tensors are ``[k]`` for one sample or ``[batch, k]`` for a batch; each
    row is sorted ascending.
    """

    visible_idx: torch.Tensor
    masked_idx: torch.Tensor
    ratio: float

    def __post_init__(self):
        if self.visible_idx.shape[:-1] != self.masked_idx.shape[:-1]:
            raise ValueError("visible and masked index tensors disagree on batch shape")
        total = self.num_tokens
        combined = torch.sort(torch.cat([self.visible_idx, self.masked_idx], dim=-1), dim=-1).values
        expected = torch.arange(total, device=combined.device).expand_as(combined)
        if not torch.equal(combined, expected):
            raise ValueError("visible and masked positions must partition all token positions")

    @property
    def num_tokens(self) -> int:
        return self.visible_idx.shape[-1] + self.masked_idx.shape[-1]

    @property
    def num_masked(self) -> int:
        return self.masked_idx.shape[-1]

    @property
    def num_visible(self) -> int:
        return self.visible_idx.shape[-1]

    @property
    def is_batched(self) -> bool:
        return self.visible_idx.ndim == 2

    def batched(self) -> "MaskPlan":
        if self.is_batched:
            return self
        return MaskPlan(self.visible_idx.unsqueeze(0), self.masked_idx.unsqueeze(0), self.ratio)

    def to(self, device: torch.device | str) -> "MaskPlan":
        return MaskPlan(self.visible_idx.to(device), self.masked_idx.to(device), self.ratio)


def _masked_count(num_tokens: int, ratio: float) -> int:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    num_masked = int(round(ratio * num_tokens))
    if not 0 < num_masked < num_tokens:
        raise ValueError(f"ratio {ratio} leaves no visible or no masked token out of {num_tokens}")
    return num_masked


def sample_mask(num_tokens: int, ratio: float, generator: torch.Generator) -> MaskPlan:
    """
    Uniformly choose round(ratio * num_tokens) positions to mask.

    Args:
        num_tokens: Sequence length
        ratio: Fraction masked, strictly between 0 and 1
        generator: torch RNG; the plan is a pure function of its state

    Returns:
        MaskPlan with sorted index sets
    """
    num_masked = _masked_count(num_tokens, ratio)
    permutation = torch.randperm(num_tokens, generator=generator)
    masked = torch.sort(permutation[:num_masked]).values
    visible = torch.sort(permutation[num_masked:]).values
    return MaskPlan(visible, masked, ratio)


def sample_batch_masks(
    batch_size: int,
    num_tokens: int,
    ratio: float,
    generator: torch.Generator,
    device: torch.device | str = "cpu",
) -> MaskPlan:
    """Independent uniform masks for every sample of a batch."""
    num_masked = _masked_count(num_tokens, ratio)
    noise = torch.rand(batch_size, num_tokens, generator=generator)
    shuffle = torch.argsort(noise, dim=1)
    masked = torch.sort(shuffle[:, :num_masked], dim=1).values
    visible = torch.sort(shuffle[:, num_masked:], dim=1).values
    return MaskPlan(visible.to(device), masked.to(device), ratio)


def patch_images(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """
    Cut [B, C, H, W] images into non-overlapping patches.

    Returns:
        [B, (H/p)*(W/p), p*p*C] tokens, grid row-major, each patch flattened
        as (row, column, channel)
    """
    batch, channels, height, width = images.shape
    for size in (height, width):
        if size % patch_size != 0:
            raise ValueError(f"{size} not divisible by {patch_size}")
    h, w = height // patch_size, width // patch_size
    x = images.reshape(batch, channels, h, patch_size, w, patch_size)
    x = torch.einsum("nchpwq->nhwpqc", x)
    return x.reshape(batch, h * w, patch_size * patch_size * channels)


def unpatch_images(tokens: torch.Tensor, patch_size: int, channels: int, grid: tuple[int, int]) -> torch.Tensor:
    """Inverse of ``patch_images`` for complete, position-ordered token tensors."""
    batch = tokens.shape[0]
    h, w = grid
    x = tokens.reshape(batch, h, w, patch_size, patch_size, channels)
    x = torch.einsum("nhwpqc->nchpwq", x)
    return x.reshape(batch, channels, h * patch_size, w * patch_size)


def patch_ecg(signals: torch.Tensor, patch_len: int) -> torch.Tensor:
    """Cut [B, leads, T] signals into lead-major windows: [B, leads*T/patch_len, patch_len]."""
    batch, leads, timesteps = signals.shape
    if timesteps % patch_len != 0:
        raise ValueError(f"{timesteps} not divisible by {patch_len}")
    return signals.reshape(batch, leads * (timesteps // patch_len), patch_len)


def patchify_image(stack: ImageStack, patch_size: int) -> TokenSequence:
    """Patch tokens of one localizer stack; slices act as channels."""
    images = torch.from_numpy(np.ascontiguousarray(stack.voxels)).unsqueeze(0)
    tokens = patch_images(images, patch_size)[0]
    return TokenSequence(tokens, torch.arange(tokens.shape[0]), "L")


def _require_complete(seq: TokenSequence, expected: int) -> None:
    present = set(seq.positions.tolist())
    missing = sorted(set(range(expected)) - present)
    if missing or len(present) != expected:
        preview = ", ".join(str(m) for m in missing[:5])
        raise ValueError(f"sequence incomplete: missing positions [{preview}{', ...' if len(missing) > 5 else ''}]")


def unpatchify_image(seq: TokenSequence, patch_size: int, channels: int = 3) -> ImageStack:
    """Reassemble an image stack from a complete patch sequence, keyed by position."""
    token_dim = patch_size * patch_size * channels
    if seq.token_dim != token_dim:
        raise ValueError(f"token_dim {seq.token_dim} does not match patch size {patch_size} x {channels} channels")
    side = int(round(seq.num_tokens ** 0.5))
    _require_complete(seq, side * side)
    ordered = seq.tokens[torch.argsort(seq.positions)].unsqueeze(0)
    images = unpatch_images(ordered, patch_size, channels, (side, side))
    return ImageStack(images[0].numpy())


def patchify_ecg(record: EcgRecord, patch_len: int) -> TokenSequence:
    """Per-lead windows of ``patch_len`` samples, ordered lead-major."""
    signals = torch.from_numpy(np.ascontiguousarray(record.samples)).unsqueeze(0)
    tokens = patch_ecg(signals, patch_len)[0]
    return TokenSequence(tokens, torch.arange(tokens.shape[0]), "E")


def unpatchify_ecg(seq: TokenSequence, patch_len: int, leads: int = 12, sampling_rate_hz: int = 500) -> EcgRecord:
    """Inverse of ``patchify_ecg``."""
    if seq.token_dim != patch_len:
        raise ValueError(f"token_dim {seq.token_dim} does not match patch length {patch_len}")
    if seq.num_tokens % leads != 0:
        raise ValueError(f"{seq.num_tokens} tokens cannot be split over {leads} leads")
    _require_complete(seq, seq.num_tokens)
    ordered = seq.tokens[torch.argsort(seq.positions)]
    samples = ordered.reshape(leads, -1)
    return EcgRecord(samples.numpy(), sampling_rate_hz=sampling_rate_hz)


class TabularTokenizer(nn.Module):
    """
    One token per tabular feature in a shared embedding space.

    Numeric feature i maps to ``value * weight_i + bias_i``; categorical feature
    j maps to the embedding row of its category.
    """

    def __init__(self, n_numeric: int, cardinalities: tuple[int, ...], dim: int):
        super().__init__()
        self.n_numeric = n_numeric
        self.cardinalities = tuple(cardinalities)
        self.dim = dim
        self.numeric_weight = nn.Parameter(torch.empty(n_numeric, dim))
        self.numeric_bias = nn.Parameter(torch.empty(n_numeric, dim))
        self.categorical = nn.Embedding(max(1, sum(self.cardinalities)), dim)
        offsets = np.concatenate([[0], np.cumsum(self.cardinalities)[:-1]]) if self.cardinalities else np.zeros(0)
        self.register_buffer("offsets", torch.as_tensor(offsets, dtype=torch.long), persistent=False)
        self.register_buffer("limits", torch.as_tensor(self.cardinalities, dtype=torch.long), persistent=False)
        self.reset_parameters()

    @classmethod
    def from_schema(cls, schema: TabularSchema, dim: int) -> "TabularTokenizer":
        return cls(schema.n_numeric, schema.cardinalities, dim)

    @property
    def n_tokens(self) -> int:
        return self.n_numeric + len(self.cardinalities)

    def reset_parameters(self) -> None:
        nn.init.normal_(self.numeric_weight, std=0.02)
        nn.init.normal_(self.numeric_bias, std=0.02)
        nn.init.normal_(self.categorical.weight, std=0.02)

    def forward(self, numeric: torch.Tensor, categorical: torch.Tensor) -> torch.Tensor:
        """
        Args:
            numeric: [B, n_numeric] z-normalized values
            categorical: [B, n_categorical] category indices

        Returns:
            [B, n_numeric + n_categorical, dim] tokens in schema order
        """
        if numeric.shape[-1] != self.n_numeric or categorical.shape[-1] != len(self.cardinalities):
            raise ValueError(
                f"expected {self.n_numeric} numeric and {len(self.cardinalities)} categorical features, "
                f"got {numeric.shape[-1]} and {categorical.shape[-1]}"
            )
        if categorical.numel() and (bool((categorical < 0).any()) or bool((categorical >= self.limits).any())):
            raise ValueError("category index ≥ cardinality")
        numeric_tokens = numeric.unsqueeze(-1) * self.numeric_weight + self.numeric_bias
        categorical_tokens = self.categorical(categorical + self.offsets)
        return torch.cat([numeric_tokens, categorical_tokens], dim=-2)


def tokenize_tabular(record: TabularRecord, schema: TabularSchema, tokenizer: TabularTokenizer) -> TokenSequence:
    """Embed one tabular record; one token per schema feature."""
    if len(record.numeric) != schema.n_numeric or len(record.categorical) != schema.n_categorical:
        raise ValueError("record does not conform to schema")
    for entry, feature in zip(record.categorical, schema.categorical):
        if entry.index >= feature.cardinality:
            raise ValueError(f"category index {entry.index} ≥ cardinality {feature.cardinality} for {feature.name!r}")
    dtype = tokenizer.numeric_weight.dtype
    numeric = torch.as_tensor(record.numeric_array(), dtype=dtype).unsqueeze(0)
    categorical = torch.as_tensor(record.categorical_array()).unsqueeze(0)
    tokens = tokenizer(numeric, categorical)[0]
    return TokenSequence(tokens, torch.arange(tokens.shape[0]), "T")


def correct_baseline_drift(record: EcgRecord, window_s: float = DRIFT_WINDOW_S) -> EcgRecord:
    """
    Subtract a per-lead moving-median trend.

    The window (0.6 s, 300 samples at 500 Hz) is wider than a QRS complex.
    Edges are padded by reflection.
    """
    window = max(1, int(round(window_s * record.sampling_rate_hz)))
    samples = record.samples.astype(np.float64)
    trend = ndimage.median_filter(samples, size=(1, window), mode="reflect")
    corrected = (samples - trend).astype(np.float32)
    return EcgRecord(corrected, record.sampling_rate_hz, drift_corrected=True)
