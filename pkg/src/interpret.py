"""Attention-map extraction and shared-space embedding export."""

import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F
from PIL import Image

from src.contrastive import ModalityAligner, embed_batch
from src.data_model import IMAGE_SHAPE, Cohort, ImageStack
from src.encoders import MaskedAutoencoder, ModalityEncoder
from src.regression import PhenotypeRegressor

logger = logging.getLogger(__name__)

ROW_SUM_ATOL = 1e-4
EXPORT_PHENOTYPES = ("LVM", "LVEF", "RVEF", "RVEDV")
EXPORT_MODALITIES = ("L", "E", "T")


def _localizer_encoder(model) -> ModalityEncoder:
    if isinstance(model, PhenotypeRegressor):
        model = model.encoder
    elif isinstance(model, ModalityAligner):
        model = model.encoders["L"]
    elif isinstance(model, MaskedAutoencoder):
        model = model.encoder
    if not isinstance(model, ModalityEncoder) or model.grid is None:
        raise ValueError("model has no image encoder with attention introspection")
    return model


@torch.no_grad()
def cls_attention(model, localizer: ImageStack | np.ndarray) -> np.ndarray:
    """
    Head-averaged attention of the final block's [CLS] query over the patch grid.

    Raises:
        ValueError: If the model cannot expose attention weights
        RuntimeError: If the extracted rows do not sum to one
    """
    encoder = _localizer_encoder(model)
    voxels = localizer.voxels if isinstance(localizer, ImageStack) else np.asarray(localizer)
    if voxels.shape != IMAGE_SHAPE:
        raise ValueError(f"localizer must have shape {IMAGE_SHAPE}, got {voxels.shape}")

    encoder.eval()
    param = next(encoder.parameters())
    inputs = torch.as_tensor(voxels, dtype=param.dtype, device=param.device).unsqueeze(0)
    weights = encoder(inputs, return_attention=True).attention
    if weights is None:
        raise ValueError("encoder returned no attention weights")

    row_sums = weights.sum(dim=-1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums), atol=ROW_SUM_ATOL):
        raise RuntimeError("attention rows do not sum to 1")

    rows, cols = encoder.grid
    return weights[0, :, 0, 1:].mean(dim=0).reshape(rows, cols).double().cpu().numpy()


def attention_map(model, localizer: ImageStack | np.ndarray) -> np.ndarray:
    """
    [CLS] attention map up-sampled to the image size and min-max normalized to [0, 1].

    Args:
        model: Localizer encoder, or a regressor / aligner / autoencoder containing one
        localizer: Stack of shape [3, 224, 224]

    Returns:
        float64 array [224, 224]
    """
    grid = torch.from_numpy(cls_attention(model, localizer))[None, None]
    upsampled = F.interpolate(grid, size=IMAGE_SHAPE[1:], mode="bilinear", align_corners=False)[0, 0].numpy()
    low, high = upsampled.min(), upsampled.max()
    if high - low <= 0:
        return np.zeros_like(upsampled)
    return (upsampled - low) / (high - low)


def save_attention_png(attention: np.ndarray, path: Path | str) -> Path:
    """Write a [0, 1] map as an 8-bit grayscale PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.round(attention * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)
    return path


def region_contrast(attention: np.ndarray, region: np.ndarray) -> float:
    """Mean attention inside ``region`` minus mean attention outside it."""
    region = np.asarray(region, dtype=bool)
    if region.shape != attention.shape or region.all() or not region.any():
        raise ValueError("region must be a proper, non-empty subset of the map")
    return float(attention[region].mean() - attention[~region].mean())


def export_embeddings(
    aligner: ModalityAligner,
    cohort: Cohort,
    tag: str,
    path: Optional[Path | str] = None,
    subject_ids: Optional[Sequence[str]] = None,
    batch_size: int = 64,
    device: Optional[str] = None,
) -> pd.DataFrame:
    """
    One row per (subject, modality) with the shared-space vector and coloring metadata.

    ``tag`` is "pre" for Stage-I encoders with seeded random projections and
    "post" for aligned weights; the file is ``embeddings_<tag>.csv``.
    """
    if tag not in ("pre", "post"):
        raise ValueError(f"tag must be 'pre' or 'post', got {tag!r}")
    embeddings = embed_batch(aligner, cohort, subject_ids, batch_size, device)
    dim = aligner.settings.projection_dim
    dim_columns = [f"dim_{i}" for i in range(dim)]

    rows = []
    for entry in embeddings:
        record = cohort[entry.subject_id]
        sex = record.tabular.category("sex") if record.tabular is not None else None
        meta = {name.lower(): record.phenotypes[name] for name in EXPORT_PHENOTYPES}
        for modality in EXPORT_MODALITIES:
            vector = entry.get(modality)
            if vector is None:
                continue
            row = {"subject_id": entry.subject_id, "modality": modality}
            row.update(zip(dim_columns, vector.tolist()))
            row.update(meta)
            row["sex"] = sex
            rows.append(row)

    columns = ["subject_id", "modality", *dim_columns, *(n.lower() for n in EXPORT_PHENOTYPES), "sex"]
    frame = pd.DataFrame(rows, columns=columns)
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        logger.info("Wrote %d embedding rows to %s", len(frame), path)
    return frame


def positive_similarity(frame: pd.DataFrame, modality_a: str = "L", modality_b: str = "T") -> float:
    """Mean cosine similarity between two modalities' vectors of the same subject."""
    dims = [c for c in frame.columns if c.startswith("dim_")]
    a = frame[frame["modality"] == modality_a].set_index("subject_id")[dims]
    b = frame[frame["modality"] == modality_b].set_index("subject_id")[dims]
    shared = a.index.intersection(b.index)
    if shared.empty:
        raise ValueError(f"no subject has both {modality_a} and {modality_b} embeddings")
    za, zb = a.loc[shared].to_numpy(), b.loc[shared].to_numpy()
    sims = (za * zb).sum(axis=1) / (np.linalg.norm(za, axis=1) * np.linalg.norm(zb, axis=1))
    return float(sims.mean())
