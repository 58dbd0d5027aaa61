"""Seeding, deterministic mode and content fingerprints."""

import hashlib
import json
import os
import random
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch


def set_seed(seed: int) -> None:
    """Seed Python, NumPy and torch generators."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def set_deterministic(enabled: bool) -> None:
    """
    Toggle deterministic kernels.

    Deterministic mode forces single-threaded CPU kernels and deterministic
    cuDNN/cuBLAS algorithms so that two runs with the same seed produce
    bit-identical artifacts.

    Args:
        enabled: Whether to enable deterministic mode
    """
    if enabled:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)
    torch.backends.cudnn.deterministic = enabled
    torch.backends.cudnn.benchmark = not enabled


def canonical_json(payload: Any) -> str:
    """Serialize to JSON with sorted keys and no whitespace variance."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)


def fingerprint(payload: Any, length: int = 16) -> str:
    """
    Stable hex digest of a JSON-serializable payload.

    Args:
        payload: Any JSON-serializable object
        length: Number of hex digits to keep

    Returns:
        Truncated SHA-256 hex digest
    """
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:length]


def file_fingerprint(paths: Iterable[Path], length: int = 16) -> str:
    """Content digest over a sequence of files, in the order given."""
    digest = hashlib.sha256()
    for path in paths:
        digest.update(Path(path).name.encode("utf-8"))
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
    return digest.hexdigest()[:length]


def resolve_device(requested: str | None = None) -> torch.device:
    """Pick the requested device, falling back to CPU when CUDA is absent."""
    if requested:
        return torch.device(requested)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")
