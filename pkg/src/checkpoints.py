"""Checkpoint store: one binary weight blob plus a JSON sidecar per checkpoint."""

import hashlib
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Optional

import torch

from src.errors import FingerprintMismatchError

logger = logging.getLogger(__name__)


class CheckpointStore:
    """Saves and validates model checkpoints in a directory."""

    def __init__(self, checkpoint_dir: str | Path = "checkpoints"):
        """
        Initialize checkpoint store.

        Args:
            checkpoint_dir: Directory holding ``<name>.pt`` / ``<name>.json`` pairs
        """
        self.checkpoint_dir = Path(checkpoint_dir)

    def blob_path(self, name: str) -> Path:
        return self.checkpoint_dir / f"{name}.pt"

    def sidecar_path(self, name: str) -> Path:
        return self.checkpoint_dir / f"{name}.json"

    def exists(self, name: str) -> bool:
        return self.blob_path(name).exists() and self.sidecar_path(name).exists()

    def save(self, name: str, payload: dict[str, Any], fingerprint: str, stage: str, metadata: Optional[dict] = None) -> Path:
        """
        Write a checkpoint.

        Args:
            name: Checkpoint name (e.g. ``stage1_L``)
            payload: Tensors and plain values to serialize
            fingerprint: Config/schema fingerprint the weights were trained under
            stage: Stage tag
            metadata: Training-run metadata (epochs, losses, seed)

        Returns:
            Path of the weight blob
        """
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        blob = self.blob_path(name)
        torch.save(payload, blob)

        sidecar = {
            "name": name,
            "stage": stage,
            "fingerprint": fingerprint,
            "blob_sha256": self._sha256(blob),
            "build_time": datetime.now().isoformat(),
            "metadata": metadata or {},
        }
        with open(self.sidecar_path(name), "w") as f:
            json.dump(sidecar, f, indent=2, default=str)

        logger.info("Saved checkpoint %s (%s, fingerprint %s)", blob, stage, fingerprint)
        return blob

    def load_sidecar(self, name: str) -> Optional[dict]:
        path = self.sidecar_path(name)
        if not path.exists():
            return None
        with open(path, "r") as f:
            return json.load(f)

    def load(self, name: str, expected_fingerprint: Optional[str] = None) -> tuple[dict[str, Any], dict]:
        """
        Read a checkpoint after validating its sidecar.

        Args:
            name: Checkpoint name
            expected_fingerprint: Refuse the checkpoint if its fingerprint differs

        Returns:
            (payload, sidecar)

        Raises:
            FileNotFoundError: If blob or sidecar is missing
            FingerprintMismatchError: If the fingerprint or blob digest differs
        """
        sidecar = self.load_sidecar(name)
        if sidecar is None or not self.blob_path(name).exists():
            raise FileNotFoundError(f"Checkpoint not found: {self.blob_path(name)}")

        if expected_fingerprint is not None and sidecar["fingerprint"] != expected_fingerprint:
            raise FingerprintMismatchError(str(self.blob_path(name)), expected_fingerprint, sidecar["fingerprint"])

        digest = self._sha256(self.blob_path(name))
        if digest != sidecar.get("blob_sha256"):
            raise FingerprintMismatchError(str(self.blob_path(name)), sidecar.get("blob_sha256", "?"), digest)

        payload = torch.load(self.blob_path(name), map_location="cpu", weights_only=True)
        return payload, sidecar

    def get_info(self) -> dict:
        """
        Summarize available checkpoints.

        Returns:
            Availability flag and per-checkpoint stage / fingerprint
        """
        if not self.checkpoint_dir.exists():
            return {"available": False, "message": "No checkpoints available"}

        entries = {}
        for path in sorted(self.checkpoint_dir.glob("*.json")):
            name = path.stem
            if not self.blob_path(name).exists():
                continue
            sidecar = self.load_sidecar(name) or {}
            entries[name] = {
                "stage": sidecar.get("stage"),
                "fingerprint": sidecar.get("fingerprint"),
                "size": self.blob_path(name).stat().st_size,
            }

        if not entries:
            return {"available": False, "message": "No checkpoints available"}
        return {"available": True, "checkpoints": entries}

    @staticmethod
    def _sha256(path: Path) -> str:
        digest = hashlib.sha256()
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                digest.update(chunk)
        return digest.hexdigest()
