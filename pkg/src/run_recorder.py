"""Per-command run records written next to the artifacts they describe."""

import json
import logging
from datetime import datetime, timedelta
from pathlib import Path
from typing import Any, Optional

logger = logging.getLogger(__name__)


class RunRecorder:
    """Records each CLI command with its configuration hash, inputs and artifacts."""

    def __init__(self, run_dir: str | Path):
        """
        Initialize run recorder.

        Args:
            run_dir: Run directory holding the records
        """
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)

    def record_command(
        self,
        command: str,
        arguments: dict[str, Any],
        duration_ms: float,
        success: bool = True,
        error: Optional[str] = None,
        config_hash: Optional[str] = None,
        input_fingerprint: Optional[str] = None,
        artifacts: Optional[list[str]] = None,
        seed: Optional[int] = None,
        metadata: Optional[dict] = None,
    ) -> Path:
        """
        Write one ``run_<command>_<timestamp>.json`` record.

        Args:
            command: Subcommand name
            arguments: Parsed command-line arguments
            duration_ms: Wall time of the command
            success: Whether the command completed
            error: Error message if it failed
            config_hash: Fingerprint of the resolved configuration
            input_fingerprint: Content digest of the inputs the command read
            artifacts: Paths written, relative to the run directory
            seed: Seed of the command
            metadata: Command-specific extras

        Returns:
            Path of the record
        """
        timestamp = datetime.now()
        record = {
            "timestamp": timestamp.isoformat(),
            "command": command,
            "arguments": arguments,
            "duration_ms": duration_ms,
            "success": success,
            "error": error,
            "config_hash": config_hash,
            "input_fingerprint": input_fingerprint,
            "seed": seed,
            "artifacts": sorted(artifacts or []),
            "metadata": metadata or {},
        }

        path = self.run_dir / f"run_{command}_{timestamp.strftime('%Y%m%d_%H%M%S_%f')}.json"
        with open(path, "w") as f:
            json.dump(record, f, indent=2, default=str)
        logger.debug("Recorded %s run in %s", command, path)
        return path

    def records(self) -> list[dict]:
        entries = []
        for path in sorted(self.run_dir.glob("run_*.json")):
            with open(path, "r") as f:
                entries.append(json.load(f))
        return entries

    def summarize(self, days: Optional[int] = None) -> dict:
        """
        Aggregate recorded commands.

        Args:
            days: Only include records from the last ``days`` days

        Returns:
            Counts, success rate, total time and per-command usage
        """
        cutoff = datetime.now() - timedelta(days=days) if days is not None else None

        total = 0
        succeeded = 0
        total_ms = 0.0
        command_counts: dict[str, int] = {}
        config_hashes: set[str] = set()

        for record in self.records():
            if cutoff is not None and datetime.fromisoformat(record["timestamp"]) < cutoff:
                continue
            total += 1
            if record.get("success"):
                succeeded += 1
            total_ms += record.get("duration_ms") or 0.0
            command = record.get("command", "unknown")
            command_counts[command] = command_counts.get(command, 0) + 1
            if record.get("config_hash"):
                config_hashes.add(record["config_hash"])

        return {
            "total_runs": total,
            "successful_runs": succeeded,
            "success_rate": succeeded / total if total > 0 else 0,
            "total_duration_ms": total_ms,
            "avg_duration_ms": total_ms / total if total > 0 else 0,
            "command_usage": command_counts,
            "config_hashes": sorted(config_hashes),
        }
