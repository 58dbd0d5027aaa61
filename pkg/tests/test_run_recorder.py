"""Tests for run recorder."""

import json
import shutil
import tempfile
from pathlib import Path

import pytest

from src.run_recorder import RunRecorder


@pytest.fixture
def temp_run_dir():
    """Create a temporary run directory."""
    temp_dir = tempfile.mkdtemp()
    yield temp_dir
    shutil.rmtree(temp_dir)


def test_record_command(temp_run_dir):
    """Test recording a command."""
    recorder = RunRecorder(temp_run_dir)

    recorder.record_command(
        command="pretrain",
        arguments={"modality": "L"},
        duration_ms=1520.5,
        success=True,
        config_hash="abc123",
        input_fingerprint="def456",
        artifacts=["stage1_L_curve.csv", "checkpoints/stage1_L.pt"],
        seed=1,
    )

    record_files = list(Path(temp_run_dir).glob("run_*.json"))
    assert len(record_files) == 1

    with open(record_files[0], "r") as f:
        data = json.load(f)

    assert data["command"] == "pretrain"
    assert data["config_hash"] == "abc123"
    assert data["input_fingerprint"] == "def456"
    assert data["artifacts"] == ["checkpoints/stage1_L.pt", "stage1_L_curve.csv"]
    assert data["success"] is True
    assert data["error"] is None


def test_record_failure(temp_run_dir):
    """Test recording a failed command."""
    recorder = RunRecorder(temp_run_dir)
    recorder.record_command("align", {}, 12.0, success=False, error="variant has no alignment stage (L_sup)")

    (record,) = recorder.records()
    assert record["success"] is False
    assert "alignment" in record["error"]


def test_summarize(temp_run_dir):
    """Test summary generation."""
    recorder = RunRecorder(temp_run_dir)

    for i in range(5):
        recorder.record_command(
            command="finetune" if i < 3 else "evaluate",
            arguments={},
            duration_ms=100.0,
            success=i != 4,
            config_hash="abc123",
        )

    summary = recorder.summarize()

    assert summary["total_runs"] == 5
    assert summary["successful_runs"] == 4
    assert summary["success_rate"] == pytest.approx(0.8)
    assert summary["avg_duration_ms"] == pytest.approx(100.0)
    assert summary["command_usage"] == {"finetune": 3, "evaluate": 2}
    assert summary["config_hashes"] == ["abc123"]


def test_summarize_empty(temp_run_dir):
    summary = RunRecorder(temp_run_dir).summarize(days=7)
    assert summary["total_runs"] == 0
    assert summary["success_rate"] == 0


if __name__ == "__main__":
    pytest.main([__file__])
