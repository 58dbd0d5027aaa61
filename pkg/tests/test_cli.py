"""End-to-end tests of the command-line interface on the miniature cohort."""

import json

import pandas as pd
import pytest
import yaml

import src.cli as cli
import src.data_model as data_model
from src.cli import main
from src.data_model import PHENOTYPE_NAMES


@pytest.fixture
def run_dir(tmp_path):
    return tmp_path / "run"


def _run(config, run_dir, *args):
    return main([*args, "--config", str(config), "--run-dir", str(run_dir), "--quiet", "--log-level", "WARNING"])


@pytest.fixture
def modality_reads(monkeypatch):
    """Log every modality payload read from disk."""
    reads = []
    original = data_model._read_modality_file

    def logged(subject_dir, modality):
        reads.append(modality)
        return original(subject_dir, modality)

    monkeypatch.setattr(data_model, "_read_modality_file", logged)
    return reads


def test_missing_config_exit_code(tmp_path):
    assert _run(tmp_path / "absent.yaml", tmp_path / "run", "finetune") == 2


def test_unknown_variant_rejected_by_parser(tiny_config_file, run_dir):
    with pytest.raises(SystemExit):
        _run(tiny_config_file, run_dir, "finetune", "--variant", "L+C")


def test_align_supervised_variant_is_usage_error(tiny_config_file, run_dir):
    """Test asking a supervised baseline to align exits with code 2 and a failed record."""
    assert _run(tiny_config_file, run_dir, "align", "--variant", "L_sup") == 2

    (record_path,) = run_dir.glob("run_align_*.json")
    record = json.loads(record_path.read_text())
    assert record["success"] is False
    assert "variant has no alignment stage" in record["error"]


def test_pretrain_writes_checkpoint_and_record(tiny_config_file, run_dir):
    assert _run(tiny_config_file, run_dir, "pretrain", "--modality", "L", "--epochs", "1") == 0

    assert (run_dir / "checkpoints" / "stage1_L.pt").exists()
    assert (run_dir / "checkpoints" / "stage1_L.json").exists()
    curve = pd.read_csv(run_dir / "stage1_L_curve.csv")
    assert len(curve) == 1

    resolved = yaml.safe_load((run_dir / "config.resolved.yaml").read_text())
    assert resolved["stage1"]["epochs"] == 1

    (record_path,) = run_dir.glob("run_pretrain_*.json")
    record = json.loads(record_path.read_text())
    assert record["success"] is True
    assert "checkpoints/stage1_L.pt" in record["artifacts"]
    assert "stage1_L_curve.csv" in record["artifacts"]
    assert len(record["config_hash"]) == 16


def test_checkpoint_under_other_config_refused(tiny_config_file, run_dir, tmp_path):
    """Test a Stage-I checkpoint is not reused after the encoder settings change."""
    assert _run(tiny_config_file, run_dir, "pretrain", "--modality", "L") == 0

    config = yaml.safe_load(tiny_config_file.read_text())
    config["stage1"]["mask_ratio"] = 0.5
    changed = tmp_path / "changed.yaml"
    changed.write_text(yaml.safe_dump(config))

    assert _run(changed, run_dir, "attention", "--subjects", "1") == 4


@pytest.mark.parametrize("variant, modality", [("L_sup", "L"), ("E_sup", "E")])
def test_single_modality_baseline_reads_only_its_input(tiny_config_file, run_dir, modality_reads, variant, modality):
    """Test a supervised baseline never touches the other modalities' files."""
    assert _run(tiny_config_file, run_dir, "finetune", "--variant", variant) == 0

    assert set(modality_reads) == {modality}
    predictions = pd.read_csv(run_dir / f"predictions_{variant}_1.csv")
    assert len(predictions) == 4 * len(PHENOTYPE_NAMES)


def test_finetune_on_label_fraction(tiny_config_file, run_dir):
    assert _run(tiny_config_file, run_dir, "finetune", "--variant", "L_sup", "--fraction", "0.25") == 0
    assert (run_dir / "predictions_L_sup_0.25.csv").exists()
    assert (run_dir / "checkpoints" / "stage3_L_sup_0.25.json").exists()


def test_stage_flag_without_effect(tiny_config_file, run_dir):
    with pytest.raises(SystemExit):
        _run(tiny_config_file, run_dir, "align", "--fraction", "0.5")


def test_evaluate_without_predictions(tiny_config_file, run_dir):
    assert _run(tiny_config_file, run_dir, "evaluate", "--variant", "L_sup") == 2


def test_precondition_error_exit_code(tiny_config_file, run_dir, monkeypatch):
    """Test a ValueError raised by a command exits with code 2 and a failed record."""

    def failing(ctx, args):
        raise ValueError("fraction leaves no labelled subject")

    monkeypatch.setitem(cli.COMMANDS, "finetune", failing)
    assert _run(tiny_config_file, run_dir, "finetune", "--variant", "L_sup") == 2

    (record_path,) = run_dir.glob("run_finetune_*.json")
    record = json.loads(record_path.read_text())
    assert record["success"] is False
    assert "no labelled subject" in record["error"]


def test_status_summarizes_runs_and_checkpoints(tiny_config_file, run_dir):
    assert _run(tiny_config_file, run_dir, "pretrain", "--modality", "L", "--epochs", "1") == 0
    assert _run(tiny_config_file, run_dir, "status") == 0

    summary = json.loads((run_dir / "command_summary.json").read_text())
    assert summary["total_runs"] == 1
    assert summary["success_rate"] == 1.0
    assert summary["command_usage"] == {"pretrain": 1}
    assert summary["checkpoints"]["available"] is True
    assert set(summary["checkpoints"]["checkpoints"]) == {"stage1_L"}
    assert summary["checkpoints"]["checkpoints"]["stage1_L"]["stage"] is not None

    assert _run(tiny_config_file, run_dir, "status", "--days", "1") == 0
    summary = json.loads((run_dir / "command_summary.json").read_text())
    assert summary["command_usage"] == {"pretrain": 1, "status": 1}


def test_status_needs_run_dir(tiny_config_file):
    assert main(["status", "--config", str(tiny_config_file), "--quiet", "--log-level", "WARNING"]) == 2


def test_pipeline_localizer_inference_reads_localizer_only(tiny_config_file, run_dir, modality_reads):
    """Test the full pipeline, then fine-tune again and check Stage III reads only localizers."""
    assert _run(tiny_config_file, run_dir, "pipeline", "--variant", "C-TRIP") == 0

    for name in ("stage1_L", "stage1_E", "stage1_T", "stage2_C-TRIP", "stage3_C-TRIP_1"):
        assert (run_dir / "checkpoints" / f"{name}.pt").exists()
    assert "tau_LE" in pd.read_csv(run_dir / "stage2_curve.csv").columns

    report = json.loads((run_dir / "agreement_report.json").read_text())
    assert "C-TRIP" in report
    table = pd.read_csv(run_dir / "agreement_C-TRIP_1.csv")
    assert sorted(table["phenotype"]) == sorted(PHENOTYPE_NAMES)

    modality_reads.clear()
    assert _run(tiny_config_file, run_dir, "finetune", "--variant", "C-TRIP") == 0
    assert set(modality_reads) == {"L"}

    assert _run(tiny_config_file, run_dir, "embed", "--variant", "C-TRIP", "--split", "val") == 0
    embeddings = pd.read_csv(run_dir / "embeddings_post.csv")
    assert set(embeddings["modality"]) == {"L", "E", "T"}
    assert len(embeddings) == 3 * 4
    similarity = json.loads((run_dir / "embeddings_post_similarity.json").read_text())
    assert set(similarity) == {"L-E", "L-T"}
    assert all(-1.0 - 1e-6 <= v <= 1.0 + 1e-6 for v in similarity.values())

    assert _run(tiny_config_file, run_dir, "attention", "--variant", "C-TRIP", "--subjects", "2") == 0
    assert len(list((run_dir / "attention").glob("attn_*_C-TRIP.png"))) == 2


@pytest.mark.slow
def test_deterministic_runs_reproduce_report(tiny_config_file, tmp_path):
    """Test two deterministic runs with one seed write identical agreement reports."""
    reports = []
    for name in ("first", "second"):
        run_dir = tmp_path / name
        assert _run(tiny_config_file, run_dir, "pipeline", "--variant", "L+T", "--deterministic", "--seed", "1") == 0
        reports.append((run_dir / "agreement_report.json").read_text())
    assert reports[0] == reports[1]


if __name__ == "__main__":
    pytest.main([__file__])
