"""Command-line orchestration of data generation, the three training stages and evaluation.

Every command runs inside a run directory (``runs/<timestamp>_<variant>/`` unless
``--run-dir`` is given); checkpoints live in its ``checkpoints/`` subdirectory so
that later commands pointed at the same directory pick up earlier stages.
"""

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import pandas as pd
import torch
import yaml

from src.checkpoints import CheckpointStore
from src.contrastive import AlignmentCheckpoint, ModalityAligner, align_stage2, alignment_fingerprint
from src.data_model import SCHEMA_FILE, SPLITS_FILE, Cohort, Split, TabularSchema, load_cohort, split_cohort, write_splits
from src.encoders import EncoderCheckpoint, ModalityEncoder, pretrain_stage1
from src.errors import ConfigError, PipelineError, VariantStageError
from src.evaluation import build_agreement_report, scaling_experiment, write_agreement_reports
from src.interpret import attention_map, export_embeddings, positive_similarity, region_contrast, save_attention_png
from src.regression import FinetuneResult, RegressorCheckpoint, finetune_stage3
from src.run_recorder import RunRecorder
from src.synthetic_cohort import NoiseLevels, SyntheticCohortGenerator, heart_mask, load_latents
from src.utils.config import Config
from src.utils.reproducibility import file_fingerprint, set_deterministic
from src.variants import VARIANTS, Variant, get_variant

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# Section whose values the stage flags (--epochs, --bs, --lr, ...) override.
COMMAND_STAGES = {
    "pretrain": "stage1",
    "align": "stage2",
    "finetune": "stage3",
    "scaling": "stage3",
}


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)


@dataclass
class RunContext:
    """Resolved configuration, run directory and caches shared by one command."""

    config: Config
    run_dir: Path
    device: Optional[str] = None
    progress: bool = False
    _cohorts: dict[tuple, Cohort] = field(default_factory=dict, repr=False)
    _base_schema: Optional[TabularSchema] = field(default=None, repr=False)

    @property
    def variant(self) -> Variant:
        return get_variant(self.config.variant)

    @property
    def store(self) -> CheckpointStore:
        return CheckpointStore(self.run_dir / "checkpoints")

    @property
    def data_root(self) -> Path:
        return self.config.data_root

    def schema_for(self, variant: Variant) -> TabularSchema:
        if self._base_schema is None:
            self._base_schema = TabularSchema.load(self.data_root / SCHEMA_FILE)
        return variant.schema(self._base_schema)

    def cohort(self, modalities: Sequence[str], variant: Variant) -> Cohort:
        """Load (once) the cohort with only ``modalities`` read from disk, split if unlabelled."""
        key = (tuple(sorted(modalities)), variant.inject_phenotypes)
        if key not in self._cohorts:
            cohort = load_cohort(self.data_root, self.schema_for(variant), tuple(modalities), max_workers=4)
            if not cohort.split_ids(Split.TRAIN):
                cohort = split_cohort(cohort, self.config.split_fractions, self.config.split_seed)
            self._cohorts[key] = cohort
        return self._cohorts[key]

    def input_fingerprint(self) -> Optional[str]:
        paths = [self.data_root / name for name in (SCHEMA_FILE, SPLITS_FILE, "cohort_manifest.json")]
        checkpoint_dir = self.run_dir / "checkpoints"
        if checkpoint_dir.exists():
            paths += sorted(checkpoint_dir.glob("*.json"))
        existing = [p for p in paths if p.exists()]
        return file_fingerprint(existing) if existing else None


def _rel(ctx: RunContext, path: Path) -> str:
    try:
        return str(Path(path).relative_to(ctx.run_dir))
    except ValueError:
        return str(path)


# Stage runners, shared by the individual commands and by `pipeline` / `scaling`.

def run_gen_data(ctx: RunContext, n: Optional[int] = None, out: Optional[Path] = None,
                 include_cine: bool = True) -> list[Path]:
    config = ctx.config
    root = Path(out) if out else ctx.data_root
    noise = NoiseLevels(
        phenotype_scale=float(config.get("synthetic.phenotype_noise_scale", 1.0)),
        image_sigma=float(config.get("synthetic.image_noise_sigma", 0.15)),
        ecg_sigma=float(config.get("synthetic.ecg_noise_sigma", 0.05)),
        tabular_scale=float(config.get("synthetic.tabular_noise_scale", 1.0)),
        drift_amplitude=float(config.get("synthetic.drift_amplitude", 0.3)),
        drift_frequency_hz=float(config.get("synthetic.drift_frequency_hz", 0.25)),
    )
    n = n or int(config.get("synthetic.n_subjects", 512))
    seed = int(config.get("synthetic.seed", 1))
    generator = SyntheticCohortGenerator(noise=noise, include_cine=include_cine)
    cohort = generator.generate_cohort(n, seed, root, max_workers=4)
    split = split_cohort(cohort, config.split_fractions, config.split_seed)
    write_splits(split, root)
    logger.info("Cohort split: %d train / %d val / %d test", *(len(split.split_ids(s)) for s in Split))
    return [root / SCHEMA_FILE, root / SPLITS_FILE, root / "cohort_manifest.json", root / "latents.csv"]


def run_pretrain(ctx: RunContext, variant: Variant, modality: str) -> list[Path]:
    variant.require_pretraining(modality)
    schema = ctx.schema_for(variant)
    cohort = ctx.cohort([modality], variant)
    curve = ctx.run_dir / f"stage1_{modality}_curve.csv"
    checkpoint = pretrain_stage1(
        cohort,
        ctx.config.encoder_config(modality),
        ctx.config.stage1_hparams(device=ctx.device, progress=ctx.progress),
        schema,
        curve_path=curve,
    )
    blob = checkpoint.save(ctx.store)
    logger.info("stage1 %s: loss %.5f -> %.5f", modality,
                checkpoint.metadata["initial_train_loss"], checkpoint.metadata["final_train_loss"])
    return [blob, ctx.store.sidecar_path(checkpoint.name), curve]


def run_align(ctx: RunContext, variant: Variant) -> list[Path]:
    variant.require_alignment()
    schema = ctx.schema_for(variant)
    checkpoints = {
        m: EncoderCheckpoint.load(ctx.store, ctx.config.encoder_config(m), schema) for m in variant.modalities
    }
    cohort = ctx.cohort(variant.modalities, variant)
    curve = ctx.run_dir / "stage2_curve.csv"
    alignment = align_stage2(
        cohort,
        checkpoints,
        ctx.config.stage2_hparams(device=ctx.device, progress=ctx.progress),
        variant.edges,
        ctx.config.alignment_settings(),
        schema,
        variant.name,
        curve_path=curve,
    )
    blob = alignment.save(ctx.store)
    return [blob, ctx.store.sidecar_path(alignment.name), curve]


def _load_alignment(ctx: RunContext, variant: Variant) -> AlignmentCheckpoint:
    schema = ctx.schema_for(variant)
    configs = {m: ctx.config.encoder_config(m) for m in variant.modalities}
    expected = alignment_fingerprint(configs, variant.edges, ctx.config.alignment_settings(), schema)
    return AlignmentCheckpoint.load(ctx.store, variant.name, expected)


def run_finetune(
    ctx: RunContext,
    variant: Variant,
    fraction: float,
    seed: Optional[int] = None,
    out_dir: Optional[Path] = None,
    suffix: str = "",
) -> tuple[FinetuneResult, list[Path]]:
    """
    Stage III for one variant: supervised baselines start from a randomly
    initialized encoder, aligned variants from the Stage-II localizer encoder
    and its projection head.
    """
    modality = variant.input_modality
    schema = ctx.schema_for(variant)
    seed = ctx.config.seed if seed is None else seed
    finetune_config = ctx.config.finetune_config(fraction, seed, ctx.device, ctx.progress)

    if variant.is_supervised:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            encoder = ModalityEncoder(ctx.config.encoder_config(modality), schema)
        projection = None
    else:
        aligner = _load_alignment(ctx, variant).build_aligner(schema)
        encoder, projection = aligner.encoders["L"], aligner.projections["L"]

    cohort = ctx.cohort([modality], variant)
    out_dir = Path(out_dir) if out_dir else ctx.run_dir
    tag = f"{variant.name}_{fraction:g}{suffix}"
    curve = out_dir / f"stage3_{tag}.csv"
    predictions = out_dir / f"predictions_{tag}.csv"
    result = finetune_stage3(encoder, cohort, finetune_config, projection, curve, predictions)

    checkpoint = RegressorCheckpoint.from_result(f"stage3_{tag}", result, schema, finetune_config.hidden_dim)
    blob = checkpoint.save(ctx.store)
    return result, [curve, predictions, blob, ctx.store.sidecar_path(checkpoint.name)]


def run_evaluate(ctx: RunContext, variant: Variant, fraction: float) -> list[Path]:
    path = ctx.run_dir / f"predictions_{variant.name}_{fraction:g}.csv"
    if not path.exists():
        raise ConfigError(f"no predictions at {path}; run finetune first")
    report = build_agreement_report(
        pd.read_csv(path),
        variant.name,
        int(ctx.config.get("evaluation.n_resamples", 1000)),
        int(ctx.config.get("evaluation.seed", 0)),
    )
    summary = report.frame()
    for row in summary.head(4).itertuples():
        logger.info("%s %s: MD %.3f LoA [%.3f, %.3f] R %s", variant.name, row.phenotype, row.md,
                    row.loa_low, row.loa_high, "n/a" if pd.isna(row.pearson_r) else f"{row.pearson_r:.3f}")
    table = ctx.run_dir / f"agreement_{variant.name}_{fraction:g}.csv"
    summary.to_csv(table, index=False)
    return [write_agreement_reports([report], ctx.run_dir / "agreement_report.json"), table]


def ensure_upstream(ctx: RunContext, variant: Variant) -> list[Path]:
    """Run the Stage-I/II steps a variant needs whose checkpoints are missing."""
    artifacts: list[Path] = []
    if variant.is_supervised or ctx.store.exists(AlignmentCheckpoint.name_for(variant.name)):
        return artifacts
    for modality in variant.pretrain_modalities:
        if not ctx.store.exists(EncoderCheckpoint.name_for(modality)):
            artifacts += run_pretrain(ctx, variant, modality)
    artifacts += run_align(ctx, variant)
    return artifacts


# Command handlers: (ctx, args) -> artifacts written.

def cmd_gen_data(ctx: RunContext, args: argparse.Namespace) -> list[Path]:
    return run_gen_data(ctx, args.n, args.out, include_cine=not args.no_cine)


def cmd_pretrain(ctx: RunContext, args: argparse.Namespace) -> list[Path]:
    variant = ctx.variant
    modalities = [args.modality] if args.modality else list(variant.pretrain_modalities)
    if not modalities:
        raise VariantStageError(f"variant has no pretraining stage ({variant.name})")
    artifacts = []
    for modality in modalities:
        artifacts += run_pretrain(ctx, variant, modality)
    return artifacts


def cmd_align(ctx: RunContext, args: argparse.Namespace) -> list[Path]:
    return run_align(ctx, ctx.variant)


def cmd_finetune(ctx: RunContext, args: argparse.Namespace) -> list[Path]:
    fraction = float(ctx.config.get("stage3.fraction", 1.0))
    _, artifacts = run_finetune(ctx, ctx.variant, fraction)
    return artifacts


def cmd_evaluate(ctx: RunContext, args: argparse.Namespace) -> list[Path]:
    fraction = args.eval_fraction if args.eval_fraction is not None else float(ctx.config.get("stage3.fraction", 1.0))
    return run_evaluate(ctx, ctx.variant, fraction)


def cmd_scaling(ctx: RunContext, args: argparse.Namespace) -> list[Path]:
    variants = args.variants or list(ctx.config.get("evaluation.variants", ["L_sup", "C-TRIP"]))
    fractions = args.fractions or [float(f) for f in ctx.config.get("evaluation.fractions", [0.01, 0.1, 1.0])]
    seeds = args.seeds or [int(s) for s in ctx.config.get("evaluation.seeds", [0])]

    artifacts: list[Path] = []
    for name in variants:
        artifacts += ensure_upstream(ctx, get_variant(name))

    out_dir = ctx.run_dir / "scaling"

    def cell(name: str, fraction: float, seed: int) -> pd.DataFrame:
        result, paths = run_finetune(ctx, get_variant(name), fraction, seed, out_dir, suffix=f"_s{seed}")
        artifacts.extend(paths)
        return result.predictions

    table = scaling_experiment(
        variants, fractions, seeds, cell,
        int(ctx.config.get("evaluation.n_resamples", 1000)),
        int(ctx.config.get("evaluation.seed", 0)),
    )
    path = ctx.run_dir / "scaling_table.csv"
    table.to_csv(path, index=False)
    logger.info("Scaling table: %d rows, test split %s", len(table), table.attrs.get("test_split"))
    return artifacts + [path]


def _attention_model(ctx: RunContext, variant: Variant, fraction: float) -> Any:
    """Most-trained image encoder available: Stage III, then Stage II, then Stage I."""
    if variant.input_modality not in ("L", "C"):
        raise VariantStageError(f"variant {variant.name} has no image encoder")
    schema = ctx.schema_for(variant)
    stage3 = f"stage3_{variant.name}_{fraction:g}"
    if ctx.store.exists(stage3):
        return RegressorCheckpoint.load(ctx.store, stage3).build_regressor(schema)
    if not variant.is_supervised and ctx.store.exists(AlignmentCheckpoint.name_for(variant.name)):
        return _load_alignment(ctx, variant).localizer_encoder()
    if not variant.is_supervised and ctx.store.exists(EncoderCheckpoint.name_for("L")):
        return EncoderCheckpoint.load(ctx.store, ctx.config.encoder_config("L"), schema).build_encoder(schema)
    raise ConfigError(f"no trained image encoder for {variant.name} in {ctx.store.checkpoint_dir}")


def cmd_attention(ctx: RunContext, args: argparse.Namespace) -> list[Path]:
    variant = ctx.variant
    fraction = float(ctx.config.get("stage3.fraction", 1.0))
    model = _attention_model(ctx, variant, fraction)
    modality = variant.input_modality
    cohort = ctx.cohort([modality], variant)
    subject_ids = cohort.split_ids(Split.VAL)[: args.subjects]

    latents = load_latents(ctx.data_root) if (ctx.data_root / "latents.csv").exists() else {}
    out_dir = ctx.run_dir / "attention"
    artifacts, rows = [], []
    for sid in subject_ids:
        stack = cohort[sid].modality(modality)
        attention = attention_map(model, stack)
        artifacts.append(save_attention_png(attention, out_dir / f"attn_{sid}_{variant.name}.png"))
        if sid in latents:
            rows.append({"subject_id": sid, "inside_minus_outside": region_contrast(attention, heart_mask(latents[sid]))})

    if rows:
        summary = pd.DataFrame(rows)
        path = out_dir / "attention_summary.csv"
        summary.to_csv(path, index=False)
        artifacts.append(path)
        logger.info("Attention higher inside the heart for %d of %d subjects",
                    int((summary["inside_minus_outside"] > 0).sum()), len(summary))
    return artifacts


def cmd_embed(ctx: RunContext, args: argparse.Namespace) -> list[Path]:
    variant = ctx.variant
    variant.require_alignment()
    schema = ctx.schema_for(variant)
    settings = ctx.config.alignment_settings()
    if args.tag == "pre":
        checkpoints = {
            m: EncoderCheckpoint.load(ctx.store, ctx.config.encoder_config(m), schema) for m in variant.modalities
        }
        aligner = ModalityAligner.from_stage1(checkpoints, variant.edges, schema, settings, ctx.config.seed)
    else:
        aligner = _load_alignment(ctx, variant).build_aligner(schema)

    cohort = ctx.cohort(variant.modalities, variant)
    subject_ids = cohort.subject_ids if args.split == "all" else cohort.split_ids(args.split)
    path = ctx.run_dir / f"embeddings_{args.tag}.csv"
    frame = export_embeddings(aligner, cohort, args.tag, path, subject_ids, device=ctx.device)

    similarity = {f"L-{m}": positive_similarity(frame, "L", m) for m in variant.modalities if m != "L"}
    for pair, value in similarity.items():
        logger.info("%s matched-pair cosine similarity (%s): %.3f", pair, args.tag, value)
    summary = ctx.run_dir / f"embeddings_{args.tag}_similarity.json"
    with open(summary, "w") as f:
        json.dump(similarity, f, indent=2, sort_keys=True)
    return [path, summary]


def cmd_status(ctx: RunContext, args: argparse.Namespace) -> list[Path]:
    """Command history and checkpoint inventory of the run directory."""
    summary = RunRecorder(ctx.run_dir).summarize(args.days)
    summary["checkpoints"] = ctx.store.get_info()
    path = ctx.run_dir / "command_summary.json"
    with open(path, "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    logger.info("%d runs recorded, %.0f%% successful; %d checkpoints", summary["total_runs"],
                100 * summary["success_rate"], len(summary["checkpoints"].get("checkpoints", {})))
    return [path]


def cmd_pipeline(ctx: RunContext, args: argparse.Namespace) -> list[Path]:
    """gen-data (if the cohort is missing), then pretrain, align, finetune and evaluate."""
    artifacts: list[Path] = []
    if not (ctx.data_root / SCHEMA_FILE).exists():
        artifacts += run_gen_data(ctx)
    variant = ctx.variant
    artifacts += ensure_upstream(ctx, variant)
    fraction = float(ctx.config.get("stage3.fraction", 1.0))
    _, paths = run_finetune(ctx, variant, fraction)
    artifacts += paths
    artifacts += run_evaluate(ctx, variant, fraction)
    return artifacts


COMMANDS: dict[str, Callable[[RunContext, argparse.Namespace], list[Path]]] = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "align": cmd_align,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "scaling": cmd_scaling,
    "attention": cmd_attention,
    "embed": cmd_embed,
    "pipeline": cmd_pipeline,
    "status": cmd_status,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.yaml", help="YAML configuration file")
    common.add_argument("--run-dir", type=Path, help="Run directory (default runs/<timestamp>_<variant>)")
    common.add_argument("--device", help="torch device (default: cuda if available)")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--quiet", action="store_true", help="Disable progress bars")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", choices=list(VARIANTS))
    common.add_argument("--deterministic", action="store_true", default=None)

    def stage_flags(parser: argparse.ArgumentParser, *names: str) -> None:
        if "epochs" in names:
            parser.add_argument("--epochs", type=int)
        if "bs" in names:
            parser.add_argument("--bs", type=int)
        if "lr" in names:
            parser.add_argument("--lr", type=float)
        if "mask_ratio" in names:
            parser.add_argument("--mask-ratio", dest="mask_ratio", type=float)
        if "tau" in names:
            parser.add_argument("--tau-le", dest="tau_le", type=float)
            parser.add_argument("--tau-lt", dest="tau_lt", type=float)
        if "fraction" in names:
            parser.add_argument("--fraction", type=float)

    parser = argparse.ArgumentParser(
        prog="localizer-phenotypes",
        description="Cardiac phenotypes from localizer MRI with ECG/tabular-aligned representations",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="Generate the synthetic paired cohort")
    p.add_argument("--n", type=int, help="Number of subjects")
    p.add_argument("--out", type=Path, help="Cohort root (default data.root)")
    p.add_argument("--no-cine", action="store_true", help="Skip the cine stand-in")

    p = sub.add_parser("pretrain", parents=[common], help="Stage I: masked reconstruction per modality")
    p.add_argument("--modality", choices=["L", "E", "T"], help="Default: every modality of the variant")
    stage_flags(p, "epochs", "bs", "lr", "mask_ratio")

    p = sub.add_parser("align", parents=[common], help="Stage II: localizer-centric contrastive alignment")
    stage_flags(p, "epochs", "bs", "lr", "tau")
    p.add_argument("--freeze-encoders", dest="freeze_encoders", action="store_true", default=None,
                   help="Train only projection heads and temperatures")

    p = sub.add_parser("finetune", parents=[common], help="Stage III: phenotype regression")
    stage_flags(p, "epochs", "bs", "lr", "fraction")

    p = sub.add_parser("evaluate", parents=[common], help="Agreement report on the test split")
    p.add_argument("--fraction", dest="eval_fraction", type=float)

    p = sub.add_parser("scaling", parents=[common], help="Pearson R versus fine-tuning data fraction")
    p.add_argument("--variants", nargs="+", choices=list(VARIANTS))
    p.add_argument("--fractions", nargs="+", type=float)
    p.add_argument("--seeds", nargs="+", type=int)
    stage_flags(p, "epochs", "bs", "lr")

    p = sub.add_parser("attention", parents=[common], help="[CLS] attention maps for validation subjects")
    p.add_argument("--subjects", type=int, default=8)

    p = sub.add_parser("embed", parents=[common], help="Export shared-space embeddings")
    p.add_argument("--tag", choices=["pre", "post"], default="post")
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="val")

    sub.add_parser("pipeline", parents=[common], help="Run every stage of one variant")

    p = sub.add_parser("status", parents=[common], help="Summarize the runs and checkpoints of a run directory")
    p.add_argument("--days", type=int, help="Only count runs from the last N days")
    return parser


def _resolve_config(args: argparse.Namespace) -> Config:
    config = Config(args.config)
    flags = dict(vars(args))
    if args.command == "gen-data" and flags.get("seed") is not None:
        config.apply_overrides({"synthetic.seed": flags.pop("seed")})
    config.apply_overrides(Config.flag_overrides(flags, COMMAND_STAGES.get(args.command)))
    config.apply_overrides({"stage2.freeze_encoders": flags.get("freeze_encoders")})
    get_variant(config.variant)
    return config


def run(args: argparse.Namespace) -> list[Path]:
    """
    Execute one parsed command and record it in the run directory.

    Returns:
        Paths of the artifacts written
    """
    config = _resolve_config(args)
    set_deterministic(config.deterministic)
    if args.command == "status" and args.run_dir is None:
        raise ConfigError("status needs --run-dir")
    run_dir = args.run_dir or config.runs_dir / f"{datetime.now().strftime('%Y%m%d_%H%M%S')}_{config.variant}"
    run_dir.mkdir(parents=True, exist_ok=True)
    if args.command != "status":
        with open(run_dir / "config.resolved.yaml", "w") as f:
            yaml.safe_dump(config.as_dict(), f, sort_keys=True)

    ctx = RunContext(config, run_dir, args.device, progress=not args.quiet and sys.stderr.isatty())
    recorder = RunRecorder(run_dir)
    logger.info("%s: variant %s, config %s, run dir %s", args.command, config.variant, config.fingerprint(), run_dir)

    start_time = time.time()
    artifacts: list[Path] = []
    success = True
    error_msg = None
    try:
        artifacts = COMMANDS[args.command](ctx, args)
        return artifacts
    except Exception as e:
        success = False
        error_msg = str(e)
        raise
    finally:
        duration_ms = (time.time() - start_time) * 1000
        recorder.record_command(
            command=args.command,
            arguments={k: v for k, v in vars(args).items() if k != "command"},
            duration_ms=duration_ms,
            success=success,
            error=error_msg,
            config_hash=config.fingerprint(),
            input_fingerprint=ctx.input_fingerprint(),
            artifacts=[_rel(ctx, p) for p in artifacts],
            seed=config.seed,
            metadata={"variant": config.variant, "deterministic": config.deterministic},
        )


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run the command and map failures onto exit codes."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        run(args)
    except PipelineError as e:
        logger.error("%s", e)
        return e.exit_code
    except (FileNotFoundError, ValueError) as e:
        logger.error("%s", e)
        return ConfigError.exit_code
    return 0
