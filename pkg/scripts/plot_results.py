#!/usr/bin/env python3
"""Plot scaling curves and Bland-Altman scatters from a run directory."""

import argparse
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

DEFAULT_PHENOTYPES = ("LVEF", "LVM", "RVEF", "RVEDV")


def plot_scaling(table: pd.DataFrame, output_dir: Path, phenotypes=DEFAULT_PHENOTYPES) -> list[Path]:
    """Pearson R against fine-tuning fraction (log x), one line per variant, CI band across seeds."""
    written = []
    for phenotype in phenotypes:
        part = table[table["phenotype"] == phenotype]
        if part.empty:
            continue
        fig, ax = plt.subplots(figsize=(5, 4))
        for variant, rows in part.groupby("variant"):
            stats = rows.groupby("fraction").agg(
                r=("pearson_r", "mean"), low=("ci_low", "mean"), high=("ci_high", "mean")
            ).sort_index()
            ax.plot(stats.index, stats["r"], marker="o", label=variant)
            ax.fill_between(stats.index, stats["low"], stats["high"], alpha=0.2)
        ax.set_xscale("log")
        ax.set_xlabel("fraction of training labels")
        ax.set_ylabel("Pearson R")
        ax.set_title(phenotype)
        ax.legend()
        fig.tight_layout()
        path = output_dir / f"scaling_{phenotype}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def plot_bland_altman(predictions: pd.DataFrame, output_dir: Path, stem: str,
                      phenotypes=DEFAULT_PHENOTYPES) -> list[Path]:
    written = []
    for phenotype in phenotypes:
        part = predictions[predictions["phenotype_name"] == phenotype]
        if len(part) < 3:
            continue
        mean = (part["y_pred"] + part["y_true"]) / 2.0
        diff = part["y_pred"] - part["y_true"]
        md, sd = diff.mean(), diff.std(ddof=1)

        fig, ax = plt.subplots(figsize=(5, 4))
        ax.scatter(mean, diff, s=8, alpha=0.6)
        for level, style in ((md, "-"), (md - 1.96 * sd, "--"), (md + 1.96 * sd, "--")):
            ax.axhline(level, color="k", linestyle=style, linewidth=1)
        ax.set_xlabel("mean of prediction and reference")
        ax.set_ylabel("prediction - reference")
        ax.set_title(f"{phenotype}: MD {md:.2f}, LoA [{md - 1.96 * sd:.2f}, {md + 1.96 * sd:.2f}]")
        fig.tight_layout()
        path = output_dir / f"bland_altman_{stem}_{phenotype}.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def plot_results(run_dir: Path, output_dir: Path | None = None) -> list[Path]:
    """Render every plot the artifacts in ``run_dir`` support."""
    output_dir = output_dir or run_dir / "plots"
    output_dir.mkdir(parents=True, exist_ok=True)

    written = []
    scaling = run_dir / "scaling_table.csv"
    if scaling.exists():
        written += plot_scaling(pd.read_csv(scaling), output_dir)
    for path in sorted(run_dir.glob("predictions_*.csv")):
        frame = pd.read_csv(path)
        if np.isfinite(frame["y_pred"]).all():
            written += plot_bland_altman(frame, output_dir, path.stem.removeprefix("predictions_"))
    return written


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("run_dir", type=Path)
    parser.add_argument("--out", type=Path)
    args = parser.parse_args()

    if not args.run_dir.is_dir():
        print(f"No run directory at {args.run_dir}", file=sys.stderr)
        return 2
    written = plot_results(args.run_dir, args.out)
    if not written:
        print("No scaling table or predictions found")
        return 0
    print(f"✓ Wrote {len(written)} plots to {written[0].parent}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
