"""Command-line interface for the tumor-classification pipeline."""

from __future__ import annotations

import sys
from dataclasses import asdict
from pathlib import Path

import click

from .errors import PipelineError, exit_code_for
from .features import FeatureConfig
from .pipeline import (
    FEATURE_MODES,
    STANDARDIZE_SCOPES,
    evaluate_cmd,
    extract_features_cmd,
    format_effective_config,
    load_run_config,
    rebuild_report,
    run_cv,
    run_single_fold,
)


@click.group()
def cli() -> None:
    """Multimodal brain-scan classifier: feature extraction, cross-validated
    training, and evaluation."""


def _run_options(command):
    options = [
        click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path)),
        click.option("--seed", type=click.IntRange(min=0), default=None),
        click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None),
        click.option("--parallel-folds", type=click.IntRange(min=1), default=None),
        click.option("--feature-mode", type=click.Choice(FEATURE_MODES), default=None),
        click.option("--standardize", type=click.Choice(STANDARDIZE_SCOPES), default=None),
        click.option(
            "--image-dir", type=click.Path(exists=True, path_type=Path), default=None
        ),
        click.option(
            "--features-table", type=click.Path(exists=True, path_type=Path), default=None
        ),
        click.option("--k", type=click.IntRange(min=2), default=None),
        click.option("--overwrite", is_flag=True, default=False),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _build_config(config_path, **overrides):
    if not overrides.get("overwrite"):
        overrides["overwrite"] = None  # flag absent: keep the config-file value
    cfg = load_run_config(config_path, overrides)
    for line in format_effective_config(cfg):
        click.echo(f"config: {line}")
    return cfg


@cli.command("run-cv")
@_run_options
def run_cv_command(config_path, **overrides) -> None:
    """Run the full k-fold cross-validation protocol."""
    cfg = _build_config(config_path, **overrides)
    report = run_cv(cfg)
    click.echo(f"wrote report for {len(report.folds)} folds to {cfg.out_dir}")
    for name, value in zip(("accuracy", "auc", "loss", "precision", "recall", "f1"),
                           report.averages):
        click.echo(f"average {name}: {value:.6f}")


@cli.command("train-fold")
@click.option("--fold-index", type=click.IntRange(min=1), required=True)
@_run_options
def train_fold_command(fold_index, config_path, **overrides) -> None:
    """Train and score a single fold of the deterministic split."""
    cfg = _build_config(config_path, **overrides)
    metrics = run_single_fold(cfg, fold_index)
    for key, value in asdict(metrics).items():
        click.echo(f"{key}: {value}")


@cli.command("extract-features")
@click.option("--image-dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", "out_table", type=click.Path(path_type=Path), required=True)
@click.option("--labels", "labels_table", type=click.Path(exists=True, path_type=Path))
@click.option("--levels", type=click.IntRange(min=2), default=32, show_default=True)
@click.option("--tamura-max-k", type=click.IntRange(min=1), default=5, show_default=True)
def extract_features_command(image_dir, out_table, labels_table, levels, tamura_max_k) -> None:
    """Compute the 13 canonical features for every image in a directory."""
    cfg = FeatureConfig(levels=levels, tamura_max_k=tamura_max_k)
    processed, failed = extract_features_cmd(
        image_dir, out_table, feature_cfg=cfg, labels_table=labels_table
    )
    click.echo(f"processed={processed} failed={failed} -> {out_table}")


@cli.command("evaluate")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--image-dir", type=click.Path(exists=True, path_type=Path), required=True)
@click.option(
    "--features-table", type=click.Path(exists=True, path_type=Path), required=True
)
@click.option("--feature-mode", type=click.Choice(FEATURE_MODES), default="shipped")
def evaluate_command(checkpoint, image_dir, features_table, feature_mode) -> None:
    """Score a saved checkpoint on a dataset."""
    metrics = evaluate_cmd(checkpoint, image_dir, features_table, feature_mode=feature_mode)
    for key, value in asdict(metrics).items():
        click.echo(f"{key}: {value}")


@cli.command("report")
@click.option("--out", "out_dir", type=click.Path(exists=True, path_type=Path), required=True)
def report_command(out_dir) -> None:
    """Rebuild report files from per-fold metrics under an output directory."""
    report = rebuild_report(out_dir)
    click.echo(f"rebuilt report from {len(report.folds)} folds in {out_dir}")


def main(argv: list[str] | None = None) -> int:
    """Entry point with the documented exit codes: 0 success, 1 usage or
    configuration error, 2 data error, 3 training divergence."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except PipelineError as exc:
        click.echo(f"error: {exc}", err=True)
        return exit_code_for(exc)
    except ValueError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
