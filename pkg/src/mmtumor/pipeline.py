"""End-to-end orchestration: load, balance, standardize, split, train, report."""

from __future__ import annotations

import json
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch
import yaml

from .data import (
    Dataset,
    DatasetSchema,
    FoldSplit,
    Sample,
    fit_scaler,
    load_dataset,
    balance_classes,
    standardize_features,
    stratified_kfold,
    transform_dataset,
    write_feature_table,
    write_manifest,
)
from .errors import ConfigError, DataError, EvaluationError
from .features import FeatureConfig, extract_feature_vector
from .metrics import (
    CvReport,
    FoldMetrics,
    aggregate,
    fold_metrics,
    write_plot_data,
    write_report_csv,
    write_report_json,
)
from .model import (
    ModelSpec,
    load_checkpoint,
    save_checkpoint,
    spec_from_dict,
    spec_to_dict,
)
from .training import (
    TrainConfig,
    best_epoch_index,
    binary_cross_entropy,
    evaluate_probs,
    train_fold,
    write_history,
)

FEATURE_MODES = ("shipped", "regenerated")
STANDARDIZE_SCOPES = ("global", "per-fold")

DEFAULT_SEED = 42

_MANAGED_OUTPUTS = ("report.csv", "report.json", "plotdata.csv", "manifest.csv", "run_config.json")


@dataclass(frozen=True)
class RunConfig:
    """Full experiment description; defaults reproduce the reference protocol
    (balanced classes, global standardization, k = 10, the published
    optimizer settings)."""

    image_dir: Path | None = None
    features_table: Path | None = None
    out_dir: Path | None = None
    feature_mode: str = "shipped"
    balance: bool = True
    standardize: str = "global"
    k: int = 10
    seed: int = DEFAULT_SEED
    parallel_folds: int = 1
    overwrite: bool = False
    model: ModelSpec = ModelSpec()
    train: TrainConfig = TrainConfig(seed=DEFAULT_SEED)
    features: FeatureConfig = FeatureConfig()

    def __post_init__(self) -> None:
        if self.feature_mode not in FEATURE_MODES:
            raise ConfigError(
                f"feature_mode must be one of {FEATURE_MODES}, got {self.feature_mode!r}"
            )
        if self.standardize not in STANDARDIZE_SCOPES:
            raise ConfigError(
                f"standardize must be one of {STANDARDIZE_SCOPES}, got {self.standardize!r}"
            )
        if self.k < 2:
            raise ConfigError(f"k must be >= 2, got {self.k}")
        if self.parallel_folds < 1:
            raise ConfigError(f"parallel_folds must be >= 1, got {self.parallel_folds}")
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    def schema(self) -> DatasetSchema:
        h, w, _ = self.model.image_input_shape
        return DatasetSchema(image_size=(h, w))


_RUN_KEYS = {
    "out_dir",
    "feature_mode",
    "balance",
    "standardize",
    "k",
    "seed",
    "parallel_folds",
    "overwrite",
}
_DATASET_KEYS = {"image_dir", "features_table"}
_TRAIN_KEYS = {
    "learning_rate",
    "batch_size",
    "max_epochs",
    "early_stop_min_delta",
    "early_stop_patience",
    "restore_best",
}
_FEATURE_KEYS = {"levels", "tamura_max_k"}


def _check_keys(section: str, mapping: Mapping[str, Any], allowed: set[str]) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {sorted(unknown)}")


def load_run_config(
    path: Path | str | None = None, overrides: Mapping[str, Any] | None = None
) -> RunConfig:
    """Parse the config file (all keys optional) and apply CLI overrides."""
    raw: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        raw = loaded
    _check_keys("top-level", raw, {"dataset", "run", "model", "training", "features"})

    dataset = dict(raw.get("dataset") or {})
    run = dict(raw.get("run") or {})
    model = dict(raw.get("model") or {})
    training = dict(raw.get("training") or {})
    features = dict(raw.get("features") or {})
    _check_keys("dataset", dataset, _DATASET_KEYS)
    _check_keys("run", run, _RUN_KEYS)
    _check_keys("training", training, _TRAIN_KEYS | {"seed"})
    _check_keys("features", features, _FEATURE_KEYS)
    if "seed" in training:
        raise ConfigError("set the master seed under run.seed, not training.seed")

    merged: dict[str, Any] = {**dataset, **run}
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    _check_keys("override", merged, _DATASET_KEYS | _RUN_KEYS)

    seed = int(merged.get("seed", DEFAULT_SEED))
    kwargs: dict[str, Any] = {
        "model": spec_from_dict(model),
        "train": TrainConfig(seed=seed, **training),
        "features": FeatureConfig(**features),
        "seed": seed,
    }
    for key in ("image_dir", "features_table", "out_dir"):
        if merged.get(key) is not None:
            kwargs[key] = Path(merged[key])
    for key in ("feature_mode", "balance", "standardize", "k", "parallel_folds", "overwrite"):
        if key in merged:
            kwargs[key] = merged[key]
    return RunConfig(**kwargs)


def effective_config_dict(cfg: RunConfig) -> dict[str, Any]:
    """Every effective setting, defaults included, as plain data."""
    return {
        "dataset": {
            "image_dir": None if cfg.image_dir is None else str(cfg.image_dir),
            "features_table": None if cfg.features_table is None else str(cfg.features_table),
        },
        "run": {
            "out_dir": None if cfg.out_dir is None else str(cfg.out_dir),
            "feature_mode": cfg.feature_mode,
            "balance": cfg.balance,
            "standardize": cfg.standardize,
            "k": cfg.k,
            "seed": cfg.seed,
            "parallel_folds": cfg.parallel_folds,
            "overwrite": cfg.overwrite,
        },
        "model": spec_to_dict(cfg.model),
        "training": {key: getattr(cfg.train, key) for key in sorted(_TRAIN_KEYS)},
        "features": {
            "levels": cfg.features.levels,
            "tamura_max_k": cfg.features.tamura_max_k,
        },
    }


def format_effective_config(cfg: RunConfig) -> list[str]:
    lines = []
    for section, values in effective_config_dict(cfg).items():
        for key, value in values.items():
            lines.append(f"{section}.{key} = {value}")
    return lines


def _require_dataset_paths(cfg: RunConfig) -> tuple[Path, Path]:
    if cfg.image_dir is None or cfg.features_table is None:
        raise ConfigError("image_dir and features_table must be set (config or flags)")
    if cfg.out_dir is None:
        raise ConfigError("out_dir must be set (config or --out)")
    return cfg.image_dir, cfg.features_table


def _regenerate_features(ds: Dataset, feature_cfg: FeatureConfig) -> Dataset:
    samples = tuple(
        Sample(
            id=s.id,
            image=s.image,
            features=extract_feature_vector(np.asarray(s.image, dtype=np.float64), feature_cfg),
            label=s.label,
        )
        for s in ds.samples
    )
    return Dataset(samples)


def prepare_dataset(cfg: RunConfig) -> Dataset:
    """Load, optionally recompute features from pixels, optionally balance."""
    image_dir, features_table = _require_dataset_paths(cfg)
    ds = load_dataset(image_dir, features_table, cfg.schema())
    if cfg.feature_mode == "regenerated":
        ds = _regenerate_features(ds, cfg.features)
    if cfg.balance:
        ds = balance_classes(ds, cfg.seed)
    return ds


def _prepare_out_dir(cfg: RunConfig) -> Path:
    out = cfg.out_dir
    assert out is not None
    existing = [p.name for p in out.glob("fold_*")] + [
        name for name in _MANAGED_OUTPUTS if (out / name).exists()
    ]
    if existing:
        if not cfg.overwrite:
            raise ConfigError(
                f"output directory {out} already holds a run "
                f"({', '.join(sorted(existing)[:4])}, ...); pass --overwrite to replace it"
            )
        for path in out.glob("fold_*"):
            if path.is_dir():
                shutil.rmtree(path)
        for name in _MANAGED_OUTPUTS:
            (out / name).unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_fold(
    cfg: RunConfig,
    ds: Dataset,
    split: FoldSplit,
    scaler,
    out_dir: Path,
) -> FoldMetrics:
    fold_ds = ds
    fold_scaler = scaler
    if cfg.standardize == "per-fold":
        fold_scaler = fit_scaler(ds.subset(split.train_ids).feature_matrix())
        fold_ds = transform_dataset(ds, fold_scaler)
    model, history = train_fold(cfg.model, split, fold_ds, cfg.train)
    best = best_epoch_index(history)

    val = fold_ds.subset(split.val_ids)
    probs = evaluate_probs(model, val, cfg.train.batch_size)
    preds = (probs >= 0.5).astype(np.int64)
    metrics = fold_metrics(
        split.fold_index, val.labels(), preds, probs, loss=history[best].val_loss
    )

    fold_dir = out_dir / f"fold_{split.fold_index}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    write_history(history, fold_dir / "history.jsonl")
    save_checkpoint(
        fold_dir / "checkpoint.pt",
        model,
        scaler=fold_scaler,
        extra={
            "fold": split.fold_index,
            "best_epoch": history[best].epoch,
            "epochs_run": len(history),
            "seed": cfg.seed,
        },
    )
    with open(fold_dir / "metrics.json", "w") as fh:
        json.dump(asdict(metrics), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return metrics


def _write_report_files(report: CvReport, out_dir: Path) -> None:
    write_report_csv(report, out_dir / "report.csv")
    write_report_json(report, out_dir / "report.json")
    write_plot_data(report, out_dir / "plotdata.csv")


def run_cv(cfg: RunConfig) -> CvReport:
    """Execute the full cross-validation protocol and write all artifacts.

    Completed folds' outputs stay on disk even if a later fold fails.
    """
    torch.set_num_threads(1)
    _require_dataset_paths(cfg)
    out_dir = _prepare_out_dir(cfg)
    with open(out_dir / "run_config.json", "w") as fh:
        json.dump(effective_config_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")

    ds = prepare_dataset(cfg)
    scaler = None
    if cfg.standardize == "global":
        ds, scaler = standardize_features(ds)
    splits = stratified_kfold(ds, cfg.k, cfg.seed)
    write_manifest(ds, splits, out_dir / "manifest.csv")

    results: dict[int, FoldMetrics] = {}
    if cfg.parallel_folds > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallel_folds) as pool:
            futures = {
                split.fold_index: pool.submit(_run_fold, cfg, ds, split, scaler, out_dir)
                for split in splits
            }
            errors: list[tuple[int, BaseException]] = []
            for fold_index in sorted(futures):
                try:
                    results[fold_index] = futures[fold_index].result()
                except Exception as exc:  # noqa: BLE001 - re-raised below with context
                    errors.append((fold_index, exc))
            if errors:
                fold_index, exc = errors[0]
                raise _with_fold_context(exc, fold_index)
    else:
        for split in splits:
            try:
                results[split.fold_index] = _run_fold(cfg, ds, split, scaler, out_dir)
            except Exception as exc:
                raise _with_fold_context(exc, split.fold_index)

    report = aggregate([results[i] for i in sorted(results)])
    _write_report_files(report, out_dir)
    return report


def _with_fold_context(exc: BaseException, fold_index: int) -> BaseException:
    """Prefix the exception message with the fold that raised it."""
    if exc.args and isinstance(exc.args[0], str) and not exc.args[0].startswith("fold "):
        exc.args = (f"fold {fold_index}: {exc.args[0]}",) + exc.args[1:]
    return exc


def run_single_fold(cfg: RunConfig, fold_index: int) -> FoldMetrics:
    """Train exactly one fold of the deterministic split (parallel-safe
    across processes sharing the same config and output directory)."""
    torch.set_num_threads(1)
    if cfg.out_dir is None:
        raise ConfigError("out_dir must be set (config or --out)")
    _require_dataset_paths(cfg)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    ds = prepare_dataset(cfg)
    scaler = None
    if cfg.standardize == "global":
        ds, scaler = standardize_features(ds)
    splits = stratified_kfold(ds, cfg.k, cfg.seed)
    matching = [s for s in splits if s.fold_index == fold_index]
    if not matching:
        raise ConfigError(f"fold_index must be in [1, {cfg.k}], got {fold_index}")
    try:
        return _run_fold(cfg, ds, matching[0], scaler, cfg.out_dir)
    except Exception as exc:
        raise _with_fold_context(exc, fold_index)


def rebuild_report(out_dir: Path | str) -> CvReport:
    """Re-aggregate fold_*/metrics.json into the report files."""
    out_dir = Path(out_dir)
    rows = []
    for metrics_file in sorted(out_dir.glob("fold_*/metrics.json")):
        with open(metrics_file) as fh:
            rows.append(FoldMetrics(**json.load(fh)))
    if not rows:
        raise DataError(f"no fold_*/metrics.json files under {out_dir}")
    rows.sort(key=lambda m: m.fold)
    report = aggregate(rows)
    _write_report_files(report, out_dir)
    return report


IMAGE_GLOB_EXTENSIONS = (".png", ".jpg", ".jpeg")


def extract_features_cmd(
    image_dir: Path | str,
    out_table: Path | str,
    feature_cfg: FeatureConfig | None = None,
    labels_table: Path | str | None = None,
) -> tuple[int, int]:
    """Compute the 13 canonical features for every readable image.

    Unreadable or undersized files are reported and counted, not fatal.
    Returns (processed, failed). With labels_table (id,label rows), a
    label column is joined in so the output feeds training directly.
    """
    from PIL import Image

    from .data import to_grayscale

    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise DataError(f"image directory {image_dir} does not exist")
    feature_cfg = feature_cfg or FeatureConfig()

    labels_by_id: dict[str, int] | None = None
    if labels_table is not None:
        labels_by_id = {}
        import csv as _csv

        with open(labels_table, newline="") as fh:
            for row_num, row in enumerate(_csv.DictReader(fh), start=1):
                if "id" not in row or "label" not in row or row["id"] is None:
                    raise DataError(f"labels row {row_num}: need id and label columns")
                labels_by_id[row["id"]] = int(row["label"])

    files = sorted(
        p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_GLOB_EXTENSIONS
    )
    ids: list[str] = []
    rows: list[np.ndarray] = []
    labels: list[int] = []
    failed = 0
    failures: list[str] = []
    for path in files:
        try:
            with Image.open(path) as img:
                gray = to_grayscale(np.asarray(img))
            vector = extract_feature_vector(gray, feature_cfg).as_array()
            if labels_by_id is not None:
                if path.stem not in labels_by_id:
                    raise DataError(f"no label for id {path.stem!r}")
                labels.append(labels_by_id[path.stem])
        except Exception as exc:  # noqa: BLE001 - per-file failures are non-fatal
            failed += 1
            failures.append(f"{path.name}: {exc}")
            continue
        ids.append(path.stem)
        rows.append(vector)
    matrix = np.stack(rows) if rows else np.zeros((0, 13))
    write_feature_table(
        ids, matrix, out_table, labels=labels if labels_by_id is not None else None
    )
    for line in failures:
        print(f"warning: skipped {line}", flush=True)
    return len(ids), failed


def evaluate_cmd(
    checkpoint: Path | str,
    image_dir: Path | str,
    features_table: Path | str,
    feature_mode: str = "shipped",
    feature_cfg: FeatureConfig | None = None,
) -> FoldMetrics:
    """Load a checkpoint and score it on every row of the given table."""
    if feature_mode not in FEATURE_MODES:
        raise ConfigError(f"feature_mode must be one of {FEATURE_MODES}")
    torch.set_num_threads(1)
    model, scaler, extra = load_checkpoint(checkpoint)
    h, w, _ = model.spec.image_input_shape
    ds = load_dataset(image_dir, features_table, DatasetSchema(image_size=(h, w)))
    if len(ds) == 0:
        raise EvaluationError("evaluation dataset is empty")
    if ds.class_counts[0] == 0 or ds.class_counts[1] == 0:
        raise EvaluationError(
            f"evaluation needs both classes, got counts {ds.class_counts}"
        )
    if feature_mode == "regenerated":
        ds = _regenerate_features(ds, feature_cfg or FeatureConfig())
    if scaler is not None:
        ds = transform_dataset(ds, scaler)
    probs = evaluate_probs(model, ds)
    preds = (probs >= 0.5).astype(np.int64)
    loss = binary_cross_entropy(ds.labels(), probs)
    return fold_metrics(int(extra.get("fold", 0)), ds.labels(), preds, probs, loss=loss)
