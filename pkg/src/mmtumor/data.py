"""Dataset loading, class balancing, standardization, and fold splitting."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import DataError
from .features import FEATURE_NAMES, NUM_FEATURES, FeatureVector
from .seeding import STREAM_BALANCE, STREAM_SPLIT, rng_for

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")

# ITU-R BT.601 luminance weights for RGB -> grayscale.
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Sample:
    """One scan: image grid, its 13 summary features, and the class label."""

    id: str
    image: np.ndarray
    features: FeatureVector
    label: int

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise DataError(f"sample {self.id!r}: label must be 0 or 1, got {self.label!r}")
        if self.image.ndim != 2:
            raise DataError(
                f"sample {self.id!r}: image must be 2-D, got shape {self.image.shape}"
            )
        if not np.all(np.isfinite(self.image)):
            raise DataError(f"sample {self.id!r}: image contains non-finite values")


@dataclass(frozen=True)
class Dataset:
    """Ordered, immutable collection of samples with unique ids."""

    samples: tuple[Sample, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        seen: set[str] = set()
        for sample in self.samples:
            if sample.id in seen:
                raise DataError(f"duplicate sample id {sample.id!r}")
            seen.add(sample.id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.samples)

    @property
    def class_counts(self) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for sample in self.samples:
            counts[sample.label] += 1
        return counts

    def ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def feature_matrix(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, NUM_FEATURES))
        return np.stack([s.features.as_array() for s in self.samples])

    def subset(self, ids: Sequence[str]) -> "Dataset":
        """Samples with the given ids, in this dataset's order."""
        wanted = set(ids)
        missing = wanted - set(self.ids())
        if missing:
            raise DataError(f"unknown sample ids: {sorted(missing)[:5]}")
        return Dataset(tuple(s for s in self.samples if s.id in wanted))


@dataclass(frozen=True)
class DatasetSchema:
    """Expected table columns and image geometry."""

    image_size: tuple[int, int] = (240, 240)
    id_column: str = "id"
    label_column: str = "label"
    feature_columns: tuple[str, ...] = FEATURE_NAMES


@dataclass(frozen=True)
class ScalerParams:
    """Per-feature location/scale fitted by standardize_features."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != (NUM_FEATURES,) or std.shape != (NUM_FEATURES,):
            raise DataError(
                f"scaler params must have {NUM_FEATURES} entries, "
                f"got {mean.shape} and {std.shape}"
            )
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise DataError("scaler params must be finite")
        if np.any(std <= 0):
            bad = FEATURE_NAMES[int(np.argmax(std <= 0))]
            raise DataError(f"scaler std must be positive, feature {bad!r} is not")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


@dataclass(frozen=True)
class FoldSplit:
    """One cross-validation fold; fold_index counts from 1."""

    fold_index: int
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.fold_index < 1:
            raise DataError(f"fold_index must be >= 1, got {self.fold_index}")
        overlap = set(self.train_ids) & set(self.val_ids)
        if overlap:
            raise DataError(f"train/val overlap: {sorted(overlap)[:5]}")


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """Collapse an RGB(A) image to real-valued luminance; pass 2-D through."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        return arr[:, :, :3] @ _LUMA_WEIGHTS
    raise DataError(f"unsupported image shape {arr.shape}")


def load_image(path: Path, expected_size: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as img:
        gray = to_grayscale(np.asarray(img))
    if gray.shape != expected_size:
        raise DataError(
            f"image {path.name!r} has size {gray.shape}, expected {expected_size}"
        )
    return gray.astype(np.float32)


def _find_image(image_dir: Path, sample_id: str) -> Path:
    for ext in IMAGE_EXTENSIONS:
        candidate = image_dir / f"{sample_id}{ext}"
        if candidate.is_file():
            return candidate
    raise DataError(f"no image file for id {sample_id!r} under {image_dir}")


def _parse_cell(value: str | None, row: int, column: str) -> float:
    if value is None or value.strip() == "":
        raise DataError(f"row {row}: missing value in column {column!r}")
    try:
        parsed = float(value)
    except ValueError:
        raise DataError(
            f"row {row}: non-numeric value {value!r} in column {column!r}"
        ) from None
    if not np.isfinite(parsed):
        raise DataError(f"row {row}: non-finite value in column {column!r}")
    return parsed


def load_feature_table(features_table: Path, schema: DatasetSchema) -> list[dict]:
    """Parse the delimited feature table into per-row records.

    Rows are returned in file order as dicts with keys ``id``, ``label``,
    and ``features`` (13-vector in canonical order). Row numbers in error
    messages count data rows from 1.
    """
    with open(features_table, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{features_table}: empty table, header row required")
        required = {schema.id_column, schema.label_column, *schema.feature_columns}
        missing = required - set(reader.fieldnames)
        if missing:
            raise DataError(f"{features_table}: missing columns {sorted(missing)}")
        records = []
        for row_num, row in enumerate(reader, start=1):
            sample_id = (row.get(schema.id_column) or "").strip()
            if not sample_id:
                raise DataError(f"row {row_num}: missing value in column {schema.id_column!r}")
            label_raw = _parse_cell(row.get(schema.label_column), row_num, schema.label_column)
            if label_raw not in (0.0, 1.0):
                raise DataError(
                    f"row {row_num}: label must be 0 or 1, got {row[schema.label_column]!r}"
                )
            values = [
                _parse_cell(row.get(col), row_num, col) for col in schema.feature_columns
            ]
            records.append(
                {"id": sample_id, "label": int(label_raw), "features": np.array(values)}
            )
    return records


def load_dataset(
    image_dir: Path | str, features_table: Path | str, schema: DatasetSchema | None = None
) -> Dataset:
    """Join the feature table with its image directory, row order preserved."""
    schema = schema or DatasetSchema()
    image_dir = Path(image_dir)
    records = load_feature_table(Path(features_table), schema)
    samples = []
    for record in records:
        path = _find_image(image_dir, record["id"])
        image = load_image(path, schema.image_size)
        samples.append(
            Sample(
                id=record["id"],
                image=image,
                features=FeatureVector.from_array(record["features"]),
                label=record["label"],
            )
        )
    return Dataset(tuple(samples))


def balance_classes(ds: Dataset, seed: int) -> Dataset:
    """Drop uniformly chosen majority-class samples until counts match."""
    counts = ds.class_counts
    if counts[0] == 0 or counts[1] == 0:
        raise DataError(f"cannot balance: class counts {counts}")
    if counts[0] == counts[1]:
        return ds
    majority = 0 if counts[0] > counts[1] else 1
    excess = counts[majority] - counts[1 - majority]
    majority_ids = [s.id for s in ds.samples if s.label == majority]
    rng = rng_for(seed, STREAM_BALANCE)
    dropped = set(rng.choice(len(majority_ids), size=excess, replace=False).tolist())
    drop_ids = {majority_ids[i] for i in dropped}
    return Dataset(tuple(s for s in ds.samples if s.id not in drop_ids))


def fit_scaler(matrix: np.ndarray) -> ScalerParams:
    """Population mean/std per column; constant columns are rejected."""
    matrix = np.asarray(matrix, dtype=np.float64)
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    for j, sigma in enumerate(std):
        if sigma == 0.0:
            raise DataError(f"feature {FEATURE_NAMES[j]!r} is constant, cannot standardize")
    return ScalerParams(mean=mean, std=std)


def apply_scaler(features: FeatureVector, params: ScalerParams) -> FeatureVector:
    return FeatureVector.from_array((features.as_array() - params.mean) / params.std)


def _with_features(ds: Dataset, matrix: np.ndarray) -> Dataset:
    samples = tuple(
        Sample(id=s.id, image=s.image, features=FeatureVector.from_array(row), label=s.label)
        for s, row in zip(ds.samples, matrix)
    )
    return Dataset(samples)


def standardize_features(ds: Dataset) -> tuple[Dataset, ScalerParams]:
    """Rescale every feature column to mean 0, variance 1 (population)."""
    if len(ds) == 0:
        raise DataError("cannot standardize an empty dataset")
    matrix = ds.feature_matrix()
    params = fit_scaler(matrix)
    return _with_features(ds, (matrix - params.mean) / params.std), params


def transform_dataset(ds: Dataset, params: ScalerParams) -> Dataset:
    """Apply previously fitted scaler params to every sample."""
    return _with_features(ds, (ds.feature_matrix() - params.mean) / params.std)


def _fold_sizes(class_totals: Sequence[int], k: int) -> list[list[int]]:
    """Per-class validation counts for each fold.

    Each class contributes floor(n/k) to every fold; the remainder goes
    one sample at a time to the folds with the smallest running totals
    (ties break toward the lower fold index), keeping overall fold sizes
    within one sample of each other.
    """
    sizes = [[total // k] * k for total in class_totals]
    running = [sum(sizes[c][f] for c in range(len(class_totals))) for f in range(k)]
    for c, total in enumerate(class_totals):
        for _ in range(total % k):
            f = min(range(k), key=lambda i: (running[i], i))
            sizes[c][f] += 1
            running[f] += 1
    return sizes


def stratified_kfold(ds: Dataset, k: int, seed: int) -> list[FoldSplit]:
    """Partition ids into k folds preserving class proportions."""
    if k < 2:
        raise DataError(f"k must be >= 2, got {k}")
    by_class: dict[int, list[str]] = {0: [], 1: []}
    for sample in ds.samples:
        by_class[sample.label].append(sample.id)
    for label, ids in sorted(by_class.items()):
        if 0 < len(ids) < k:
            raise DataError(f"class {label} has {len(ids)} samples, fewer than k={k}")
    class_labels = sorted(label for label, ids in by_class.items() if ids)
    rng = rng_for(seed, STREAM_SPLIT)
    shuffled = {}
    for label in class_labels:
        ids = list(by_class[label])
        rng.shuffle(ids)
        shuffled[label] = ids
    sizes = _fold_sizes([len(shuffled[label]) for label in class_labels], k)
    val_sets: list[list[str]] = [[] for _ in range(k)]
    for c, label in enumerate(class_labels):
        cursor = 0
        for f in range(k):
            val_sets[f].extend(shuffled[label][cursor : cursor + sizes[c][f]])
            cursor += sizes[c][f]
    all_ids = ds.ids()
    splits = []
    for f in range(k):
        val = set(val_sets[f])
        splits.append(
            FoldSplit(
                fold_index=f + 1,
                train_ids=tuple(i for i in all_ids if i not in val),
                val_ids=tuple(i for i in all_ids if i in val),
            )
        )
    return splits


def write_manifest(ds: Dataset, splits: Sequence[FoldSplit], path: Path | str) -> None:
    """Audit table: one row per sample with its validation-fold assignment."""
    fold_of: dict[str, int] = {}
    for split in splits:
        for sample_id in split.val_ids:
            fold_of[sample_id] = split.fold_index
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "fold"])
        for sample in ds.samples:
            writer.writerow([sample.id, sample.label, fold_of.get(sample.id, "")])


def write_feature_table(
    ids: Sequence[str],
    matrix: np.ndarray,
    path: Path | str,
    labels: Sequence[int] | None = None,
) -> None:
    """Write id + 13 canonical feature columns (+ optional label) as text."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != (len(ids), NUM_FEATURES):
        raise DataError(
            f"feature matrix shape {matrix.shape} does not match {len(ids)} ids"
        )
    header = ["id", *FEATURE_NAMES]
    if labels is not None:
        header.append("label")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, sample_id in enumerate(ids):
            row = [sample_id, *(repr(float(v)) for v in matrix[i])]
            if labels is not None:
                row.append(labels[i])
            writer.writerow(row)
