"""Deterministic synthetic corpus: bright-blob scans vs near-blank scans.

The two classes are separable from either input alone (the blob raises the
mean-intensity feature and is visible to the image head), which makes the
corpus a fast end-to-end smoke signal for the whole pipeline.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import Dataset, Sample, write_feature_table
from .features import FeatureConfig, extract_feature_vector


def _blank_image(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    return rng.uniform(0.0, 40.0, size=size)


def _blob_image(rng: np.random.Generator, size: tuple[int, int]) -> np.ndarray:
    h, w = size
    image = rng.uniform(0.0, 40.0, size=size)
    cy = rng.uniform(0.3 * h, 0.7 * h)
    cx = rng.uniform(0.3 * w, 0.7 * w)
    radius = rng.uniform(0.12, 0.2) * min(h, w)
    yy, xx = np.mgrid[0:h, 0:w]
    bump = 200.0 * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2)))
    return np.clip(image + bump, 0.0, 255.0)


def make_blob_dataset(
    n_samples: int = 200,
    image_size: tuple[int, int] = (64, 64),
    seed: int = 0,
    feature_config: FeatureConfig | None = None,
) -> Dataset:
    """Balanced in-memory dataset: even index = blank (0), odd = blob (1).

    Images are quantized to whole intensities so that a corpus written to
    disk as 8-bit files and reloaded yields identical samples.
    """
    if n_samples < 2 or n_samples % 2:
        raise ValueError(f"n_samples must be even and >= 2, got {n_samples}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_samples):
        label = i % 2
        raw = _blob_image(rng, image_size) if label else _blank_image(rng, image_size)
        image = np.floor(raw).astype(np.float32)
        features = extract_feature_vector(np.asarray(image, dtype=np.float64), feature_config)
        samples.append(
            Sample(id=f"syn_{i:04d}", image=image, features=features, label=label)
        )
    return Dataset(tuple(samples))


def write_blob_corpus(
    out_dir: Path | str,
    n_samples: int = 200,
    image_size: tuple[int, int] = (64, 64),
    seed: int = 0,
) -> tuple[Path, Path]:
    """Materialize the corpus as an image directory + feature table."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    ds = make_blob_dataset(n_samples=n_samples, image_size=image_size, seed=seed)
    for sample in ds:
        Image.fromarray(sample.image.astype(np.uint8)).save(image_dir / f"{sample.id}.png")
    table = out_dir / "features.csv"
    write_feature_table(ds.ids(), ds.feature_matrix(), table, labels=ds.labels().tolist())
    return image_dir, table
