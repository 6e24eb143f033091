"""First- and second-order texture features of grayscale images.

The pipeline describes every scan by 13 scalars: five first-order
statistics of the intensity histogram (mean, variance, standard
deviation, skewness, kurtosis) and eight second-order descriptors
(GLCM entropy, contrast, energy, dissimilarity, correlation, ASM,
homogeneity, plus Tamura coarseness). Conventions used throughout:

* population variance (divide by N), Pearson non-excess kurtosis
  (a normal distribution scores 3), natural log for entropy;
* GLCMs are accumulated symmetrically at distance 1 for the four
  offsets 0/45/90/135 degrees and the seven GLCM statistics are
  averaged over those offsets;
* Tamura coarseness picks, per pixel, the power-of-two window size
  whose shifted-average difference is largest (ties to the smallest
  window) and averages that size over pixels with full neighborhoods.

All functions are pure and safe to call from parallel workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FEATURE_NAMES: tuple[str, ...] = (
    "mean",
    "variance",
    "standard_deviation",
    "skewness",
    "kurtosis",
    "entropy",
    "contrast",
    "energy",
    "dissimilarity",
    "correlation",
    "coarseness",
    "asm",
    "homogeneity",
)
NUM_FEATURES = len(FEATURE_NAMES)

GLCM_FEATURE_NAMES: tuple[str, ...] = (
    "entropy",
    "contrast",
    "energy",
    "dissimilarity",
    "correlation",
    "asm",
    "homogeneity",
)

# Offsets (dy, dx) at distance 1: 0, 45, 90, 135 degrees.
DEFAULT_OFFSETS: tuple[tuple[int, int], ...] = ((0, 1), (-1, 1), (-1, 0), (-1, -1))

_CORRELATION_SIGMA_FLOOR = 1e-12
_GLCM_SUM_TOL = 1e-9


@dataclass(frozen=True)
class FeatureVector:
    """The 13 texture features of one image, in canonical order."""

    mean: float
    variance: float
    standard_deviation: float
    skewness: float
    kurtosis: float
    entropy: float
    contrast: float
    energy: float
    dissimilarity: float
    correlation: float
    coarseness: float
    asm: float
    homogeneity: float

    def __post_init__(self):
        values = self.as_array()
        if not np.all(np.isfinite(values)):
            bad = [FEATURE_NAMES[i] for i in np.flatnonzero(~np.isfinite(values))]
            raise ValueError(f"non-finite feature value(s): {', '.join(bad)}")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, values: Iterable[float]) -> "FeatureVector":
        arr = np.asarray(list(values), dtype=np.float64)
        if arr.shape != (NUM_FEATURES,):
            raise ValueError(f"expected {NUM_FEATURES} feature values, got shape {arr.shape}")
        return cls(**{name: float(v) for name, v in zip(FEATURE_NAMES, arr)})


@dataclass(frozen=True)
class FeatureConfig:
    """Parameters of the extraction pipeline.

    ``levels`` is the gray-level quantization for GLCMs; ``offsets``
    the co-occurrence displacements averaged over; ``tamura_max_k``
    the largest window exponent considered by coarseness (clamped
    down automatically for images too small to support it).
    """

    levels: int = 32
    offsets: tuple[tuple[int, int], ...] = DEFAULT_OFFSETS
    tamura_max_k: int = 5
    # Disambiguation recorded with every emitted feature table: the
    # "entropy" column is GLCM entropy, not histogram entropy.
    entropy_kind: str = field(default="glcm", repr=False)

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.tamura_max_k < 1:
            raise ValueError(f"tamura_max_k must be >= 1, got {self.tamura_max_k}")
        if not self.offsets:
            raise ValueError("at least one GLCM offset is required")


@dataclass(frozen=True)
class QuantizedImage:
    """Integer gray levels in [0, levels)."""

    grid: np.ndarray
    levels: int


@dataclass(frozen=True)
class Glcm:
    """Symmetric, normalized gray-level co-occurrence matrix."""

    probs: np.ndarray  # (levels, levels), entries sum to 1
    offset: tuple[int, int]


def _as_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"expected a non-empty 2-D grayscale image, got shape {arr.shape}")
    return arr


def quantize(image: np.ndarray, levels: int) -> QuantizedImage:
    """Discretize pixel intensities in [0, 255] to ``levels`` gray levels.

    Cell value is floor(pixel * levels / 256), clamped to levels - 1 so
    that a pixel of exactly 255 maps to the top level.
    """
    if levels < 2:
        raise ValueError(f"levels must be >= 2, got {levels}")
    arr = _as_image(image)
    grid = np.floor(arr * levels / 256.0).astype(np.int64)
    np.clip(grid, 0, levels - 1, out=grid)
    return QuantizedImage(grid=grid, levels=levels)


def first_order(image: np.ndarray) -> tuple[float, float, float, float, float]:
    """Histogram statistics: (mean, variance, std, skewness, kurtosis).

    Population convention throughout; kurtosis is non-excess. A constant
    image (sigma = 0) returns skewness = kurtosis = 0.
    """
    pixels = _as_image(image).ravel()
    mean = float(pixels.mean())
    centered = pixels - mean
    variance = float(np.mean(centered**2))
    std = float(np.sqrt(variance))
    if std == 0.0:
        return mean, 0.0, 0.0, 0.0, 0.0
    z = centered / std
    skewness = float(np.mean(z**3))
    kurtosis = float(np.mean(z**4))
    return mean, variance, std, skewness, kurtosis


def compute_glcm(q: QuantizedImage, offset: tuple[int, int]) -> Glcm:
    """Co-occurrence probabilities of gray-level pairs at ``offset``.

    Every in-bounds pixel pair (p, p + offset) contributes to both
    (i, j) and (j, i), so the matrix is symmetric by construction;
    counts are normalized by the total accumulated.
    """
    dy, dx = offset
    if dy == 0 and dx == 0:
        raise ValueError("offset must be non-zero")
    grid = q.grid
    h, w = grid.shape
    if abs(dy) >= h or abs(dx) >= w:
        raise ValueError(f"offset {offset} larger than image {grid.shape}")

    # Source window and its displaced counterpart.
    ys = slice(max(0, -dy), h - max(0, dy))
    xs = slice(max(0, -dx), w - max(0, dx))
    yd = slice(max(0, dy), h + min(0, dy))
    xd = slice(max(0, dx), w + min(0, dx))
    a = grid[ys, xs].ravel()
    b = grid[yd, xd].ravel()

    levels = q.levels
    counts = np.bincount(a * levels + b, minlength=levels * levels).reshape(levels, levels)
    counts = counts + counts.T
    total = counts.sum()
    if total == 0:
        raise ValueError(f"offset {offset} leaves no pixel pairs in image {grid.shape}")
    return Glcm(probs=counts / total, offset=(dy, dx))


def glcm_features(g: Glcm) -> tuple[float, float, float, float, float, float, float]:
    """Seven Haralick-style statistics of one GLCM.

    Returns (entropy, contrast, energy, dissimilarity, correlation,
    asm, homogeneity). Entropy uses the natural log with 0*ln(0) := 0;
    correlation of a (near-)degenerate matrix is defined as 1.
    """
    p = np.asarray(g.probs, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ValueError(f"GLCM must be square, got shape {p.shape}")
    if abs(p.sum() - 1.0) > _GLCM_SUM_TOL:
        raise ValueError(f"GLCM entries sum to {p.sum()!r}, expected 1")

    levels = p.shape[0]
    idx = np.arange(levels, dtype=np.float64)
    i = idx[:, None]
    j = idx[None, :]
    diff = i - j

    contrast = float(np.sum(diff**2 * p))
    dissimilarity = float(np.sum(np.abs(diff) * p))
    homogeneity = float(np.sum(p / (1.0 + diff**2)))
    asm = float(np.sum(p**2))
    energy = float(np.sqrt(asm))

    nonzero = p[p > 0]
    entropy = float(-np.sum(nonzero * np.log(nonzero)))

    px = p.sum(axis=1)
    py = p.sum(axis=0)
    mu_x = float(np.sum(idx * px))
    mu_y = float(np.sum(idx * py))
    sigma_x = float(np.sqrt(np.sum((idx - mu_x) ** 2 * px)))
    sigma_y = float(np.sqrt(np.sum((idx - mu_y) ** 2 * py)))
    if sigma_x * sigma_y < _CORRELATION_SIGMA_FLOOR:
        correlation = 1.0
    else:
        correlation = float(np.sum((i - mu_x) * (j - mu_y) * p) / (sigma_x * sigma_y))

    return entropy, contrast, energy, dissimilarity, correlation, asm, homogeneity


def max_tamura_k(height: int, width: int) -> int:
    """Largest window exponent with a non-empty valid-pixel region."""
    # Level k needs rows/cols in [2^k, dim - 2^k], so dim >= 2^(k+1).
    return max(int(np.floor(np.log2(min(height, width)))) - 1, 0)


def tamura_coarseness(image: np.ndarray, max_k: int = 5) -> float:
    """Tamura's coarseness: dominant texture scale as a mean window size.

    For every pixel and k in [1, max_k], averages over the centered
    2^k x 2^k neighborhood are compared between positions shifted by
    +/- 2^(k-1) horizontally and vertically; the k with the largest
    absolute difference wins (ties to the smallest k) and the result
    is the mean of 2^k* over all pixels whose neighborhoods fit at
    every level. Requires min(H, W) >= 2^(max_k + 1) so that region
    is non-empty.

    Implemented with summed-area tables; equivalent to the direct
    per-pixel evaluation.
    """
    arr = _as_image(image)
    if max_k < 1:
        raise ValueError(f"max_k must be >= 1, got {max_k}")
    h, w = arr.shape
    margin = 1 << max_k
    if h < 2 * margin or w < 2 * margin:
        raise ValueError(
            f"image {arr.shape} too small for max_k={max_k}; "
            f"needs at least {2 * margin} pixels in each dimension"
        )

    integral = np.zeros((h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(arr, axis=0), axis=1, out=integral[1:, 1:])

    def window_means(size: int) -> np.ndarray:
        # means[r, c] = mean of arr[r : r + size, c : c + size]
        s = (
            integral[size:, size:]
            - integral[:-size, size:]
            - integral[size:, :-size]
            + integral[:-size, :-size]
        )
        return s / (size * size)

    # Valid pixels: rows/cols in [margin, dim - margin] inclusive.
    r0, r1 = margin, h - margin
    c0, c1 = margin, w - margin
    best = np.empty((max_k, r1 - r0 + 1, c1 - c0 + 1), dtype=np.float64)
    for k in range(1, max_k + 1):
        half = 1 << (k - 1)
        means = window_means(2 * half)
        # A_k centered at (r, c) is means[r - half, c - half].
        e_horiz = np.abs(
            means[r0 - half : r1 - half + 1, c0 : c1 + 1]
            - means[r0 - half : r1 - half + 1, c0 - 2 * half : c1 - 2 * half + 1]
        )
        e_vert = np.abs(
            means[r0 : r1 + 1, c0 - half : c1 - half + 1]
            - means[r0 - 2 * half : r1 - 2 * half + 1, c0 - half : c1 - half + 1]
        )
        best[k - 1] = np.maximum(e_horiz, e_vert)

    k_star = np.argmax(best, axis=0) + 1  # first max -> smallest k on ties
    return float(np.mean(np.exp2(k_star)))


def extract_feature_vector(image: np.ndarray, cfg: FeatureConfig | None = None) -> FeatureVector:
    """All 13 features of one grayscale image, in canonical order."""
    cfg = cfg or FeatureConfig()
    arr = _as_image(image)

    mean, variance, std, skewness, kurtosis = first_order(arr)

    q = quantize(arr, cfg.levels)
    per_offset = np.array(
        [glcm_features(compute_glcm(q, offset)) for offset in cfg.offsets], dtype=np.float64
    )
    entropy, contrast, energy, dissimilarity, correlation, asm, homogeneity = per_offset.mean(
        axis=0
    )

    h, w = arr.shape
    effective_k = min(cfg.tamura_max_k, max_tamura_k(h, w))
    if effective_k < 1:
        raise ValueError(f"image {arr.shape} too small for coarseness (needs >= 4x4)")
    coarseness = tamura_coarseness(arr, max_k=effective_k)

    return FeatureVector(
        mean=mean,
        variance=variance,
        standard_deviation=std,
        skewness=skewness,
        kurtosis=kurtosis,
        entropy=float(entropy),
        contrast=float(contrast),
        energy=float(energy),
        dissimilarity=float(dissimilarity),
        correlation=float(correlation),
        coarseness=coarseness,
        asm=float(asm),
        homogeneity=float(homogeneity),
    )


def extract_feature_matrix(
    images: Sequence[np.ndarray], cfg: FeatureConfig | None = None
) -> np.ndarray:
    """Stack ``extract_feature_vector`` over many images into (N, 13)."""
    cfg = cfg or FeatureConfig()
    return np.array([extract_feature_vector(img, cfg).as_array() for img in images])
