"""Reconstruction-success evaluation.

SSIM follows the universal defaults: an 11x11 Gaussian window (sigma 1.5),
stability constants K1 = 0.01 and K2 = 0.03, mean over all fully-valid
window positions, and the mean over channels for multi-channel images.
Matching assigns every sample its nearest reconstruction under the
``1 - SSIM`` distance (an l2 alternative is available behind a flag);
samples that are essentially dark carry no structure to match and are
filtered out before success statistics.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    window_sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0  # L, in de-normalized image units

    def __post_init__(self):
        if self.dynamic_range <= 0:
            raise ParameterError("dynamic range must be positive")


@dataclass
class MatchResult:
    sample_id: int
    best_recon_id: int  # -1 when there are no reconstructions
    best_ssim: float
    distance: float
    kept: bool


@dataclass(frozen=True)
class CumulativeCurve:
    grid: tuple[float, ...]      # ascending SSIM-error points in [0, 1]
    fraction: tuple[float, ...]  # fraction of kept samples at error <= grid

    def value_at(self, error: float) -> float:
        idx = np.searchsorted(np.asarray(self.grid), error, side="right") - 1
        if idx < 0:
            return 0.0
        return self.fraction[idx]


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords**2) / (2 * sigma**2))
    window = np.outer(g, g)
    return window / window.sum()


def _ssim_single(a: np.ndarray, b: np.ndarray, cfg: SsimConfig) -> float:
    size = cfg.window_size
    if a.shape[0] < size or a.shape[1] < size:
        raise DimensionError(f"image {a.shape} smaller than the {size}x{size} window")
    w = _gaussian_window(size, cfg.window_sigma)
    wa = np.lib.stride_tricks.sliding_window_view(a, (size, size))
    wb = np.lib.stride_tricks.sliding_window_view(b, (size, size))
    mu_a = np.einsum("hwij,ij->hw", wa, w, optimize=True)
    mu_b = np.einsum("hwij,ij->hw", wb, w, optimize=True)
    ex_aa = np.einsum("hwij,ij->hw", wa * wa, w, optimize=True)
    ex_bb = np.einsum("hwij,ij->hw", wb * wb, w, optimize=True)
    ex_ab = np.einsum("hwij,ij->hw", wa * wb, w, optimize=True)
    var_a = ex_aa - mu_a**2
    var_b = ex_bb - mu_b**2
    cov = ex_ab - mu_a * mu_b
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2) /
                ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)))
    return float(ssim_map.mean())


def ssim(a: np.ndarray, b: np.ndarray, config: SsimConfig | None = None) -> float:
    """Structural similarity between two images of identical shape.

    Multi-channel images score as the mean of per-channel SSIM. Symmetric by
    construction; identical non-degenerate images score exactly 1.
    """
    cfg = config or SsimConfig()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_single(a, b, cfg)
    if a.ndim == 3:
        return float(np.mean([_ssim_single(a[..., c], b[..., c], cfg)
                              for c in range(a.shape[-1])]))
    raise DimensionError(f"expected 2-D or 3-D images, got shape {a.shape}")


def dark_filter(images: np.ndarray, dynamic_range: float = 1.0) -> np.ndarray:
    """Indices of samples with more than 10% non-zero pixels.

    Operates on raw-range images; values below 1/512 of the dynamic range
    count as zero. The 10% rule is strict: exactly 10% is filtered out.
    """
    images = np.asarray(images)
    flat = images.reshape(len(images), -1)
    nonzero = (np.abs(flat) > dynamic_range / 512.0).mean(axis=1)
    return np.flatnonzero(nonzero > 0.1)


def match(samples: np.ndarray, reconstructions: np.ndarray,
          config: SsimConfig | None = None, kept_indices=None,
          distance: str = "ssim") -> list[MatchResult]:
    """Assign every sample its minimum-distance reconstruction.

    Distance is ``1 - SSIM`` by default (``distance="l2"`` switches to mean
    squared error for sensitivity analysis; the reported ``best_ssim`` is
    still SSIM-based). Reconstructions may be reused across samples; ties
    break toward the lowest reconstruction index. With no reconstructions
    every sample scores the worst possible SSIM of -1.
    """
    if distance not in ("ssim", "l2"):
        raise ParameterError(f"unknown distance {distance!r}")
    cfg = config or SsimConfig()
    kept = set(range(len(samples))) if kept_indices is None else set(
        int(i) for i in kept_indices)
    results = []
    n_recon = len(reconstructions)
    for s, sample in enumerate(samples):
        if n_recon == 0:
            results.append(MatchResult(s, -1, -1.0, 2.0, s in kept))
            continue
        scores = np.array([ssim(sample, reconstructions[r], cfg)
                           for r in range(n_recon)])
        if distance == "ssim":
            dists = 1.0 - scores
        else:
            dists = np.array([float(((sample - reconstructions[r]) ** 2).mean())
                              for r in range(n_recon)])
        best = int(np.argmin(dists))  # argmin takes the first (lowest) index on ties
        results.append(MatchResult(s, best, float(scores[best]),
                                    float(dists[best]), s in kept))
    return results


def success_rate(matches: list[MatchResult], threshold: float = 0.8) -> float:
    """Fraction of kept samples whose best SSIM strictly exceeds the threshold.

    NaN when no samples survive the dark filter.
    """
    if not 0 < threshold < 1:
        raise ParameterError(f"threshold must be in (0, 1), got {threshold}")
    kept = [m for m in matches if m.kept]
    if not kept:
        return float("nan")
    return sum(m.best_ssim > threshold for m in kept) / len(kept)


def cumulative_curve(matches: list[MatchResult], grid=None) -> CumulativeCurve:
    """Fraction of kept samples with SSIM error (1 - best SSIM) <= each gridpoint."""
    if grid is None:
        grid = np.linspace(0.0, 1.0, 101)
    grid = np.asarray(grid, dtype=np.float64)
    if len(grid) == 0 or (np.diff(grid) < 0).any():
        raise ParameterError("grid must be ascending and nonempty")
    kept = [m for m in matches if m.kept]
    if not kept:
        return CumulativeCurve(tuple(grid), tuple(0.0 for _ in grid))
    errors = np.array([1.0 - m.best_ssim for m in kept])
    fraction = [(errors <= g).mean() for g in grid]
    return CumulativeCurve(tuple(grid), tuple(float(f) for f in fraction))


def curve_to_csv(curve: CumulativeCurve) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["ssim_error", "fraction"])
    for g, f in zip(curve.grid, curve.fraction):
        writer.writerow([repr(float(g)), repr(float(f))])
    return buf.getvalue()


def matches_to_csv(matches: list[MatchResult]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sample_id", "best_recon_id", "best_ssim", "kept"])
    for m in matches:
        writer.writerow([m.sample_id, m.best_recon_id, repr(m.best_ssim), int(m.kept)])
    return buf.getvalue()
