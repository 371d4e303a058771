"""Gaussian feature statistics, Frechet distance and rank correlation."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest, rankdata

from zooscout.errors import NumericalError, UsageError

logger = logging.getLogger(__name__)

COV_EPS = 1e-6


@dataclass
class GaussianStats:
    mean: np.ndarray  # (d,) float64
    cov: np.ndarray  # (d, d) float64
    count: int

    @property
    def dim(self):
        return self.mean.shape[0]


def fit_gaussian(features, eps=COV_EPS):
    """Sample mean and unbiased covariance of an (n, d) matrix, plus eps * I."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 2:
        raise UsageError(f"fit_gaussian needs at least 2 rows, got shape {features.shape}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (features.shape[0] - 1)
    cov = 0.5 * (cov + cov.T) + eps * np.eye(features.shape[1])
    return GaussianStats(mean, cov, features.shape[0])


def _eigvalsh(m, what):
    try:
        return np.linalg.eigvalsh(0.5 * (m + m.T))
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"eigendecomposition of {what} did not converge: {e}") from e


def sqrt_psd(m):
    """Symmetric square root with negative eigenvalues clamped to zero."""
    try:
        w, v = np.linalg.eigh(0.5 * (m + m.T))
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"eigendecomposition did not converge: {e}") from e
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(a, b):
    """Frechet distance between two Gaussians, via the symmetrized form
    tr((S_a^1/2 S_b S_a^1/2)^1/2)."""
    if a.dim != b.dim:
        raise UsageError(f"fid dimension mismatch: {a.dim} vs {b.dim}")
    diff = a.mean - b.mean
    root_a = sqrt_psd(a.cov)
    inner = root_a @ b.cov @ root_a
    tr_covmean = np.sqrt(np.clip(_eigvalsh(inner, "covariance product"), 0.0, None)).sum()
    value = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_covmean
    return max(float(value), 0.0)


def fid_matrix(stats):
    """Symmetric pairwise FID matrix with a zero diagonal."""
    n = len(stats)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = fid(stats[i], stats[j])
    return out


@dataclass(frozen=True)
class Correlation:
    """Spearman coefficient, or ``value=None`` when an input has zero variance."""

    value: float | None

    @property
    def degenerate(self):
        return self.value is None

    def __str__(self):
        return "degenerate" if self.degenerate else f"{self.value:.4f}"


def spearman(x, y):
    """Pearson correlation of average ranks (ties share their mean rank)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise UsageError(f"spearman length mismatch: {x.shape} vs {y.shape}")
    if x.size < 3:
        raise UsageError("spearman needs at least 3 points")
    rx = rankdata(x) - (x.size + 1) / 2
    ry = rankdata(y) - (y.size + 1) / 2
    denom = np.sqrt((rx @ rx) * (ry @ ry))
    if denom == 0:
        return Correlation(None)
    return Correlation(float(np.clip((rx @ ry) / denom, -1.0, 1.0)))


def sign_test(wins, losses):
    """One-sided sign test p-value that wins outnumber losses (ties dropped)."""
    trials = wins + losses
    if trials == 0:
        return 1.0
    return float(binomtest(wins, trials, 0.5, alternative="greater").pvalue)
