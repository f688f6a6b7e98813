"""Collapse metrics on last-layer features and classifier weights.

NC1 measures within-class variability against between-class scatter, NC2 the
Gram-space distance of class means to a simplex ETF, NC3 the misalignment of
classifier rows and class means. All three are computed on post-head
features, and the global mean is the unweighted mean of class means even
under imbalance (some of the literature weights by sample count; this
convention does not).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import etf
from .linalg import DEFAULT_PINV_CUTOFF, as_matrix, pseudo_inverse

# Rows shorter than this count as "numerically zero" for cosine purposes.
ZERO_ROW_FLOOR = 1e-30


@dataclass(frozen=True)
class ClassStatistics:
    """Class means, global mean, and within/between-class scatter."""

    class_means: np.ndarray   # D x K
    global_mean: np.ndarray   # D
    sigma_w: np.ndarray       # D x D
    sigma_b: np.ndarray       # D x D
    class_counts: np.ndarray  # K


@dataclass(frozen=True)
class NcReport:
    """One training snapshot's collapse diagnostics."""

    nc1: float
    nc2: float
    nc3: float
    loss: float
    accuracy: float
    per_class_accuracy: tuple
    per_class_weight_norm: tuple
    minority_mean_pairwise_cosine: float

    def as_dict(self) -> dict:
        return {
            "nc1": self.nc1,
            "nc2": self.nc2,
            "nc3": self.nc3,
            "loss": self.loss,
            "accuracy": self.accuracy,
            "per_class_accuracy": list(self.per_class_accuracy),
            "per_class_weight_norm": list(self.per_class_weight_norm),
            "minority_mean_pairwise_cosine": self.minority_mean_pairwise_cosine,
        }


def _validate_labels(labels, n: int, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=-1) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


def class_statistics(features_h, labels, k: Optional[int] = None) -> ClassStatistics:
    """Per-class means plus within/between-class covariances.

    Sigma_W averages squared deviations over all N samples; Sigma_B averages
    squared deviations of the K class means from their unweighted mean.
    """
    h = as_matrix(features_h, "features")
    n = h.shape[1]
    if k is None:
        k = int(np.max(labels)) + 1
    labels = _validate_labels(labels, n, k)
    counts = np.bincount(labels, minlength=k)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0)
        raise ValueError(f"every class needs at least one sample; empty: {empty.tolist()}")

    means = np.zeros((h.shape[0], k))
    for c in range(k):
        means[:, c] = h[:, labels == c].mean(axis=1)
    global_mean = means.mean(axis=1)

    centered = h - means[:, labels]
    sigma_w = (centered @ centered.T) / n
    dev = means - global_mean[:, None]
    sigma_b = (dev @ dev.T) / k
    # symmetrize away the last-ulp asymmetry from the matrix products
    sigma_w = 0.5 * (sigma_w + sigma_w.T)
    sigma_b = 0.5 * (sigma_b + sigma_b.T)
    return ClassStatistics(
        class_means=means,
        global_mean=global_mean,
        sigma_w=sigma_w,
        sigma_b=sigma_b,
        class_counts=counts,
    )


def nc1(stats: ClassStatistics, cutoff: float = DEFAULT_PINV_CUTOFF) -> float:
    """(1/K) tr(Sigma_W Sigma_B^+). Zero exactly when every sample sits on
    its class mean; the pseudo-inverse handles rank-deficient scatter."""
    k = stats.class_means.shape[1]
    return float(np.trace(stats.sigma_w @ pseudo_inverse(stats.sigma_b, cutoff)) / k)


def nc2(class_means) -> float:
    """Distance of the class-mean Gram (unit-normalized) from the ETF Gram."""
    means = as_matrix(class_means, "class_means")
    k = means.shape[1]
    if np.linalg.norm(means) == 0.0:
        raise ValueError("class means are all zero")
    return etf.gram_distance_to_etf(means.T @ means, k)


def nc3(w, class_means, norm: str = "fro") -> float:
    """Norm of W/||W||_F - Hbar^T/||Hbar||_F, pairing classifier row k with
    class-k mean.

    The outer norm is Frobenius by default; pass norm="spectral" for the
    operator-norm variant.
    """
    w = as_matrix(w, "w")
    means = as_matrix(class_means, "class_means")
    if w.shape != (means.shape[1], means.shape[0]):
        raise ValueError(
            f"classifier {w.shape} and class means {means.shape} are not K x D vs D x K"
        )
    w_norm = np.linalg.norm(w)
    m_norm = np.linalg.norm(means)
    if w_norm == 0.0 or m_norm == 0.0:
        raise ValueError("classifier and class means must both be non-zero")
    diff = w / w_norm - means.T / m_norm
    if norm == "fro":
        return float(np.linalg.norm(diff))
    if norm == "spectral":
        return float(np.linalg.norm(diff, 2))
    raise ValueError(f"norm must be 'fro' or 'spectral', got {norm!r}")


def mean_pairwise_cosine(w, classes: Sequence[int]) -> float:
    """Mean cosine over all pairs of the selected classifier rows.

    Approaches 1 when the selected rows collapse onto one direction and
    -1/(K-1) when they sit on a K-class ETF. Returns NaN (with the norms
    left to per_class_weight_norm) when a selected row is numerically zero.
    """
    w = as_matrix(w, "w")
    idx = list(classes)
    if len(idx) < 2:
        raise ValueError("need at least two classes for pairwise cosines")
    rows = w[idx]
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms < ZERO_ROW_FLOOR):
        return float("nan")
    unit = rows / norms[:, None]
    gram = unit @ unit.T
    upper = gram[np.triu_indices(len(idx), k=1)]
    return float(upper.mean())


def minority_collapse_index(w, minority_classes: Sequence[int]) -> float:
    """Mean pairwise cosine among minority-class classifier rows."""
    return mean_pairwise_cosine(w, minority_classes)


def per_class_accuracy(logits, labels, k: int) -> np.ndarray:
    logits = as_matrix(logits, "logits")
    labels = _validate_labels(labels, logits.shape[1], k)
    predicted = np.argmax(logits, axis=0)
    out = np.zeros(k)
    for c in range(k):
        mask = labels == c
        out[c] = float(np.mean(predicted[mask] == c)) if np.any(mask) else 0.0
    return out


def nc_report(
    features_h,
    labels,
    w,
    logits,
    loss: float,
    cutoff: float = DEFAULT_PINV_CUTOFF,
    minority_classes: Optional[Sequence[int]] = None,
) -> NcReport:
    """Assemble the full per-snapshot report from post-head features."""
    h = as_matrix(features_h, "features")
    w = as_matrix(w, "w")
    k = w.shape[0]
    stats = class_statistics(h, labels, k)
    predicted = np.argmax(logits, axis=0)
    accuracy = float(np.mean(predicted == np.asarray(labels)))
    cosine_classes = minority_classes if minority_classes is not None else range(k)
    return NcReport(
        nc1=nc1(stats, cutoff),
        nc2=nc2(stats.class_means),
        nc3=nc3(w, stats.class_means),
        loss=float(loss),
        accuracy=accuracy,
        per_class_accuracy=tuple(per_class_accuracy(logits, labels, k).tolist()),
        per_class_weight_norm=tuple(np.linalg.norm(w, axis=1).tolist()),
        minority_mean_pairwise_cosine=mean_pairwise_cosine(w, cosine_classes),
    )
