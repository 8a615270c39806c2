"""Per-song Gaussian models and the symmetrised KL divergence.

The divergence between two Gaussians a, b is

    skl(a, b) = (KL(a||b) + KL(b||a)) / 2

evaluated through one algebraically symmetric expression (the log-det
terms of the two directions cancel), so symmetry holds exactly as
computed. Analytic gradients with respect to the first model's mean and
covariance support reverse-mode differentiation through the fit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .features import MfccMatrix

RIDGE_DEFAULT = 1e-6


class CovarianceError(Exception):
    """Covariance failed a positive-definiteness check that fit() should guarantee."""


@dataclass(frozen=True)
class GaussianModel:
    mean: np.ndarray  # (d,)
    cov: np.ndarray   # (d, d) symmetric positive-definite
    clip_id: str = ""

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).copy()
        cov = np.asarray(self.cov, dtype=np.float64).copy()
        if mean.ndim != 1 or cov.shape != (mean.size, mean.size):
            raise ValueError("mean must be (d,), cov must be (d, d)")
        if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def fit_gaussian(feats: MfccMatrix, reg: float = RIDGE_DEFAULT) -> GaussianModel:
    """Maximum-likelihood Gaussian over the frames, with trace-scaled ridge.

    cov = population covariance + reg * (trace/d) * I. Zero-variance input
    (identical frames) falls back to an absolute reg * I ridge so the
    result stays positive-definite.
    """
    frames = feats.frames
    t, d = frames.shape
    if t < 2:
        raise ValueError("need at least 2 frames to fit a Gaussian")
    mean = frames.mean(axis=0)
    centered = frames - mean
    cov = centered.T @ centered / t
    trace = float(np.trace(cov))
    scale = trace / d if trace > 0.0 else 1.0
    cov = cov + reg * scale * np.eye(d)
    cov = (cov + cov.T) / 2.0
    return GaussianModel(mean, cov, feats.clip_id)


def chol_inverse(cov: np.ndarray) -> tuple[np.ndarray, float]:
    """(inverse, log-determinant) via Cholesky; raises CovarianceError if not PD."""
    try:
        chol, lower = linalg.cho_factor(cov, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise CovarianceError(f"covariance not positive-definite: {exc}") from exc
    inv = linalg.cho_solve((chol, lower), np.eye(cov.shape[0]), check_finite=False)
    inv = (inv + inv.T) / 2.0
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return inv, logdet


def skl(a: GaussianModel, b: GaussianModel) -> float:
    """Symmetrised KL divergence between two Gaussian models."""
    inv_a, _ = chol_inverse(a.cov)
    inv_b, _ = chol_inverse(b.cov)
    return skl_from_inverses(a.mean, a.cov, inv_a, b.mean, b.cov, inv_b)


def skl_from_inverses(mean_a, cov_a, inv_a, mean_b, cov_b, inv_b) -> float:
    d = mean_a.size
    delta = mean_a - mean_b
    cross = float(np.sum(inv_b * cov_a)) + float(np.sum(inv_a * cov_b))
    maha = float(delta @ (inv_a + inv_b) @ delta)
    return max(0.25 * (cross + maha) - d / 2.0, 0.0)


def skl_grad(a: GaussianModel, b: GaussianModel) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of skl(a, b) with respect to a.mean and a.cov.

    The covariance gradient treats cov as a full (symmetric) matrix
    variable, which is the convention the downstream fit VJP expects.
    """
    inv_a, _ = chol_inverse(a.cov)
    inv_b, _ = chol_inverse(b.cov)
    delta = a.mean - b.mean
    mean_grad = 0.5 * (inv_a + inv_b) @ delta
    ia_delta = inv_a @ delta
    cov_grad = 0.25 * (inv_b - inv_a @ b.cov @ inv_a - np.outer(ia_delta, ia_delta))
    cov_grad = (cov_grad + cov_grad.T) / 2.0
    return mean_grad, cov_grad


def gaussian_vjp(feats: MfccMatrix, reg: float, mean_grad: np.ndarray,
                 cov_grad: np.ndarray) -> np.ndarray:
    """Gradient of <mean_grad, mean> + <cov_grad, cov> with respect to the frames.

    Uses the analytic Jacobian of the estimator in fit_gaussian, including
    the trace-scaled ridge term (inactive on the zero-variance fallback).
    """
    frames = feats.frames
    t, d = frames.shape
    mean_grad = np.asarray(mean_grad, dtype=np.float64)
    cov_grad = np.asarray(cov_grad, dtype=np.float64)
    if mean_grad.shape != (d,) or cov_grad.shape != (d, d):
        raise ValueError("gradient shapes do not match the feature dimension")
    mean = frames.mean(axis=0)
    centered = frames - mean
    effective = (cov_grad + cov_grad.T) / 2.0
    base_cov = centered.T @ centered / t
    if float(np.trace(base_cov)) > 0.0:
        effective = effective + (reg * np.trace(cov_grad) / d) * np.eye(d)
    return mean_grad / t + (2.0 / t) * centered @ effective
