"""Closed-form score fields for Gaussian-smoothed reference distributions.

Two families admit an exact smoothed score: an affine Gaussian (a standard
normal pushed through an orthonormal frame, smoothed covariance
UU^T + sigma^2 I) and a finite point mixture. Both expose the same surface
as trained models, so every estimator can be verified without training.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UnsupportedFamilyError
from . import manifolds


def _check_sigma(sigma: float):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")


@dataclass
class AffineGaussianOracle:
    """Score of N(b, UU^T + sigma^2 I); U has orthonormal columns.

    The inverse covariance is applied in Woodbury form,
    sigma^-2 (I - UU^T/(1+sigma^2)), which is exact, O(nd) per evaluation,
    and stays well conditioned as sigma -> 0.
    """

    frame: np.ndarray
    offset: np.ndarray = None

    def __post_init__(self):
        self.frame = np.asarray(self.frame, dtype=np.float64)
        if self.frame.ndim != 2:
            raise ShapeError("frame must be an (n, d) matrix")
        n, d = self.frame.shape
        if d > 0:
            gram = self.frame.T @ self.frame
            if np.max(np.abs(gram - np.eye(d))) > 1e-10:
                raise ShapeError("frame columns must be orthonormal")
        if self.offset is None:
            self.offset = np.zeros(n)
        self.offset = np.asarray(self.offset, dtype=np.float64)

    @property
    def ambient_dim(self) -> int:
        return self.frame.shape[0]

    @property
    def intrinsic_dim(self) -> int:
        return self.frame.shape[1]

    def _apply_inverse(self, y: np.ndarray, sigma: float) -> np.ndarray:
        # y may be a vector or a stack of rows
        u = self.frame
        if u.shape[1] == 0:
            return y / sigma**2
        w = y @ u
        return (y - (w / (1.0 + sigma**2)) @ u.T) / sigma**2

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        _check_sigma(sigma)
        return -self._apply_inverse(np.asarray(x, float) - self.offset, sigma)

    def score_batch(self, xs: np.ndarray, sigma: float) -> np.ndarray:
        _check_sigma(sigma)
        return -self._apply_inverse(np.asarray(xs, float) - self.offset, sigma)

    def jvp(self, x: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray:
        """Directional derivative of the score; linear, so independent of x."""
        _check_sigma(sigma)
        return -self._apply_inverse(np.asarray(v, float), sigma)

    def jvp_many(self, x: np.ndarray, sigma: float, vs: np.ndarray) -> np.ndarray:
        _check_sigma(sigma)
        return -self._apply_inverse(np.asarray(vs, float), sigma)

    def log_density(self, x: np.ndarray, sigma: float) -> float:
        _check_sigma(sigma)
        n, d = self.frame.shape
        y = np.asarray(x, float) - self.offset
        quad = float(y @ self._apply_inverse(y, sigma))
        logdet = d * np.log1p(sigma**2) + 2 * (n - d) * np.log(sigma)
        return -0.5 * (quad + logdet + n * np.log(2 * np.pi))


def affine_score(oracle: AffineGaussianOracle, x, sigma: float):
    return oracle.score(x, sigma)


def affine_score_jvp(oracle: AffineGaussianOracle, x, sigma: float, v):
    return oracle.jvp(x, sigma, v)


@dataclass
class PointMixtureOracle:
    """Score of a weighted point mixture smoothed by N(0, sigma^2 I).

    Responsibilities are computed with max-subtracted log-sum-exp so small
    sigma (0.01 and below) cannot underflow.
    """

    anchors: np.ndarray
    weights: np.ndarray = None
    _logw: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.anchors = np.atleast_2d(np.asarray(self.anchors, dtype=np.float64))
        m = self.anchors.shape[0]
        if self.weights is None:
            self.weights = np.full(m, 1.0 / m)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (m,) or np.any(self.weights < 0) \
                or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ShapeError("weights must be a simplex vector over anchors")
        with np.errstate(divide="ignore"):
            self._logw = np.log(self.weights)

    @property
    def ambient_dim(self) -> int:
        return self.anchors.shape[1]

    def _responsibilities(self, x: np.ndarray, sigma: float) -> np.ndarray:
        d2 = np.sum((self.anchors - x)**2, axis=1)
        logits = self._logw - d2 / (2.0 * sigma**2)
        logits -= logits.max()
        r = np.exp(logits)
        return r / r.sum()

    def score(self, x: np.ndarray, sigma: float) -> np.ndarray:
        _check_sigma(sigma)
        x = np.asarray(x, float)
        r = self._responsibilities(x, sigma)
        return (r @ self.anchors - x) / sigma**2

    def score_batch(self, xs: np.ndarray, sigma: float) -> np.ndarray:
        return np.array([self.score(x, sigma) for x in np.atleast_2d(xs)])

    def jvp(self, x: np.ndarray, sigma: float, v: np.ndarray) -> np.ndarray:
        """Exact derivative of the mixture score along v."""
        _check_sigma(sigma)
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        r = self._responsibilities(x, sigma)
        mu = r @ self.anchors
        gain = (self.anchors - mu) @ v / sigma**2
        dmu = (r * gain) @ self.anchors
        return (dmu - v) / sigma**2

    def jvp_many(self, x: np.ndarray, sigma: float, vs: np.ndarray) -> np.ndarray:
        return np.array([self.jvp(x, sigma, v) for v in np.atleast_2d(vs)])

    def log_density(self, x: np.ndarray, sigma: float) -> float:
        _check_sigma(sigma)
        x = np.asarray(x, float)
        d2 = np.sum((self.anchors - x)**2, axis=1)
        logits = self._logw - d2 / (2.0 * sigma**2)
        peak = logits.max()
        lse = peak + np.log(np.sum(np.exp(logits - peak)))
        return float(lse - 0.5 * self.ambient_dim * np.log(2 * np.pi * sigma**2))


def mixture_score(oracle: PointMixtureOracle, x, sigma: float):
    return oracle.score(x, sigma)


def oracle_for(spec: "manifolds.ManifoldSpec"):
    """Exact score oracle matching a generated cloud, when one exists."""
    if spec.family == "affine_gaussian":
        u, b = manifolds.affine_frame(spec)
        return AffineGaussianOracle(frame=u, offset=b)
    if spec.family == "point_mixture":
        return PointMixtureOracle(anchors=manifolds.embedded_anchors(spec))
    raise UnsupportedFamilyError(
        f"no closed-form score for family {spec.family!r}")
