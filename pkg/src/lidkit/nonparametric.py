"""Classical k-NN baselines: Levina-Bickel MLE and TwoNN.

Both work on distance ratios only, so they are invariant to rigid motions
and to rescaling the cloud. Estimates are pointwise over the query's
k-neighborhood; global pooled variants are also provided.
"""

import time
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateNeighborhoodError
from .estimators import LIDReport
from .manifolds import PointCloud
from .numerics import knn

NONPARAMETRIC_ESTIMATORS = ("mle", "twonn")


@dataclass(frozen=True)
class NeighborhoodParams:
    k: int = 50                    # 50 and 100 are the benchmark defaults
    aggregation: str = "per_point"  # per_point | global

    def validate(self, n_points: int):
        if not 2 <= self.k < n_points:
            raise ConfigError(f"k must satisfy 2 <= k < N, got k={self.k}, "
                              f"N={n_points}")
        if self.aggregation not in ("per_point", "global"):
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")


def _mle_from_distances(dists: np.ndarray) -> float:
    """Inverse mean log distance ratio over one neighborhood."""
    t_k = dists[-1]
    if t_k == 0.0:
        raise DegenerateNeighborhoodError("all neighbor distances are zero")
    inner = dists[:-1]
    usable = inner > 0.0
    if not np.all(usable):
        warnings.warn("zero neighbor distances excluded from MLE fit",
                      stacklevel=3)
        inner = inner[usable]
    if inner.size == 0:
        raise DegenerateNeighborhoodError("no usable neighbor distances")
    total = float(np.sum(np.log(t_k / inner)))
    if total <= 0.0:
        raise DegenerateNeighborhoodError("neighborhood has zero radius span")
    return inner.size / total


def mle_lid(cloud: PointCloud, query_index: int, k: int) -> float:
    """Levina-Bickel estimate at one point from its k nearest neighbors."""
    if k < 3:
        raise ConfigError("mle_lid needs k >= 3")
    return _mle_from_distances(knn(cloud.points, query_index, k)[0])


def _pairwise_distances(points: np.ndarray) -> np.ndarray:
    """Full exact distance matrix, row-chunked to bound peak memory."""
    n_points, n = points.shape
    out = np.empty((n_points, n_points))
    chunk = max(1, (1 << 23) // max(n_points * n, 1))
    for lo in range(0, n_points, chunk):
        diff = points[lo:lo + chunk, None, :] - points[None, :, :]
        out[lo:lo + chunk] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def _two_nn_radii(points: np.ndarray):
    """First and second neighbor distance for every point, O(N^2)."""
    dist = _pairwise_distances(points)
    np.fill_diagonal(dist, np.inf)
    part = np.partition(dist, 1, axis=1)[:, :2]
    return np.sort(part, axis=1)


def _twonn_from_ratios(r1: np.ndarray, r2: np.ndarray) -> float:
    usable = r1 > 0.0
    if not np.all(usable):
        warnings.warn("duplicate points dropped from TwoNN pool", stacklevel=3)
        r1, r2 = r1[usable], r2[usable]
    if r1.size == 0:
        raise DegenerateNeighborhoodError("no usable neighbor pairs")
    total = float(np.sum(np.log(r2 / r1)))
    if total <= 0.0:
        raise DegenerateNeighborhoodError("all neighbor ratios are 1")
    return r1.size / total


def twonn_lid(cloud: PointCloud, query_index: int, k: int) -> float:
    """TwoNN estimate pooled over the query's k-neighborhood.

    Each neighborhood member contributes the ratio of its own second to
    first nearest-neighbor distance within the full cloud (Pareto maximum
    likelihood form).
    """
    if k < 3:
        raise ConfigError("twonn_lid needs k >= 3")
    members = knn(cloud.points, query_index, k)[1]
    radii = _two_nn_radii(np.asarray(cloud.points, float))
    return _twonn_from_ratios(radii[members, 0], radii[members, 1])


def global_estimate(cloud: PointCloud, estimator: str, k: int = 50) -> float:
    """Pooled single-number estimate over the whole cloud."""
    pts = np.asarray(cloud.points, float)
    if estimator == "twonn":
        radii = _two_nn_radii(pts)
        return _twonn_from_ratios(radii[:, 0], radii[:, 1])
    if estimator == "mle":
        logs, count = 0.0, 0
        for i in range(cloud.n_points):
            dists = knn(pts, i, k)[0]
            inner = dists[:-1]
            inner = inner[inner > 0.0]
            if dists[-1] > 0.0 and inner.size:
                logs += float(np.sum(np.log(dists[-1] / inner)))
                count += inner.size
        if logs <= 0.0:
            raise DegenerateNeighborhoodError("cloud has zero radius span")
        return count / logs
    raise ConfigError(f"unknown estimator {estimator!r}")


def estimate_cloud(cloud: PointCloud, estimator: str,
                   params: NeighborhoodParams) -> LIDReport:
    """Per-point baseline estimates in the shared report schema."""
    if estimator not in NONPARAMETRIC_ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}; "
                          f"expected one of {NONPARAMETRIC_ESTIMATORS}")
    params.validate(cloud.n_points)
    pts = np.asarray(cloud.points, float)
    n_points = cloud.n_points
    start = time.perf_counter()

    # one O(N^2) distance matrix serves every query
    dist = _pairwise_distances(pts)
    np.fill_diagonal(dist, np.inf)
    order = np.argsort(dist, axis=1, kind="stable")
    sorted_d = np.take_along_axis(dist, order, axis=1)

    estimates = np.empty(n_points)
    if estimator == "mle":
        for i in range(n_points):
            estimates[i] = _mle_from_distances(sorted_d[i, :params.k])
    else:
        r1, r2 = sorted_d[:, 0], sorted_d[:, 1]
        for i in range(n_points):
            members = order[i, :params.k]
            estimates[i] = _twonn_from_ratios(r1[members], r2[members])
    runtime_ms = (time.perf_counter() - start) * 1e3

    zeros = np.zeros(n_points, dtype=np.int64)
    return LIDReport(estimator=estimator,
                     params={"k": params.k, "aggregation": params.aggregation},
                     estimates=estimates, true_lid=cloud.true_lid,
                     score_evals=zeros, jvp_evals=zeros.copy(),
                     runtime_ms=runtime_ms)
