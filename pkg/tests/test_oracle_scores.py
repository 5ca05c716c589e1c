import numpy as np
import pytest

from lidkit.errors import ShapeError, UnsupportedFamilyError
from lidkit.manifolds import ManifoldSpec, sample
from lidkit.numerics import RngStream, random_orthogonal
from lidkit.oracle_scores import (
    AffineGaussianOracle,
    PointMixtureOracle,
    affine_score,
    affine_score_jvp,
    mixture_score,
    oracle_for,
)


def fd_score(log_density, x, sigma, h=1e-5):
    """Central finite differences of a log-density."""
    out = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (log_density(x + e, sigma) - log_density(x - e, sigma)) / (2 * h)
    return out


class TestAffineOracle:
    def test_pure_gaussian_when_frame_empty(self):
        o = AffineGaussianOracle(frame=np.zeros((4, 0)))
        x = np.array([1.0, -2.0, 0.5, 3.0])
        assert np.allclose(affine_score(o, x, 0.5), -x / 0.25, atol=1e-12)

    def test_two_dim_one_dim_frame(self):
        o = AffineGaussianOracle(frame=np.array([[1.0], [0.0]]))
        s = affine_score(o, np.array([2.0, 3.0]), 1.0)
        # covariance diag(2, 1): score = -(x1/2, x2)
        assert np.allclose(s, [-1.0, -3.0], atol=1e-12)

    def test_full_rank_frame(self):
        q = random_orthogonal(RngStream(key=1), 5)
        o = AffineGaussianOracle(frame=q)
        x = RngStream(key=2).gaussians(5)
        assert np.allclose(o.score(x, 0.3), -x / 1.09, atol=1e-12)

    def test_jvp_normal_and_tangent_directions(self):
        q = random_orthogonal(RngStream(key=3), 6)
        o = AffineGaussianOracle(frame=q[:, :2])
        sigma = 0.2
        tangent = q[:, 0]
        normal = q[:, 5]
        x = np.zeros(6)
        assert np.allclose(affine_score_jvp(o, x, sigma, tangent),
                           -tangent / (1 + sigma**2), atol=1e-12)
        assert np.allclose(affine_score_jvp(o, x, sigma, normal),
                           -normal / sigma**2, atol=1e-10)

    def test_divergence_from_jvp_trace(self):
        n, d, sigma = 7, 3, 0.1
        q = random_orthogonal(RngStream(key=4), n)
        o = AffineGaussianOracle(frame=q[:, :d])
        div = sum(o.jvp(np.zeros(n), sigma, e)[k]
                  for k, e in enumerate(np.eye(n)))
        expected = -d / (1 + sigma**2) - (n - d) / sigma**2
        assert abs(div - expected) < 1e-9 * abs(expected)

    def test_score_matches_finite_differences(self):
        q = random_orthogonal(RngStream(key=5), 5)
        o = AffineGaussianOracle(frame=q[:, :2],
                                 offset=RngStream(key=6).gaussians(5))
        x = RngStream(key=7).gaussians(5)
        for sigma in (0.3, 1.0):
            s = o.score(x, sigma)
            ref = fd_score(o.log_density, x, sigma)
            assert np.max(np.abs(s - ref)) < 1e-6 * max(1.0, np.max(np.abs(ref)))

    def test_sigma_domain(self):
        o = AffineGaussianOracle(frame=np.zeros((2, 0)))
        with pytest.raises(ValueError):
            o.score(np.zeros(2), 0.0)

    def test_non_orthonormal_frame_rejected(self):
        with pytest.raises(ShapeError):
            AffineGaussianOracle(frame=np.ones((3, 2)))


class TestMixtureOracle:
    def test_single_anchor_at_origin(self):
        o = PointMixtureOracle(anchors=np.zeros((1, 3)))
        x = np.array([0.2, -0.1, 0.4])
        assert np.allclose(mixture_score(o, x, 0.5), -x / 0.25, atol=1e-12)

    def test_symmetric_anchors_cancel_at_origin(self):
        a = np.array([1.0, 2.0, -1.0])
        o = PointMixtureOracle(anchors=np.stack([a, -a]))
        assert np.allclose(mixture_score(o, np.zeros(3), 0.7), 0.0, atol=1e-12)

    def test_midpoint_between_two_anchors(self):
        o = PointMixtureOracle(anchors=np.array([[0.0, 0.0], [1.0, 0.0]]))
        s = mixture_score(o, np.array([0.5, 0.0]), 0.5)
        assert np.allclose(s, 0.0, atol=1e-12)

    def test_small_sigma_does_not_underflow(self):
        o = PointMixtureOracle(anchors=np.array([[0.0, 0.0], [10.0, 0.0]]))
        s = o.score(np.array([0.01, 0.0]), 0.01)
        assert np.all(np.isfinite(s))
        # nearest anchor dominates: behaves like the single-anchor score
        assert np.allclose(s, -np.array([0.01, 0.0]) / 1e-4, rtol=1e-9)

    def test_score_matches_finite_differences(self):
        anchors = RngStream(key=8).gaussians(8).reshape(4, 2)
        o = PointMixtureOracle(anchors=anchors,
                               weights=np.array([0.1, 0.2, 0.3, 0.4]))
        x = np.array([0.3, -0.2])
        for sigma in (0.5, 1.0):
            ref = fd_score(o.log_density, x, sigma)
            assert np.max(np.abs(o.score(x, sigma) - ref)) < 1e-6 * max(
                1.0, np.max(np.abs(ref)))

    def test_jvp_matches_finite_differences(self):
        anchors = RngStream(key=9).gaussians(6).reshape(3, 2)
        o = PointMixtureOracle(anchors=anchors)
        x = np.array([0.1, 0.2])
        v = np.array([0.6, -0.8])
        sigma = 0.6
        h = 1e-6
        ref = (o.score(x + h * v, sigma) - o.score(x - h * v, sigma)) / (2 * h)
        assert np.max(np.abs(o.jvp(x, sigma, v) - ref)) < 1e-5 * max(
            1.0, np.max(np.abs(ref)))

    def test_bad_weights_rejected(self):
        with pytest.raises(ShapeError):
            PointMixtureOracle(anchors=np.zeros((2, 2)),
                               weights=np.array([0.7, 0.7]))


class TestOracleFactory:
    def test_affine_cloud_pairing(self):
        spec = ManifoldSpec("affine_gaussian", d=3, n=9, N=50, seed=12,
                            permute_dims=True)
        cloud = sample(spec)
        o = oracle_for(spec)
        # cloud points lie in the oracle frame: residual after projection ~ 0
        y = cloud.points - o.offset
        resid = y - (y @ o.frame) @ o.frame.T
        assert np.max(np.abs(resid)) < 1e-10

    def test_mixture_cloud_pairing(self):
        spec = ManifoldSpec("point_mixture", d=0, n=4, N=30, seed=3, anchors=2)
        cloud = sample(spec)
        o = oracle_for(spec)
        d_to_anchor = np.min(np.linalg.norm(
            cloud.points[:, None, :] - o.anchors[None], axis=2), axis=1)
        assert np.max(d_to_anchor) < 1e-12

    def test_unsupported(self):
        with pytest.raises(UnsupportedFamilyError):
            oracle_for(ManifoldSpec("hypersphere", d=2, n=4, N=10))
