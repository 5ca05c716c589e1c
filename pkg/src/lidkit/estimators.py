"""Pointwise LID estimators driven by any score field.

All estimators accept a ScoreField (analytic oracle, trained model, or a
perturbation of either) and draw their noise from per-point RNG substreams,
so the denoising loss and the error-bundle spectrum at the same point share
identical randomness and their trace identity holds exactly. Score and
directional-derivative evaluations are counted per point.
"""

import copy
import json
import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import CapabilityError, ConfigError
from .manifolds import PointCloud
from .numerics import RngStream, Spectrum, sym_eig
from .oracle_scores import AffineGaussianOracle, PointMixtureOracle
from . import score_model

# substream blocks under one estimator seed; plain point indices carry the
# shared noise draws
_S_HUTCH = 1 << 41
_S_NOISED = 1 << 42

CLOUD_ESTIMATORS = ("dsm", "flipd", "nb")


@dataclass
class Counters:
    score_evals: int = 0
    jvp_evals: int = 0

    def add(self, other: "Counters"):
        self.score_evals += other.score_evals
        self.jvp_evals += other.jvp_evals


class ScoreField:
    """Evaluator surface shared by oracles and trained models.

    Subclasses implement `_score_impl`/`_epsilon_impl` (either suffices; the
    missing one is derived from eps = -sigma * score) and optionally
    `_jvp_impl`, the directional derivative of the score. Public calls
    increment the evaluation counters.
    """

    provides: frozenset = frozenset()

    def __init__(self, ambient_dim: int):
        self.ambient_dim = ambient_dim
        self.counters = Counters()

    # -- capabilities ------------------------------------------------------
    @property
    def has_score(self) -> bool:
        return bool(self.provides & {"score", "epsilon"})

    @property
    def has_epsilon(self) -> bool:
        return self.has_score

    @property
    def has_jvp(self) -> bool:
        return "jvp" in self.provides

    def fork(self) -> "ScoreField":
        """Shallow copy with fresh counters, for per-point accounting."""
        clone = copy.copy(self)
        clone.counters = Counters()
        return clone

    # -- uncounted evaluation paths ---------------------------------------
    def _score_impl(self, x, sigma):
        raise NotImplementedError

    def _epsilon_impl(self, x, sigma):
        raise NotImplementedError

    def _score_batch_impl(self, xs, sigma):
        return np.array([self._score_impl(x, sigma) for x in xs])

    def _epsilon_batch_impl(self, xs, sigma):
        return np.array([self._epsilon_impl(x, sigma) for x in xs])

    def _jvp_impl(self, x, sigma, v):
        raise NotImplementedError

    def _jvp_many_impl(self, x, sigma, vs):
        return np.array([self._jvp_impl(x, sigma, v) for v in vs])

    def _raw_score_batch(self, xs, sigma):
        if "score" in self.provides:
            return self._score_batch_impl(xs, sigma)
        if "epsilon" in self.provides:
            return -self._epsilon_batch_impl(xs, sigma) / sigma
        raise CapabilityError(f"{type(self).__name__} cannot evaluate scores")

    def _raw_epsilon_batch(self, xs, sigma):
        if "epsilon" in self.provides:
            return self._epsilon_batch_impl(xs, sigma)
        if "score" in self.provides:
            return -sigma * self._score_batch_impl(xs, sigma)
        raise CapabilityError(
            f"{type(self).__name__} cannot evaluate noise predictions")

    # -- counted public surface -------------------------------------------
    def score(self, x, sigma):
        self.counters.score_evals += 1
        return self._raw_score_batch(np.asarray(x, float)[None, :], sigma)[0]

    def score_batch(self, xs, sigma):
        xs = np.atleast_2d(np.asarray(xs, float))
        self.counters.score_evals += xs.shape[0]
        return self._raw_score_batch(xs, sigma)

    def epsilon(self, x, sigma):
        self.counters.score_evals += 1
        return self._raw_epsilon_batch(np.asarray(x, float)[None, :], sigma)[0]

    def epsilon_batch(self, xs, sigma):
        xs = np.atleast_2d(np.asarray(xs, float))
        self.counters.score_evals += xs.shape[0]
        return self._raw_epsilon_batch(xs, sigma)

    def jvp(self, x, sigma, v):
        if not self.has_jvp:
            raise CapabilityError(
                f"{type(self).__name__} has no directional derivative")
        self.counters.jvp_evals += 1
        return self._jvp_impl(np.asarray(x, float), sigma, np.asarray(v, float))

    def jvp_many(self, x, sigma, vs):
        if not self.has_jvp:
            raise CapabilityError(
                f"{type(self).__name__} has no directional derivative")
        vs = np.atleast_2d(np.asarray(vs, float))
        self.counters.jvp_evals += vs.shape[0]
        return self._jvp_many_impl(np.asarray(x, float), sigma, vs)


class OracleField(ScoreField):
    """Closed-form score field (affine Gaussian or point mixture)."""

    provides = frozenset({"score", "jvp"})

    def __init__(self, oracle):
        super().__init__(oracle.ambient_dim)
        self.oracle = oracle

    def _score_impl(self, x, sigma):
        return self.oracle.score(x, sigma)

    def _score_batch_impl(self, xs, sigma):
        return self.oracle.score_batch(xs, sigma)

    def _jvp_impl(self, x, sigma, v):
        return self.oracle.jvp(x, sigma, v)

    def _jvp_many_impl(self, x, sigma, vs):
        return self.oracle.jvp_many(x, sigma, vs)


class ModelField(ScoreField):
    """Trained MLP; velocity models are converted to noise prediction."""

    provides = frozenset({"epsilon", "jvp"})

    def __init__(self, model):
        super().__init__(model.config.input_dim)
        self.model = model

    def _epsilon_batch_impl(self, xs, sigma):
        pred = score_model.forward_batch(self.model, xs, sigma)
        if self.model.config.target == "velocity":
            pred = score_model.epsilon_from_velocity(pred, xs, sigma)
        return pred

    def _epsilon_impl(self, x, sigma):
        return self._epsilon_batch_impl(x[None, :], sigma)[0]

    def _jvp_many_impl(self, x, sigma, vs):
        d_eps = score_model.input_jvp_many(self.model, x, sigma, vs)
        if self.model.config.target == "velocity":
            d_eps = (1.0 - sigma) * d_eps + vs
        return -d_eps / sigma  # score = -eps / sigma

    def _jvp_impl(self, x, sigma, v):
        return self._jvp_many_impl(x, sigma, v[None, :])[0]


class PerturbedField(ScoreField):
    """Affine perturbation of another field's score: scale * s + shift."""

    def __init__(self, base: ScoreField, shift=None, scale: float = 1.0):
        super().__init__(base.ambient_dim)
        self.base = base
        self.shift = None if shift is None else np.asarray(shift, float)
        self.scale = float(scale)
        self.provides = frozenset({"score"}) | (base.provides & {"jvp"})

    def _score_batch_impl(self, xs, sigma):
        s = self.scale * self.base._raw_score_batch(xs, sigma)
        return s if self.shift is None else s + self.shift

    def _score_impl(self, x, sigma):
        return self._score_batch_impl(x[None, :], sigma)[0]

    def _jvp_impl(self, x, sigma, v):
        return self.scale * self.base._jvp_impl(x, sigma, v)

    def _jvp_many_impl(self, x, sigma, vs):
        return self.scale * self.base._jvp_many_impl(x, sigma, vs)


class RestrictedField(ScoreField):
    """Capability-masked view of a field (for mismatch handling tests)."""

    def __init__(self, base: ScoreField, drop):
        super().__init__(base.ambient_dim)
        self.base = base
        self.provides = base.provides - frozenset(drop)

    def _score_batch_impl(self, xs, sigma):
        return self.base._raw_score_batch(xs, sigma)

    def _score_impl(self, x, sigma):
        return self._score_batch_impl(x[None, :], sigma)[0]

    def _epsilon_batch_impl(self, xs, sigma):
        return self.base._raw_epsilon_batch(xs, sigma)

    def _epsilon_impl(self, x, sigma):
        return self._epsilon_batch_impl(x[None, :], sigma)[0]

    def _jvp_impl(self, x, sigma, v):
        return self.base._jvp_impl(x, sigma, v)

    def _jvp_many_impl(self, x, sigma, vs):
        return self.base._jvp_many_impl(x, sigma, vs)


def field_for(source) -> ScoreField:
    """Wrap an oracle or model in its ScoreField."""
    if isinstance(source, ScoreField):
        return source
    if isinstance(source, (AffineGaussianOracle, PointMixtureOracle)):
        return OracleField(source)
    if isinstance(source, score_model.MLPModel):
        return ModelField(source)
    raise TypeError(f"cannot build a score field from {type(source).__name__}")


@dataclass(frozen=True)
class EstimatorParams:
    sigma: float
    m: int = 8
    divergence: str = "exact"       # exact | hutchinson
    hutchinson_k: int = 64
    tau: float = 0.1
    seed: int = 0
    flipd_noised: bool = False      # evaluate flipd at a noised point

    def validate(self):
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.m < 1:
            raise ConfigError("m must be at least 1")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        if self.divergence not in ("exact", "hutchinson"):
            raise ConfigError(f"unknown divergence method {self.divergence!r}")
        if self.hutchinson_k < 1:
            raise ConfigError("hutchinson_k must be at least 1")


def _noise_draws(params: EstimatorParams, point_index: int, n: int) -> np.ndarray:
    stream = RngStream(params.seed, point_index)
    return stream.gaussians(params.m * n).reshape(params.m, n)


def dsm_lid(field: ScoreField, x, params: EstimatorParams,
            point_index: int = 0) -> float:
    """Monte-Carlo denoising loss at x: mean ||eps - eps_hat(x+sigma eps)||^2."""
    params.validate()
    x = np.asarray(x, float)
    eps = _noise_draws(params, point_index, x.size)
    pred = field.epsilon_batch(x + params.sigma * eps, params.sigma)
    resid = eps - pred
    return float(np.mean(np.einsum("ij,ij->i", resid, resid)))


def esm_loss(field: ScoreField, oracle_field: ScoreField, x,
             params: EstimatorParams, point_index: int = 0) -> float:
    """Scaled squared score error against a true-score oracle.

    Uses the same noise substream as dsm_lid so offsets between the two
    losses can be compared under common randomness.
    """
    params.validate()
    if not oracle_field.has_score:
        raise CapabilityError("esm_loss needs a true-score oracle")
    x = np.asarray(x, float)
    eps = _noise_draws(params, point_index, x.size)
    noised = x + params.sigma * eps
    diff = field.score_batch(noised, params.sigma) \
        - oracle_field.score_batch(noised, params.sigma)
    return float(params.sigma**2
                 * np.mean(np.einsum("ij,ij->i", diff, diff)))


def _divergence(field: ScoreField, x, params: EstimatorParams,
                point_index: int) -> float:
    n = x.size
    if params.divergence == "exact":
        jac_rows = field.jvp_many(x, params.sigma, np.eye(n))
        return float(np.trace(jac_rows))
    k = params.hutchinson_k
    stream = RngStream(params.seed, _S_HUTCH + point_index)
    probes = np.where(stream.uniforms(k * n) > 0.5, 1.0, -1.0).reshape(k, n)
    vals = np.einsum("ij,ij->i", probes, field.jvp_many(x, params.sigma, probes))
    return float(np.mean(vals))


def ism_value(field: ScoreField, x_tilde, params: EstimatorParams,
              point_index: int = 0) -> float:
    """Pointwise implicit score matching integrand sigma^2 (div s + ||s||^2/2)."""
    params.validate()
    x_tilde = np.asarray(x_tilde, float)
    s = field.score(x_tilde, params.sigma)
    div = _divergence(field, x_tilde, params, point_index)
    return float(params.sigma**2 * (div + 0.5 * float(s @ s)))


def flipd(field: ScoreField, x, params: EstimatorParams,
          point_index: int = 0) -> float:
    """Density-rate LID estimate at a (normally noiseless) point x.

    sigma^2 div s + sigma^2 ||s||^2 + n. Negative values are returned as-is;
    reports flag them rather than clamping.
    """
    params.validate()
    x = np.asarray(x, float)
    s = field.score(x, params.sigma)
    div = _divergence(field, x, params, point_index)
    return float(params.sigma**2 * div + params.sigma**2 * float(s @ s) + x.size)


def normal_bundle_lid(field: ScoreField, x, params: EstimatorParams,
                      point_index: int = 0, diagnostics: bool = False):
    """Ambient dimension minus the count of non-negligible prediction directions.

    Noise predictions around x form an (m, n) matrix; its singular values are
    normalized by sqrt(m) so a genuine normal direction sits near 1. A value
    counts when it exceeds tau times the reference scale max(largest, 1); the
    unit floor keeps uniformly tiny spectra (full-rank data, or a field that
    predicts ~0 everywhere) from registering spurious normal directions.
    """
    params.validate()
    x = np.asarray(x, float)
    n = x.size
    eps = _noise_draws(params, point_index, n)
    pred = field.epsilon_batch(x + params.sigma * eps, params.sigma)
    eig = sym_eig(pred.T @ pred).eigenvalues
    svals = np.sqrt(np.clip(eig, 0.0, None) / params.m)
    ref = max(float(svals[0]), 1.0)
    count = int(np.sum(svals > params.tau * ref))
    if count == params.m < n:
        warnings.warn("noise-sample count saturated; normal dimension is "
                      "likely underestimated", stacklevel=2)
    if diagnostics:
        pos = svals[svals > 1e-300]
        gap_index = (int(np.argmax(pos[:-1] / pos[1:])) + 1
                     if pos.size > 1 else 0)
        return n - count, {"singular_values": svals,
                           "threshold": params.tau * ref,
                           "gap_index": gap_index}
    return n - count


def error_bundle_spectrum(field: ScoreField, x, params: EstimatorParams,
                          point_index: int = 0) -> Spectrum:
    """Spectrum of the scaled Gram matrix of denoising residuals.

    Shares the noise substream with dsm_lid, so the spectrum's trace equals
    the denoising loss at x as an algebraic identity.
    """
    params.validate()
    x = np.asarray(x, float)
    eps = _noise_draws(params, point_index, x.size)
    pred = field.epsilon_batch(x + params.sigma * eps, params.sigma)
    resid = eps - pred
    return sym_eig(resid.T @ resid / params.m)


# ---------------------------------------------------------------------------
# cloud-level estimation


@dataclass
class LIDReport:
    """Per-point estimates plus evaluation accounting for one estimator run."""

    estimator: str
    params: dict
    estimates: np.ndarray
    true_lid: np.ndarray
    score_evals: np.ndarray
    jvp_evals: np.ndarray
    runtime_ms: float = 0.0

    def mae(self):
        if self.true_lid is None:
            return None
        return float(np.mean(np.abs(self.estimates - self.true_lid)))

    def mean(self) -> float:
        return float(np.mean(self.estimates))

    def stddev(self) -> float:
        return float(np.std(self.estimates))

    def negative_count(self) -> int:
        return int(np.sum(self.estimates < 0))


def resolve_threads(threads=None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("LIDKIT_THREADS", "").strip()
    return max(1, int(env)) if env else 1


def estimate_cloud(field: ScoreField, cloud: PointCloud, estimator: str,
                   params: EstimatorParams, threads=None) -> LIDReport:
    """Run one pointwise estimator over every cloud point.

    Points are independent tasks on forked fields with per-index substreams,
    so results and counters are identical for any thread count.
    """
    if estimator not in CLOUD_ESTIMATORS:
        raise ConfigError(f"unknown estimator {estimator!r}; "
                          f"expected one of {CLOUD_ESTIMATORS}")
    params.validate()
    pts = np.asarray(cloud.points, float)
    n = pts.shape[1]

    def run_point(i: int):
        fork = field.fork()
        x = pts[i]
        try:
            if estimator == "dsm":
                value = dsm_lid(fork, x, params, point_index=i)
            elif estimator == "flipd":
                if params.flipd_noised:
                    draw = RngStream(params.seed, _S_NOISED + i).gaussians(n)
                    x = x + params.sigma * draw
                value = flipd(fork, x, params, point_index=i)
            else:
                value = float(normal_bundle_lid(fork, x, params, point_index=i))
        except Exception as exc:
            raise RuntimeError(f"estimation failed at point {i}") from exc
        return value, fork.counters

    start = time.perf_counter()
    n_workers = resolve_threads(threads)
    if n_workers == 1:
        results = [run_point(i) for i in range(cloud.n_points)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_point, range(cloud.n_points)))
    runtime_ms = (time.perf_counter() - start) * 1e3

    estimates = np.array([v for v, _ in results])
    score_evals = np.array([c.score_evals for _, c in results], dtype=np.int64)
    jvp_evals = np.array([c.jvp_evals for _, c in results], dtype=np.int64)
    for _, c in results:
        field.counters.add(c)
    return LIDReport(estimator=estimator, params=asdict(params),
                     estimates=estimates, true_lid=cloud.true_lid,
                     score_evals=score_evals, jvp_evals=jvp_evals,
                     runtime_ms=runtime_ms)


def write_report_csv(report: LIDReport, path):
    lines = ["point_index,estimate,true_lid,score_evals,jvp_evals"]
    for i, est in enumerate(report.estimates):
        true = "" if report.true_lid is None else int(report.true_lid[i])
        lines.append(f"{i},{float(est)!r},{true},"
                     f"{int(report.score_evals[i])},{int(report.jvp_evals[i])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def report_summary(report: LIDReport, include_runtime: bool = True) -> dict:
    return {
        "estimator": report.estimator,
        "params": report.params,
        "mae": report.mae(),
        "mean": report.mean(),
        "stddev": report.stddev(),
        "negative_estimates": report.negative_count(),
        "score_evals": int(np.sum(report.score_evals)),
        "jvp_evals": int(np.sum(report.jvp_evals)),
        "runtime_ms": report.runtime_ms if include_runtime else 0.0,
    }


def write_report_json(report: LIDReport, path, include_runtime: bool = True):
    with open(path, "w") as fh:
        json.dump(report_summary(report, include_runtime), fh,
                  sort_keys=True, indent=2)
        fh.write("\n")
