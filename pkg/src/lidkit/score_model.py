"""Trainable skip-connection MLP for noise (or velocity) prediction.

The network is written directly in numpy: reverse-mode parameter gradients
and forward-mode input directional derivatives are hand-derived and exact,
which keeps the estimator verification chain free of autodiff framework
dependencies. Training uses the denoising objective by default; a velocity
target with the standard conversion to noise prediction is also supported.
"""

import json
import struct
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .errors import (
    EvaluationError,
    FormatError,
    ParameterizationError,
    TrainingDivergedError,
)
from .manifolds import PointCloud
from .numerics import RngStream

_CKPT_MAGIC = b"LIDM1"

# training streams derived from TrainConfig.seed
_S_BATCH = 1
_S_SIGMA = 2
_S_NOISE = 3


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    width: int = 256
    depth: int = 4
    activation: str = "silu"          # silu | identity
    sigma_embed: str = "sinusoidal"   # sinusoidal | scalar
    embed_frequencies: int = 16
    target: str = "epsilon"           # epsilon | velocity

    def __post_init__(self):
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be at least 1")
        if self.activation not in ("silu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.sigma_embed not in ("sinusoidal", "scalar"):
            raise ValueError(f"unknown sigma embedding {self.sigma_embed!r}")
        if self.target not in ("epsilon", "velocity"):
            raise ValueError(f"unknown target {self.target!r}")

    @property
    def feature_dim(self) -> int:
        extra = 2 * self.embed_frequencies if self.sigma_embed == "sinusoidal" else 1
        return self.input_dim + extra

    def tensor_shapes(self):
        """(name, shape) pairs in serialization order."""
        f, w, n = self.feature_dim, self.width, self.input_dim
        shapes = [("W1", (w, f)), ("b1", (w,))]
        for layer in range(2, self.depth + 1):
            shapes += [(f"W{layer}", (w, w)), (f"S{layer}", (w, f)),
                       (f"b{layer}", (w,))]
        shapes += [("Wout", (n, w)), ("bout", (n,))]
        return shapes


@dataclass(frozen=True)
class TrainConfig:
    batches: int = 20000
    batch_size: int = 100
    lr: float = 1e-3
    lr_min: float = 1e-5
    sigma_min: float = 0.005
    sigma_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.batches < 1:
            raise ValueError("batches must be at least 1")
        if self.sigma_min <= 0 or self.sigma_max < self.sigma_min:
            raise ValueError("need 0 < sigma_min <= sigma_max")


class MLPModel:
    """Parameters plus architecture descriptor."""

    def __init__(self, config: MLPConfig, params: dict):
        self.config = config
        self.params = params
        self.sigma_range = None  # set after training

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def init_model(config: MLPConfig, seed: int = 0) -> MLPModel:
    """Fan-in-scaled Gaussian init; final layer zeroed (prior-mean start)."""
    rng = RngStream(seed, 0)
    params = {}
    for name, shape in config.tensor_shapes():
        if name.startswith("b") or name == "Wout":
            params[name] = np.zeros(shape)
        else:
            fan_in = shape[1]
            params[name] = rng.gaussians(int(np.prod(shape))).reshape(shape) \
                / np.sqrt(fan_in)
    return MLPModel(config, params)


def _act(config: MLPConfig, a: np.ndarray) -> np.ndarray:
    if config.activation == "identity":
        return a
    with np.errstate(over="ignore"):  # exp overflow saturates correctly
        return a / (1.0 + np.exp(-a))


def _act_deriv(config: MLPConfig, a: np.ndarray) -> np.ndarray:
    if config.activation == "identity":
        return np.ones_like(a)
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a))
    return s * (1.0 + a * (1.0 - s))


def _features(config: MLPConfig, xs: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    t = np.log(sigmas)[:, None]
    if config.sigma_embed == "scalar":
        return np.concatenate([xs, t], axis=1)
    k = config.embed_frequencies
    omega = 10000.0 ** (-np.arange(k) / max(k - 1, 1))
    phase = t * omega[None, :]
    return np.concatenate([xs, np.sin(phase), np.cos(phase)], axis=1)


def _forward_pass(model: MLPModel, xs: np.ndarray, sigmas: np.ndarray):
    """Returns (prediction, cache) for a batch."""
    cfg, p = model.config, model.params
    feats = _features(cfg, xs, sigmas)
    pre, hidden = [], []
    a = feats @ p["W1"].T + p["b1"]
    pre.append(a)
    h = _act(cfg, a)
    hidden.append(h)
    for layer in range(2, cfg.depth + 1):
        a = h @ p[f"W{layer}"].T + feats @ p[f"S{layer}"].T + p[f"b{layer}"]
        pre.append(a)
        h = _act(cfg, a)
        hidden.append(h)
    y = h @ p["Wout"].T + p["bout"]
    return y, (feats, pre, hidden)


def forward_batch(model: MLPModel, xs: np.ndarray, sigmas) -> np.ndarray:
    xs = np.atleast_2d(np.asarray(xs, float))
    sigmas = np.broadcast_to(np.asarray(sigmas, float), (xs.shape[0],))
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(sigmas))):
        raise EvaluationError("non-finite model input")
    if np.any(sigmas <= 0):
        raise ValueError("sigma must be positive")
    if model.sigma_range is not None:
        lo, hi = model.sigma_range
        if np.any(sigmas < lo) or np.any(sigmas > hi):
            warnings.warn(f"sigma outside trained range [{lo}, {hi}]",
                          stacklevel=2)
    return _forward_pass(model, xs, sigmas)[0]


def forward(model: MLPModel, x: np.ndarray, sigma: float) -> np.ndarray:
    """Single-point prediction in the model's target parameterization."""
    return forward_batch(model, np.asarray(x, float)[None, :], sigma)[0]


def loss_and_grad(model: MLPModel, xs: np.ndarray, eps: np.ndarray,
                  sigmas: np.ndarray):
    """Mean squared prediction error over a batch and its exact gradient.

    The noised input and regression target follow the model's target:
    epsilon predicts eps from x + sigma*eps; velocity predicts eps - x from
    (1-sigma)*x + sigma*eps.
    """
    cfg, p = model.config, model.params
    xs = np.atleast_2d(np.asarray(xs, float))
    eps = np.atleast_2d(np.asarray(eps, float))
    if xs.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    sigmas = np.broadcast_to(np.asarray(sigmas, float), (xs.shape[0],))
    s = sigmas[:, None]
    if cfg.target == "epsilon":
        noised, target = xs + s * eps, eps
    else:
        noised, target = (1.0 - s) * xs + s * eps, eps - xs

    y, (feats, pre, hidden) = _forward_pass(model, noised, sigmas)
    resid = y - target
    batch = xs.shape[0]
    loss = float(np.sum(resid**2) / batch)

    grads = {}
    d_y = 2.0 * resid / batch
    grads["Wout"] = d_y.T @ hidden[-1]
    grads["bout"] = d_y.sum(axis=0)
    d_h = d_y @ p["Wout"]
    for layer in range(cfg.depth, 1, -1):
        d_a = d_h * _act_deriv(cfg, pre[layer - 1])
        grads[f"W{layer}"] = d_a.T @ hidden[layer - 2]
        grads[f"S{layer}"] = d_a.T @ feats
        grads[f"b{layer}"] = d_a.sum(axis=0)
        d_h = d_a @ p[f"W{layer}"]
    d_a = d_h * _act_deriv(cfg, pre[0])
    grads["W1"] = d_a.T @ feats
    grads["b1"] = d_a.sum(axis=0)
    return loss, grads


def input_jvp_many(model: MLPModel, x: np.ndarray, sigma: float,
                   vs: np.ndarray) -> np.ndarray:
    """Exact directional derivatives of the prediction w.r.t. the input.

    One primal evaluation at x; the tangent rows of vs propagate in
    forward mode (sigma is held fixed, so its embedding has zero tangent).
    """
    cfg, p = model.config, model.params
    vs = np.atleast_2d(np.asarray(vs, float))
    x = np.asarray(x, float)
    if not np.all(np.isfinite(x)):
        raise EvaluationError("non-finite model input")
    _, (feats, pre, _) = _forward_pass(model, x[None, :],
                                       np.array([float(sigma)]))
    d_feats = np.zeros((vs.shape[0], cfg.feature_dim))
    d_feats[:, :cfg.input_dim] = vs
    d_a = d_feats @ p["W1"].T
    d_h = _act_deriv(cfg, pre[0]) * d_a
    for layer in range(2, cfg.depth + 1):
        d_a = d_h @ p[f"W{layer}"].T + d_feats @ p[f"S{layer}"].T
        d_h = _act_deriv(cfg, pre[layer - 1]) * d_a
    return d_h @ p["Wout"].T


def input_jvp(model: MLPModel, x: np.ndarray, sigma: float,
              v: np.ndarray) -> np.ndarray:
    return input_jvp_many(model, x, sigma, np.asarray(v, float)[None, :])[0]


def to_epsilon(model: MLPModel, x: np.ndarray, sigma: float) -> np.ndarray:
    """Noise prediction from a velocity model: (1 - sigma) v + x."""
    if model.config.target != "velocity":
        raise ParameterizationError("model does not predict velocity")
    if not 0.0 < sigma < 1.0:
        raise ParameterizationError("conversion requires sigma in (0, 1)")
    return (1.0 - sigma) * forward(model, x, sigma) + np.asarray(x, float)


def epsilon_from_velocity(v: np.ndarray, x: np.ndarray, sigma) -> np.ndarray:
    """Array form of the velocity-to-noise conversion."""
    s = np.asarray(sigma, float)
    if v.ndim == 2 and s.ndim == 1:
        s = s[:, None]
    return (1.0 - s) * v + x


def cosine_lr(cfg: TrainConfig, step: int) -> float:
    span = max(cfg.batches - 1, 1)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (
        1.0 + np.cos(np.pi * step / span))


def train(model: MLPModel, cloud: PointCloud, cfg: TrainConfig):
    """Denoising (or flow) training with Adam and a cosine-annealed rate.

    Returns (model, loss_trace). Raises TrainingDivergedError when the batch
    loss exceeds 1e6 or stops being finite.
    """
    if cloud.n_points == 0:
        raise ValueError("cloud must be non-empty")
    pts = np.asarray(cloud.points, float)
    n = pts.shape[1]
    rng_idx = RngStream(cfg.seed, _S_BATCH)
    rng_sigma = RngStream(cfg.seed, _S_SIGMA)
    rng_eps = RngStream(cfg.seed, _S_NOISE)

    beta1, beta2, adam_eps = 0.9, 0.999, 1e-8
    m1 = {k: np.zeros_like(v) for k, v in model.params.items()}
    m2 = {k: np.zeros_like(v) for k, v in model.params.items()}
    log_lo, log_hi = np.log(cfg.sigma_min), np.log(cfg.sigma_max)

    losses = np.empty(cfg.batches)
    for step in range(cfg.batches):
        idx = rng_idx.integers(cfg.batch_size, cloud.n_points)
        sigmas = np.exp(log_lo + (log_hi - log_lo)
                        * rng_sigma.uniforms(cfg.batch_size))
        eps = rng_eps.gaussians(cfg.batch_size * n).reshape(cfg.batch_size, n)
        loss, grads = loss_and_grad(model, pts[idx], eps, sigmas)
        if not np.isfinite(loss) or loss > 1e6:
            raise TrainingDivergedError(f"loss {loss} at batch {step}")
        losses[step] = loss
        lr = cosine_lr(cfg, step)
        t = step + 1
        corr = np.sqrt(1.0 - beta2**t) / (1.0 - beta1**t)
        for k, g in grads.items():
            m1[k] = beta1 * m1[k] + (1 - beta1) * g
            m2[k] = beta2 * m2[k] + (1 - beta2) * g * g
            model.params[k] -= lr * corr * m1[k] / (np.sqrt(m2[k]) + adam_eps)
    model.sigma_range = (cfg.sigma_min, cfg.sigma_max)
    return model, losses


def save_checkpoint(model: MLPModel, path):
    """Magic LIDM1, length-prefixed config JSON, then f64 tensors in order."""
    meta = {"config": asdict(model.config),
            "sigma_range": list(model.sigma_range) if model.sigma_range else None}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, _ in model.config.tensor_shapes():
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> MLPModel:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _CKPT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(blob_len).decode())
        config = MLPConfig(**meta["config"])
        params = {}
        for name, shape in config.tensor_shapes():
            count = int(np.prod(shape))
            raw = np.frombuffer(fh.read(8 * count), dtype="<f8")
            if raw.size != count:
                raise FormatError(f"{path}: truncated tensor {name}")
            params[name] = raw.reshape(shape).astype(np.float64)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    model = MLPModel(config, params)
    if meta.get("sigma_range"):
        model.sigma_range = tuple(meta["sigma_range"])
    return model
