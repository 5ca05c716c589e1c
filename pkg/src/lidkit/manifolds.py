"""Synthetic point clouds from manifolds of known local intrinsic dimension.

Each family builds points in a latent chart, zero-pads to the ambient
dimension, and applies a seeded random rotation (plus an optional seeded
coordinate permutation). Per-point draws use per-index RNG substreams, so a
cloud is a pure function of its spec.
"""

import struct
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, FormatError, UnsupportedFamilyError
from .numerics import RngStream, random_orthogonal

FAMILIES = (
    "hypersphere",
    "hyperball",
    "twinpeaks_graph",
    "clifford_torus",
    "nonlinear",
    "affine_gaussian",
    "point_mixture",
)

_DIFFERENTIABLE = ("twinpeaks_graph", "nonlinear", "clifford_torus",
                   "affine_gaussian")

# cloud-level stream ids; per-point latent draws use streams 0..N-1
_S_EMBED = 1 << 40
_S_PERM = _S_EMBED + 1
_S_W1 = _S_EMBED + 2
_S_W2 = _S_EMBED + 3
_S_ANCHORS = _S_EMBED + 4
_S_PROBE = _S_EMBED + 5

_BINARY_MAGIC = b"LIDC1"


@dataclass(frozen=True)
class ManifoldSpec:
    """Generator parameters for one benchmark cloud."""

    family: str
    d: int
    n: int
    N: int = 2000
    seed: int = 0
    permute_dims: bool = False
    radius: float = 1.0          # hypersphere / hyperball
    height: float = 0.3          # twinpeaks_graph bump amplitude
    anchors: int = 4             # point_mixture anchor count
    anchor_scale: float = 1.0    # point_mixture anchor spread
    embed_seed: Optional[int] = None  # reseed only the rotation/permutation

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}")
        if self.N < 1:
            raise ConfigError("N must be at least 1")
        if not 0 <= self.d <= self.n:
            raise ConfigError("d must satisfy family constraint 0 <= d <= n")
        lo = {"hypersphere": 1, "hyperball": 1, "twinpeaks_graph": 1,
              "clifford_torus": 1, "nonlinear": 1, "affine_gaussian": 0,
              "point_mixture": 0}[self.family]
        if self.d < lo:
            raise ConfigError(f"d must satisfy family constraint d >= {lo} "
                              f"for {self.family}")
        if self.family == "point_mixture":
            if self.d != 0:
                raise ConfigError("d must satisfy family constraint d = 0 "
                                  "for point_mixture")
            if self.anchors < 1:
                raise ConfigError("point_mixture needs at least one anchor")
        need = self.pad_dim
        if need > self.n:
            raise ConfigError(
                f"d must satisfy family constraint: {self.family} needs "
                f"n >= {need}, got n = {self.n}")
        if self.family in ("hypersphere", "hyperball") and self.radius <= 0:
            raise ConfigError("radius must be positive")

    @property
    def pad_dim(self) -> int:
        """Dimension of the construction before zero-padding."""
        return {
            "hypersphere": self.d + 1,
            "hyperball": self.d,
            "twinpeaks_graph": self.d + 1,
            "clifford_torus": 2 * self.d,
            "nonlinear": self.n,
            "affine_gaussian": self.d,
            "point_mixture": self.n,
        }[self.family]

    @property
    def latent_dim(self) -> int:
        """Dimension of the latent chart (finite-difference probe space)."""
        return self.d


@dataclass
class PointCloud:
    """N points in R^n with per-point true-LID labels."""

    points: np.ndarray
    true_lid: np.ndarray
    spec: Optional[ManifoldSpec] = None

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def ambient_dim(self) -> int:
        return self.points.shape[1]


def embedding(spec: ManifoldSpec):
    """(rotation Q, permutation or None) used to embed the construction."""
    key = spec.seed if spec.embed_seed is None else spec.embed_seed
    q = random_orthogonal(RngStream(key, _S_EMBED), spec.n)
    perm = RngStream(key, _S_PERM).permutation(spec.n) if spec.permute_dims else None
    return q, perm


def _nonlinear_weights(spec: ManifoldSpec):
    d, n = spec.d, spec.n
    # fan-in scaling keeps tanh out of saturation so the map stays rank d
    w1 = RngStream(spec.seed, _S_W1).gaussians(2 * d * d).reshape(2 * d, d)
    w1 /= np.sqrt(d)
    w2 = RngStream(spec.seed, _S_W2).gaussians(n * 2 * d).reshape(n, 2 * d)
    w2 /= np.sqrt(2 * d)
    return w1, w2


def _raw_anchors(spec: ManifoldSpec) -> np.ndarray:
    a = RngStream(spec.seed, _S_ANCHORS).gaussians(spec.anchors * spec.n)
    return spec.anchor_scale * a.reshape(spec.anchors, spec.n)


def _construct_point(spec: ManifoldSpec, rng: RngStream,
                     anchors: Optional[np.ndarray],
                     weights) -> np.ndarray:
    d = spec.d
    fam = spec.family
    if fam == "hypersphere":
        z = rng.gaussians(d + 1)
        return spec.radius * z / max(np.linalg.norm(z), 1e-300)
    if fam == "hyperball":
        u = rng.gaussians(d)
        u /= max(np.linalg.norm(u), 1e-300)
        rho = rng.uniforms(1)[0] ** (1.0 / d)
        return spec.radius * rho * u
    if fam == "twinpeaks_graph":
        u = rng.uniforms(d)
        return np.concatenate([u, [spec.height * np.prod(np.sin(2 * np.pi * u))]])
    if fam == "clifford_torus":
        theta = 2 * np.pi * rng.uniforms(d)
        out = np.empty(2 * d)
        out[0::2] = np.cos(theta)
        out[1::2] = np.sin(theta)
        return out / np.sqrt(d)
    if fam == "nonlinear":
        z = rng.gaussians(d)
        w1, w2 = weights
        return np.tanh(w2 @ np.tanh(w1 @ z))
    if fam == "affine_gaussian":
        return rng.gaussians(d) if d > 0 else np.zeros(0)
    if fam == "point_mixture":
        j = int(rng.integers(1, spec.anchors)[0])
        return anchors[j]
    raise UnsupportedFamilyError(fam)


def sample(spec: ManifoldSpec) -> PointCloud:
    """Draw N points from the manifold family described by `spec`."""
    spec.validate()
    anchors = _raw_anchors(spec) if spec.family == "point_mixture" else None
    weights = _nonlinear_weights(spec) if spec.family == "nonlinear" else None
    raw = np.zeros((spec.N, spec.n))
    for i in range(spec.N):
        p = _construct_point(spec, RngStream(spec.seed, i), anchors, weights)
        raw[i, :p.shape[0]] = p
    q, perm = embedding(spec)
    pts = raw @ q.T
    if perm is not None:
        pts = pts[:, perm]
    lid = 0 if spec.family == "point_mixture" else spec.d
    return PointCloud(points=pts, true_lid=np.full(spec.N, lid, dtype=np.int64),
                      spec=spec)


def affine_frame(spec: ManifoldSpec):
    """Effective orthonormal frame and offset of an affine_gaussian cloud."""
    if spec.family != "affine_gaussian":
        raise UnsupportedFamilyError("affine_frame requires affine_gaussian")
    q, perm = embedding(spec)
    u = q[:, :spec.d]
    if perm is not None:
        u = u[perm, :]
    return u, np.zeros(spec.n)


def embedded_anchors(spec: ManifoldSpec) -> np.ndarray:
    """Anchor locations of a point_mixture cloud, in ambient coordinates."""
    if spec.family != "point_mixture":
        raise UnsupportedFamilyError("embedded_anchors requires point_mixture")
    q, perm = embedding(spec)
    a = _raw_anchors(spec) @ q.T
    if perm is not None:
        a = a[:, perm]
    return a


def latent_map(spec: ManifoldSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Latent-to-ambient map for the differentiable families."""
    if spec.family not in _DIFFERENTIABLE:
        raise UnsupportedFamilyError(
            f"{spec.family} has no differentiable latent chart")
    q, perm = embedding(spec)
    weights = _nonlinear_weights(spec) if spec.family == "nonlinear" else None

    def lift(z: np.ndarray) -> np.ndarray:
        if spec.family == "twinpeaks_graph":
            raw = np.concatenate(
                [z, [spec.height * np.prod(np.sin(2 * np.pi * z))]])
        elif spec.family == "clifford_torus":
            raw = np.empty(2 * spec.d)
            raw[0::2] = np.cos(z)
            raw[1::2] = np.sin(z)
            raw /= np.sqrt(spec.d)
        elif spec.family == "nonlinear":
            w1, w2 = weights
            raw = np.tanh(w2 @ np.tanh(w1 @ z))
        else:  # affine_gaussian
            raw = z
        full = np.zeros(spec.n)
        full[:raw.shape[0]] = raw
        out = q @ full
        return out[perm] if perm is not None else out

    return lift


def jacobian_rank_check(spec: ManifoldSpec, probes: int = 20,
                        step: float = 1e-5) -> int:
    """Minimum numerical Jacobian rank over random latent probe points.

    Rank counts singular values above 1e-6 times the largest, with the
    Jacobian estimated by central finite differences.
    """
    spec.validate()
    lift = latent_map(spec)
    d = spec.latent_dim
    if d == 0:
        return 0
    rng = RngStream(spec.seed, _S_PROBE)
    ranks = []
    for _ in range(probes):
        if spec.family == "twinpeaks_graph":
            z = 0.2 + 0.6 * rng.uniforms(d)
        elif spec.family == "clifford_torus":
            z = 2 * np.pi * rng.uniforms(d)
        else:
            z = rng.gaussians(d)
        jac = np.empty((spec.n, d))
        for kdx in range(d):
            e = np.zeros(d)
            e[kdx] = step
            jac[:, kdx] = (lift(z + e) - lift(z - e)) / (2 * step)
        sv = np.linalg.svd(jac, compute_uv=False)
        ranks.append(int(np.sum(sv > 1e-6 * sv[0])) if sv[0] > 0 else 0)
    return min(ranks)


def reembedded(spec: ManifoldSpec, embed_seed: int) -> ManifoldSpec:
    """Same latent draws, different isometric embedding."""
    return replace(spec, embed_seed=embed_seed)


# ---------------------------------------------------------------------------
# serialization


def write_csv(cloud: PointCloud, path):
    n = cloud.ambient_dim
    header = ",".join([f"x{j}" for j in range(n)] + ["true_lid"])
    lines = [header]
    for i in range(cloud.n_points):
        coords = ",".join(repr(float(v)) for v in cloud.points[i])
        lines.append(f"{coords},{int(cloud.true_lid[i])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> PointCloud:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if header[-1] != "true_lid" or not header[0].startswith("x"):
            raise FormatError(f"{path}: not a point-cloud CSV")
        n = len(header) - 1
        pts, lid = [], []
        for line in fh:
            cells = line.strip().split(",")
            if len(cells) != n + 1:
                raise FormatError(f"{path}: row width {len(cells)} != {n + 1}")
            pts.append([float(c) for c in cells[:n]])
            lid.append(int(cells[n]))
    return PointCloud(points=np.array(pts, dtype=np.float64),
                      true_lid=np.array(lid, dtype=np.int64))


def write_binary(cloud: PointCloud, path):
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<II", cloud.n_points, cloud.ambient_dim))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
        fh.write(cloud.true_lid.astype("<u4").tobytes())


def read_binary(path) -> PointCloud:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _BINARY_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        n_points, n = struct.unpack("<II", fh.read(8))
        pts = np.frombuffer(fh.read(8 * n_points * n), dtype="<f8")
        if pts.size != n_points * n:
            raise FormatError(f"{path}: truncated point block")
        lid = np.frombuffer(fh.read(4 * n_points), dtype="<u4")
        if lid.size != n_points:
            raise FormatError(f"{path}: truncated label block")
    return PointCloud(points=pts.reshape(n_points, n).astype(np.float64),
                      true_lid=lid.astype(np.int64))


def save_cloud(cloud: PointCloud, path):
    """CSV when the path ends in .csv, compact binary otherwise."""
    if str(path).endswith(".csv"):
        write_csv(cloud, path)
    else:
        write_binary(cloud, path)


def load_cloud(path) -> PointCloud:
    if str(path).endswith(".csv"):
        return read_csv(path)
    return read_binary(path)
