"""Deterministic randomness, symmetric eigensolving, and neighbor search.

Every random draw in the package is a pure function of (key, stream, counter),
so per-point noise is reproducible regardless of evaluation order or thread
schedule. The eigensolver is a cyclic Jacobi iteration: at the matrix sizes
used here (n <= 512) it is accurate to near machine precision and keeps the
spectral path free of solver-version drift.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, InsufficientPointsError, ShapeError

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX_A = np.uint64(0xBF58476D1CE4E5B9)
_MIX_B = np.uint64(0x94D049BB133111EB)
_U53 = float(2.0**-53)


def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer: a full-avalanche bijection on uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX_A
        z = (z ^ (z >> np.uint64(27))) * _MIX_B
        return z ^ (z >> np.uint64(31))


def _stream_base(key: int, stream: int) -> np.uint64:
    """Per-(key, stream) sequence origin, avalanche-mixed twice."""
    raw = np.array([key, stream], dtype=np.uint64)
    mixed = _mix64(raw)
    with np.errstate(over="ignore"):
        combined = mixed[0:1] ^ (mixed[1:2] + _GOLDEN)
    return _mix64(combined)[0]


@dataclass
class RngStream:
    """Counter-based generator: draws depend only on (key, stream, counter).

    Identical (key, stream) pairs replay bit-identical sequences; distinct
    streams under one key are statistically independent. The counter advances
    by the number of 64-bit words consumed.
    """

    key: int
    stream: int = 0
    counter: int = 0
    _base: np.uint64 = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._base = _stream_base(self.key & 0xFFFFFFFFFFFFFFFF,
                                  self.stream & 0xFFFFFFFFFFFFFFFF)

    def substream(self, index: int) -> "RngStream":
        """Fresh stream derived from this stream's id and an index."""
        return RngStream(self.key, (self.stream + index) & 0xFFFFFFFFFFFFFFFF)

    def u64_block(self, count: int) -> np.ndarray:
        """Next `count` raw 64-bit words."""
        idx = np.arange(self.counter, self.counter + count, dtype=np.uint64)
        self.counter += count
        with np.errstate(over="ignore"):
            return _mix64(self._base + idx * _GOLDEN)

    def uniforms(self, count: int) -> np.ndarray:
        """Doubles in (0, 1], using the top 53 bits of each word."""
        bits = self.u64_block(count) >> np.uint64(11)
        return (bits.astype(np.float64) + 1.0) * _U53

    def gaussians(self, count: int) -> np.ndarray:
        """Standard normals via Box-Muller; consumes 2*ceil(count/2) words."""
        pairs = (count + 1) // 2
        u = self.uniforms(2 * pairs)
        r = np.sqrt(-2.0 * np.log(u[:pairs]))
        theta = (2.0 * np.pi) * u[pairs:]
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:count]

    def integers(self, count: int, bound: int) -> np.ndarray:
        """Integers in [0, bound). Bias is < bound/2^53, negligible here."""
        if bound <= 0:
            raise DimensionError("bound must be positive")
        return np.minimum((self.uniforms(count) * bound).astype(np.int64),
                          bound - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Uniform permutation of range(n) by sorting raw draws."""
        return np.argsort(self.u64_block(n), kind="stable")


def gaussian_vector(rng: RngStream, dim: int) -> np.ndarray:
    """`dim` independent standard-normal draws from `rng`."""
    if dim < 1:
        raise DimensionError("dim must be at least 1")
    return rng.gaussians(dim)


def random_orthogonal(rng: RngStream, n: int) -> np.ndarray:
    """Haar-ish random orthogonal matrix (QR of a Gaussian, sign-fixed)."""
    if n < 1:
        raise DimensionError("n must be at least 1")
    a = rng.gaussians(n * n).reshape(n, n)
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


@dataclass
class Spectrum:
    """Eigenvalues of a symmetric (Gram) matrix, descending, plus its trace."""

    eigenvalues: np.ndarray
    trace: float


def sym_eig(g: np.ndarray, vectors: bool = False, tol: float = 1e-12,
            max_sweeps: int = 100):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps until the off-diagonal Frobenius norm falls below tol times the
    matrix Frobenius norm. Returns a Spectrum, or (Spectrum, V) with
    eigenvectors as columns when `vectors` is set.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeError("sym_eig requires a square matrix")
    scale = max(1.0, float(np.max(np.abs(g))) if g.size else 0.0)
    if float(np.max(np.abs(g - g.T))) > 1e-9 * scale:
        raise ShapeError("sym_eig requires a symmetric matrix")

    n = g.shape[0]
    a = (g + g.T) / 2.0
    v = np.eye(n)
    fro = float(np.linalg.norm(a))
    if fro > 0.0:
        for _ in range(max_sweeps):
            off = np.linalg.norm(a - np.diag(np.diag(a)))
            if off <= tol * fro:
                break
            for p in range(n - 1):
                for q in range(p + 1, n):
                    apq = a[p, q]
                    if apq == 0.0:
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0))
                    if theta == 0.0:
                        t = 1.0
                    c = 1.0 / np.sqrt(t * t + 1.0)
                    s = t * c
                    rp, rq = a[p, :].copy(), a[q, :].copy()
                    a[p, :] = c * rp - s * rq
                    a[q, :] = s * rp + c * rq
                    cp, cq = a[:, p].copy(), a[:, q].copy()
                    a[:, p] = c * cp - s * cq
                    a[:, q] = s * cp + c * cq
                    a[p, q] = a[q, p] = 0.0
                    vp, vq = v[:, p].copy(), v[:, q].copy()
                    v[:, p] = c * vp - s * vq
                    v[:, q] = s * vp + c * vq

    order = np.argsort(-np.diag(a), kind="stable")
    spectrum = Spectrum(eigenvalues=np.diag(a)[order].copy(),
                        trace=float(np.trace(g)))
    if vectors:
        return spectrum, v[:, order]
    return spectrum


def knn(points: np.ndarray, query_index: int, k: int):
    """(distances, indices) of the k nearest neighbors of one point.

    Exhaustive Euclidean search; the query point itself is excluded by index,
    and ties are broken toward the smaller point index.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=np.float64)
    n_points = pts.shape[0]
    if k < 1:
        raise DimensionError("k must be at least 1")
    if k >= n_points:
        raise InsufficientPointsError(
            f"k={k} requires at least {k + 1} points, have {n_points}")
    diff = pts - pts[query_index]
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((np.arange(n_points), dist))
    order = order[order != query_index][:k]
    return dist[order], order


def knn_distances(points: np.ndarray, query_index: int, k: int) -> np.ndarray:
    """Ascending distances to the k nearest neighbors of one point."""
    return knn(points, query_index, k)[0]
