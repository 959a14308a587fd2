"""Deterministic linear algebra and seeded sampling primitives.

Everything downstream (model init, watermark keys, verification probes,
partition draws, attack analysis) draws randomness through RngStream, so a
run is a pure function of its seed and the stream labels it touches.
Matrices are plain 2-D float64 numpy arrays in row-major order.

The samplers are implemented on top of raw uniform doubles from a PCG64
bit generator: Gaussians via the Box-Muller transform, gamma variates via
Marsaglia-Tsang, shuffles via Fisher-Yates. This keeps every draw a
documented function of the bit stream instead of relying on numpy's
distribution internals, which are not guaranteed stable across releases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

__all__ = [
    "NumericalError",
    "StreamLabel",
    "RngStream",
    "as_matrix",
    "gaussian_matrix",
    "frobenius_norm",
    "Spectrum",
    "sym_eig",
    "pca",
    "orthonormal_columns",
    "cosine",
]


class NumericalError(RuntimeError):
    """An iterative routine failed to converge or produced non-finite values."""


class StreamLabel(IntEnum):
    """Purpose tag for a random stream. Distinct labels never share draws."""

    DATA = 0
    MODEL_INIT = 1
    WATERMARK_KEY = 2
    VERIFICATION = 3
    NOISE = 4
    ATTACK = 5


class RngStream:
    """Seeded random stream keyed by (seed, label, path).

    Two streams built with the same key produce identical draw sequences;
    any difference in seed, label, or path yields a statistically
    independent stream (the key is hashed into the PCG64 state through
    numpy's SeedSequence). ``child(*path)`` derives a sub-stream without
    disturbing the parent, which is how per-client and per-round streams
    are split off a single experiment seed.
    """

    def __init__(self, seed: int, label: StreamLabel, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.label = StreamLabel(label)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(int(self.label),) + self.path
        )
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, label={self.label.name}, path={self.path})"

    def child(self, *path: int) -> "RngStream":
        return RngStream(self.seed, self.label, self.path + tuple(path))

    def uniform(self, n: int) -> np.ndarray:
        """n uniform doubles in [0, 1)."""
        return self._gen.random(int(n))

    def normal(self, n: int) -> np.ndarray:
        """n standard normal doubles via Box-Muller on uniform pairs."""
        m = (int(n) + 1) // 2
        # 1 - u maps [0,1) onto (0,1] so the log is always finite.
        u1 = 1.0 - self._gen.random(m)
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
        return z[: int(n)]

    def integers(self, lo: int, hi: int, n: int | None = None):
        """Integers in [lo, hi). Scalar when n is None."""
        if hi <= lo:
            raise ValueError(f"empty integer range [{lo}, {hi})")
        span = hi - lo
        if n is None:
            return lo + int(self._gen.random() * span)
        return lo + (self._gen.random(int(n)) * span).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        idx = np.arange(int(n), dtype=np.int64)
        for i in range(int(n) - 1, 0, -1):
            j = int(self._gen.random() * (i + 1))
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def gamma(self, shape: float) -> float:
        """One gamma(shape, 1) variate via Marsaglia-Tsang squeeze."""
        if shape <= 0.0:
            raise ValueError(f"gamma shape must be positive, got {shape}")
        if shape < 1.0:
            # Boost: gamma(a) = gamma(a + 1) * U^(1/a).
            u = 1.0 - self._gen.random()
            return self.gamma(shape + 1.0) * u ** (1.0 / shape)
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = float(self.normal(1)[0])
            v = (1.0 + c * x) ** 3
            if v <= 0.0:
                continue
            u = 1.0 - self._gen.random()
            if math.log(u) < 0.5 * x * x + d - d * v + d * math.log(v):
                return d * v

    def dirichlet(self, alpha: float, n: int) -> np.ndarray:
        """A point on the n-simplex from a symmetric Dirichlet(alpha)."""
        g = np.array([self.gamma(alpha) for _ in range(int(n))])
        total = g.sum()
        if total <= 0.0 or not np.isfinite(total):
            raise NumericalError("dirichlet draw degenerated to a zero vector")
        return g / total

    def lognormal(self, sigma: float, n: int) -> np.ndarray:
        """n draws of exp(sigma * Z) with Z standard normal."""
        return np.exp(sigma * self.normal(n))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Validate and return a 2-D float64 array with finite entries."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def gaussian_matrix(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    """rows x cols matrix of IID standard normals from the given stream."""
    if rows < 1 or cols < 1:
        raise ValueError(f"matrix dimensions must be positive, got {rows}x{cols}")
    out = rng.normal(rows * cols).reshape(rows, cols)
    if not np.all(np.isfinite(out)):
        raise NumericalError("gaussian sample produced non-finite values")
    return out


def frobenius_norm(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.asarray(a, dtype=np.float64) ** 2)))


@dataclass(frozen=True)
class Spectrum:
    """Eigendecomposition result: descending eigenvalues, orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _offdiag_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return frobenius_norm(off)


def sym_eig(a, max_sweeps: int = 100, tol_factor: float = 1e-12) -> Spectrum:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Convergence is declared when the off-diagonal Frobenius mass drops below
    tol_factor times the Frobenius norm of the input. Eigenvalues come back
    sorted descending (stable order on ties) and each eigenvector is sign
    normalized so its largest-magnitude entry is positive.

    Raises NumericalError if max_sweeps cyclic sweeps do not converge.
    """
    a = as_matrix(a, "sym_eig input")
    n, m = a.shape
    if n != m:
        raise ValueError(f"sym_eig needs a square matrix, got {n}x{m}")
    asym = float(np.max(np.abs(a - a.T))) if n > 1 else 0.0
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if asym > 1e-10 * scale:
        raise ValueError(f"matrix is not symmetric: max |A - A^T| = {asym:.3e}")

    work = 0.5 * (a + a.T)
    v = np.eye(n)
    total = frobenius_norm(work)
    if total == 0.0 or n == 1:
        order = np.argsort(-np.diag(work), kind="stable")
        return Spectrum(np.diag(work)[order].copy(), v[:, order].copy())
    tol = tol_factor * total

    converged = False
    for _ in range(max_sweeps):
        if _offdiag_norm(work) < tol:
            converged = True
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if apq == 0.0:
                    continue
                tau = (work[q, q] - work[p, p]) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + math.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                # Similarity rotation in the (p, q) plane; columns then rows.
                col_p = work[:, p].copy()
                col_q = work[:, q].copy()
                work[:, p] = c * col_p - s * col_q
                work[:, q] = s * col_p + c * col_q
                row_p = work[p, :].copy()
                row_q = work[q, :].copy()
                work[p, :] = c * row_p - s * row_q
                work[q, :] = s * row_p + c * row_q
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        converged = _offdiag_norm(work) < tol
    if not converged:
        raise NumericalError(
            f"Jacobi eigensolver did not converge within {max_sweeps} sweeps"
        )

    vals = np.diag(work).copy()
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = v[:, order]
    for j in range(n):
        i = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[i, j] < 0.0:
            vecs[:, j] = -vecs[:, j]
    return Spectrum(vals, vecs)


def pca(samples, n_components: int) -> tuple[np.ndarray, np.ndarray]:
    """Principal components of a sample matrix (rows are observations).

    Centers by the column mean, forms the unbiased covariance
    X_c^T X_c / (n - 1), and eigendecomposes it with sym_eig.

    Returns (basis, variances): basis is d x n_components with orthonormal
    columns ordered by descending variance, variances the matching
    eigenvalues.
    """
    x = as_matrix(samples, "pca samples")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"pca needs at least 2 samples, got {n}")
    if not 1 <= n_components <= min(n, d):
        raise ValueError(
            f"n_components must lie in [1, {min(n, d)}], got {n_components}"
        )
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    spec = sym_eig(cov)
    return spec.eigenvectors[:, :n_components].copy(), spec.eigenvalues[:n_components].copy()


def orthonormal_columns(a) -> np.ndarray:
    """Orthonormal basis for the column span via modified Gram-Schmidt.

    Columns that are (numerically) dependent on earlier ones are dropped,
    so the result can be narrower than the input.
    """
    a = as_matrix(a, "orthonormal_columns input")
    cols = []
    for j in range(a.shape[1]):
        w = a[:, j].copy()
        for u in cols:
            w -= (u @ w) * u
        # second pass guards against cancellation in near-dependent columns
        for u in cols:
            w -= (u @ w) * u
        norm = float(np.sqrt(w @ w))
        if norm > 1e-10 * max(1.0, float(np.max(np.abs(a[:, j])))):
            cols.append(w / norm)
    if not cols:
        raise ValueError("input has no independent columns")
    return np.stack(cols, axis=1)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two flattened arrays; 0.0 if either is zero."""
    uf = np.asarray(u, dtype=np.float64).ravel()
    vf = np.asarray(v, dtype=np.float64).ravel()
    nu = float(np.sqrt(uf @ uf))
    nv = float(np.sqrt(vf @ vf))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(uf @ vf) / (nu * nv)
