"""Dense linear algebra and random streams shared by the rest of the package.

Matrices are plain float64 numpy arrays. The factorization and the
eigensolver are written out here (partial-pivot LU, cyclic Jacobi) rather
than delegated to LAPACK so their tolerances and error behavior are pinned.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import KTooLarge, NoConvergence, NotSymmetric, SingularMatrix

PIVOT_MIN = 1e-300
JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


def _as_square(m):
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    return m


@dataclass(frozen=True)
class LuFactorization:
    """Row-pivoted LU factors packed in one array.

    ``lu`` holds the unit-lower L below the diagonal and U on and above it;
    ``perm[i]`` is the row of the original matrix that ended up in row i.
    ``sign`` is the sign of the determinant (pivot parity times the signs of
    U's diagonal), so ``det = sign * exp(log_abs_det())``.
    """

    lu: np.ndarray
    perm: np.ndarray
    sign: float

    @property
    def n(self):
        return self.lu.shape[0]

    def log_abs_det(self):
        return float(np.sum(np.log(np.abs(np.diag(self.lu)))))

    def det(self):
        return self.sign * float(np.prod(np.abs(np.diag(self.lu))))

    def solve(self, b):
        b = np.asarray(b, dtype=np.float64)
        vector = b.ndim == 1
        y = (b[:, None] if vector else b)[self.perm].copy()
        lu = self.lu
        n = self.n
        for i in range(1, n):
            y[i] -= lu[i, :i] @ y[:i]
        for i in range(n - 1, -1, -1):
            if i + 1 < n:
                y[i] -= lu[i, i + 1:] @ y[i + 1:]
            y[i] /= lu[i, i]
        return y[:, 0] if vector else y

    def inverse(self):
        return self.solve(np.eye(self.n))

    def lower(self):
        return np.tril(self.lu, -1) + np.eye(self.n)

    def upper(self):
        return np.triu(self.lu)


def lu_factor(m) -> LuFactorization:
    a = _as_square(m).copy()
    n = a.shape[0]
    perm = np.arange(n)
    sign = 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        if abs(a[p, k]) < PIVOT_MIN:
            raise SingularMatrix(f"pivot {k} has magnitude {abs(a[p, k]):.3g}")
        if p != k:
            a[[k, p]] = a[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            sign = -sign
        a[k + 1:, k] /= a[k, k]
        a[k + 1:, k + 1:] -= np.outer(a[k + 1:, k], a[k, k + 1:])
    if np.count_nonzero(np.diag(a) < 0) % 2:
        sign = -sign
    return LuFactorization(a, perm, sign)


def solve(m, b):
    return lu_factor(m).solve(b)


def sym_eig(c):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Returns ``(values, vectors)`` with values sorted descending and the
    matching unit eigenvectors in the columns of ``vectors``. Each vector is
    sign-normalized so its largest-magnitude entry is positive.
    """
    a = _as_square(c).copy()
    n = a.shape[0]
    scale = max(1.0, float(np.max(np.abs(a)))) if n else 1.0
    if n and np.max(np.abs(a - a.T)) > 1e-10 * scale:
        raise NotSymmetric(f"asymmetry {np.max(np.abs(a - a.T)):.3g}")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    norm = float(np.linalg.norm(a))
    for _ in range(JACOBI_MAX_SWEEPS):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= JACOBI_TOL * norm or norm == 0.0:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                g = 100.0 * abs(apq)
                app, aqq = abs(a[p, p]), abs(a[q, q])
                if apq == 0.0 or (app + g == app and aqq + g == aqq):
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if theta == 0.0:
                    t = 1.0
                elif abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                cs = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * cs
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = cs * col_p - sn * col_q
                a[:, q] = sn * col_p + cs * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = cs * row_p - sn * row_q
                a[q, :] = sn * row_p + cs * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = cs * vp - sn * vq
                v[:, q] = sn * vp + cs * vq
    else:
        raise NoConvergence(f"Jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps")
    values = np.diag(a).copy()
    order = np.argsort(-values, kind="stable")
    values = values[order]
    v = v[:, order]
    return values, _flip_signs(v)


def _flip_signs(vectors):
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sqrtm_spd(c):
    """Symmetric square root of an SPD matrix via ``sym_eig``."""
    values, vectors = sym_eig(c)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def pca_fit(data, k):
    """Project mean-centered data onto its top-k principal axes.

    No whitening is applied. Returns ``(loadings, components, eigenvalues)``
    where ``loadings`` is samples x k with every column mean-removed,
    ``components`` is k x dims, and ``eigenvalues`` holds the full spectrum
    of the sample covariance (descending).
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("pca_fit expects a samples x dims matrix")
    n, dims = x.shape
    if k < 1 or k > dims or dims > n:
        raise KTooLarge(f"need 1 <= k <= dims <= samples, got k={k}, dims={dims}, samples={n}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / max(n - 1, 1)
    values, vectors = sym_eig(cov)
    components = vectors[:, :k].T.copy()
    loadings = centered @ components.T
    loadings -= loadings.mean(axis=0)
    return loadings, components, values


def condition_number(m):
    """2-norm condition number from the eigenvalues of m^T m."""
    m = _as_square(m)
    values, _ = sym_eig(m.T @ m)
    if values[-1] <= 0:
        return np.inf
    return float(np.sqrt(values[0] / values[-1]))


class RngStream:
    """Reproducible, splittable random stream.

    Backed by the Philox-4x64 counter-based generator keyed on
    ``(stream << 64) | seed``, so a ``(seed, stream)`` pair maps to the same
    bits on every platform. ``child(name)`` derives an independent stream by
    hashing the name into a new stream id.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & (2**64 - 1)
        self.stream = int(stream) & (2**64 - 1)
        bitgen = np.random.Philox(key=(self.stream << 64) | self.seed)
        self.gen = np.random.Generator(bitgen)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream})"

    def child(self, name) -> "RngStream":
        digest = hashlib.blake2b(f"{self.stream}/{name}".encode(), digest_size=8).digest()
        return RngStream(self.seed, int.from_bytes(digest, "little"))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def laplace(self, scale=1.0, size=None):
        return self.gen.laplace(0.0, scale, size)

    def logistic(self, size=None):
        return self.gen.logistic(0.0, 1.0, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, k, p):
        return int(self.gen.choice(k, p=p))

    def random(self, size=None):
        return self.gen.random(size)

    def state(self):
        return self.gen.bit_generator.state
