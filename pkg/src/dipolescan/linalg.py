"""Metric-space primitives: weighted inner products, spectral powers of
symmetric positive-(semi)definite operators, and rank-one inverse updates.

Every scanning and beamforming routine in this package measures vectors in
the inner product induced by a symmetric positive-(semi)definite matrix,
``<x, y> = x' C y``.  The :class:`Metric` type caches one orthonormal
eigendecomposition of C and derives square roots, inverses and
pseudoinverses from it, so symmetry is preserved exactly and rank decisions
are made once, at construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_RTOL = 1e-12
DEFAULT_RANK_TOL = 1e-10
RECONSTRUCTION_RTOL = 1e-10

_ALLOWED_POWERS = (0.5, -0.5, -1.0)


class MetricRangeError(ValueError):
    """A vector has a component in the declared kernel of a singular metric."""


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return 0.5 * (matrix + matrix.T)


def _readonly(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=float)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Metric:
    """Symmetric PSD operator with a cached eigendecomposition.

    ``matrix = eigenvectors @ diag(eigenvalues) @ eigenvectors.T`` with
    eigenvalues sorted descending.  Eigenvalues below ``rank_tol`` times the
    largest one are declared an exact kernel and stored as 0.0; all retained
    eigenvalues are strictly positive.
    """

    matrix: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    rank: int
    rank_tol: float

    @classmethod
    def from_matrix(cls, matrix, rank_tol: float = DEFAULT_RANK_TOL) -> "Metric":
        a = np.asarray(matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("metric matrix must be square")
        if not np.isfinite(a).all():
            raise ValueError("metric matrix must be finite")
        scale = float(np.max(np.abs(a))) if a.size else 0.0
        if scale > 0.0 and float(np.max(np.abs(a - a.T))) > SYMMETRY_RTOL * scale:
            raise ValueError("metric matrix is not symmetric")
        sym = symmetrize(a)
        vals, vecs = np.linalg.eigh(sym)
        vals = vals[::-1].copy()
        vecs = vecs[:, ::-1].copy()
        lam_max = float(vals[0]) if vals.size else 0.0
        cutoff = rank_tol * max(lam_max, 0.0)
        if vals.size and float(vals[-1]) < -max(cutoff, SYMMETRY_RTOL * scale):
            raise ValueError("metric is not positive semidefinite")
        vals[vals <= cutoff] = 0.0
        rank = int(np.count_nonzero(vals > 0.0))
        metric = cls(
            matrix=_readonly(sym),
            eigenvalues=_readonly(vals),
            eigenvectors=_readonly(vecs),
            rank=rank,
            rank_tol=float(rank_tol),
        )
        recon = (vecs * vals) @ vecs.T
        norm = np.linalg.norm(sym)
        if np.linalg.norm(recon - sym) > RECONSTRUCTION_RTOL * max(norm, 1e-300):
            raise ValueError("eigendecomposition failed to reconstruct the metric")
        return metric

    @classmethod
    def _from_eigen(cls, eigenvalues, eigenvectors, rank_tol: float) -> "Metric":
        # Trusted path for spectral functions of an existing Metric: the
        # kernel structure is inherited, no re-factorization happens.
        order = np.argsort(-eigenvalues, kind="stable")
        vals = np.asarray(eigenvalues, dtype=float)[order]
        vecs = np.asarray(eigenvectors, dtype=float)[:, order]
        matrix = symmetrize((vecs * vals) @ vecs.T)
        return cls(
            matrix=_readonly(matrix),
            eigenvalues=_readonly(vals),
            eigenvectors=_readonly(vecs),
            rank=int(np.count_nonzero(vals > 0.0)),
            rank_tol=float(rank_tol),
        )

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def kernel_dim(self) -> int:
        return self.dim - self.rank

    @property
    def is_full_rank(self) -> bool:
        return self.rank == self.dim

    def apply(self, array: np.ndarray) -> np.ndarray:
        return self.matrix @ array

    def project_onto_eigenbasis(self, array: np.ndarray) -> np.ndarray:
        return self.eigenvectors.T @ array

    def sqrt_apply(self, array: np.ndarray) -> np.ndarray:
        """Multiply by the symmetric PSD square root of the metric."""
        proj = self.project_onto_eigenbasis(array)
        roots = np.sqrt(self.eigenvalues)
        scaled = roots[:, None] * proj if proj.ndim == 2 else roots * proj
        return self.eigenvectors @ scaled

    def kernel_basis(self) -> np.ndarray:
        return self.eigenvectors[:, self.rank :]

    def check_in_range(self, vector: np.ndarray) -> None:
        """Raise :class:`MetricRangeError` for vectors leaving the range.

        Only singular metrics carry a declared kernel; the check compares the
        kernel component against ``rank_tol`` times the vector norm.
        """
        if self.is_full_rank:
            return
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            return
        kernel_part = float(np.linalg.norm(self.kernel_basis().T @ vector))
        if kernel_part > self.rank_tol * norm:
            raise MetricRangeError("outside metric range")


def identity_metric(dim: int, rank_tol: float = DEFAULT_RANK_TOL) -> Metric:
    if dim < 1:
        raise ValueError("dimension must be positive")
    eye = np.eye(dim)
    return Metric(
        matrix=_readonly(eye),
        eigenvalues=_readonly(np.ones(dim)),
        eigenvectors=_readonly(eye),
        rank=dim,
        rank_tol=float(rank_tol),
    )


def metric_inner(metric: Metric, x: np.ndarray, y: np.ndarray) -> float:
    """Weighted inner product ``x' C y``.

    Evaluated in the eigenbasis so the result is exactly symmetric in
    ``(x, y)`` and the kernel contributes exactly zero.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != (metric.dim,) or y.shape != (metric.dim,):
        raise ValueError("dimension mismatch")
    metric.check_in_range(x)
    metric.check_in_range(y)
    px = metric.project_onto_eigenbasis(x)
    py = metric.project_onto_eigenbasis(y)
    # px*py first: commutativity makes the result exactly symmetric in (x, y)
    return float(np.sum(metric.eigenvalues * (px * py)))


def metric_norm_sq(metric: Metric, x: np.ndarray) -> float:
    """Squared weighted norm ``<x, x>``; nonnegative by construction."""
    x = np.asarray(x, dtype=float)
    if x.shape != (metric.dim,):
        raise ValueError("dimension mismatch")
    metric.check_in_range(x)
    px = metric.project_onto_eigenbasis(x)
    return float(np.sum(metric.eigenvalues * px * px))


def psd_power(metric: Metric, power: float, pseudo: bool = False) -> Metric:
    """Spectral power of a metric: square root, inverse square root, inverse.

    ``power`` must be one of 1/2, -1/2, -1.  Negative powers of a singular
    metric require ``pseudo=True``, in which case the declared kernel is
    preserved (Moore-Penrose convention).
    """
    if power not in _ALLOWED_POWERS:
        raise ValueError(f"unsupported power {power!r}; expected one of {_ALLOWED_POWERS}")
    if power < 0 and not metric.is_full_rank and not pseudo:
        raise ValueError("singular metric")
    vals = metric.eigenvalues
    out = np.zeros_like(vals)
    retained = vals > 0.0
    out[retained] = vals[retained] ** power
    return Metric._from_eigen(out, metric.eigenvectors, metric.rank_tol)


def invert_spd(matrix, rank_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via its eigensystem."""
    return psd_power(Metric.from_matrix(matrix, rank_tol), -1.0).matrix


@dataclass(frozen=True)
class RankOneUpdate:
    """Inverse of ``base + scale * u u'`` given the inverse of ``base``."""

    base_inverse: np.ndarray
    vector: np.ndarray
    scale: float

    def __post_init__(self):
        base = np.asarray(self.base_inverse, dtype=float)
        vec = np.asarray(self.vector, dtype=float)
        if base.ndim != 2 or base.shape[0] != base.shape[1]:
            raise ValueError("base inverse must be square")
        if vec.shape != (base.shape[0],):
            raise ValueError("dimension mismatch")
        if not np.isfinite(self.scale):
            raise ValueError("scale must be finite")
        object.__setattr__(self, "base_inverse", _readonly(base))
        object.__setattr__(self, "vector", _readonly(vec))


def sherman_morrison_inverse(update: RankOneUpdate) -> np.ndarray:
    """Sherman-Morrison update of a cached inverse.

    Returns ``base_inv - scale * (base_inv u)(u' base_inv) / (1 + scale * u' base_inv u)``,
    which equals ``(base + scale * u u')^{-1}`` whenever that inverse exists.
    """
    base_inv = update.base_inverse
    u = update.vector
    left = base_inv @ u
    right = u @ base_inv
    denom = 1.0 + update.scale * float(u @ left)
    if abs(denom) <= 1e-12:
        raise ValueError("update singular")
    return base_inv - (update.scale / denom) * np.outer(left, right)
