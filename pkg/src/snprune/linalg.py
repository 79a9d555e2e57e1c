"""Dense real linear algebra for subspace pruning.

Matrices are plain ``numpy.ndarray`` objects in float64.  Activations are laid
out units-by-samples, so a layer's Gram matrix is ``X @ X.T``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import ContractError, DataError, NotPSDError, NumericError, ShapeError

DEFAULT_RIDGE = 1e-8
PIVOT_FLOOR = 1e-12
PSD_TOLERANCE = 1e-8
DEFAULT_EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class GramMatrix:
    """Uncentered second moment ``sum_s x_s x_s^T`` of one layer's inputs."""

    layer_id: str
    C: np.ndarray
    sample_count: int = 0

    def __post_init__(self):
        C = np.asarray(self.C, dtype=np.float64)
        if C.ndim != 2 or C.shape[0] != C.shape[1]:
            raise ShapeError(f"Gram matrix for {self.layer_id!r} must be square, got {C.shape}")
        C.setflags(write=False)
        object.__setattr__(self, "C", C)

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @classmethod
    def zeros(cls, layer_id: str, n: int) -> "GramMatrix":
        return cls(layer_id, np.zeros((n, n)), 0)


@dataclass(frozen=True)
class SubspaceFactor:
    """``P C P^T = M_inv diag(D) M_inv^T`` with unit lower-triangular ``M_inv``."""

    M_inv: np.ndarray
    D: np.ndarray
    perm: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.M_inv.shape[0]
        perm = np.arange(n) if self.perm is None else np.asarray(self.perm, dtype=np.intp)
        object.__setattr__(self, "perm", perm)
        for arr in (self.M_inv, self.D, self.perm):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return self.M_inv.shape[0]

    @property
    def M(self) -> np.ndarray:
        """The orthogonalizing transform, i.e. the inverse of ``M_inv``."""
        return invert_unit_lower_triangular(self.M_inv)


def _matrix(C) -> np.ndarray:
    if isinstance(C, GramMatrix):
        return C.C
    return np.asarray(C, dtype=np.float64)


def _scale(C: np.ndarray) -> float:
    """Mean of the diagonal; the reference magnitude for ridge and pivot floors."""
    s = float(np.mean(np.diag(C))) if C.shape[0] else 0.0
    return s if s > 0.0 else 1.0


def accumulate_gram(existing: GramMatrix, batch_features) -> GramMatrix:
    """Add ``batch @ batch.T`` to a Gram matrix.

    ``batch_features`` holds one unit per row and one sample per column.
    """
    X = np.asarray(batch_features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != existing.n:
        raise ShapeError(
            f"batch for {existing.layer_id!r} has shape {X.shape}, expected ({existing.n}, s)"
        )
    if X.shape[1] == 0:
        return existing
    if not np.all(np.isfinite(X)):
        raise DataError(f"non-finite activations in batch for {existing.layer_id!r}")
    C = existing.C + X @ X.T
    C = 0.5 * (C + C.T)
    return GramMatrix(existing.layer_id, C, existing.sample_count + X.shape[1])


def ridged(C, ridge_scale: float = DEFAULT_RIDGE) -> np.ndarray:
    """``C + ridge_scale * mean(diag C) * I``."""
    C = _matrix(C)
    if ridge_scale < 0:
        raise ContractError("ridge_scale must be non-negative")
    out = C.copy()
    out[np.diag_indices_from(out)] += ridge_scale * _scale(C)
    return out


def ldl_decompose(C, ridge_scale: float = DEFAULT_RIDGE) -> SubspaceFactor:
    """Unit-diagonal LDL factorization without pivoting.

    The unit order is meaningful (it is the pruning order), so no row exchanges
    are made.  Pivots that fall below ``1e-12 * mean(diag C)`` are clamped to
    that floor; pivots below ``-1e-8 * mean(diag C)`` raise ``NotPSDError``.
    """
    C0 = _matrix(C)
    if C0.ndim != 2 or C0.shape[0] != C0.shape[1]:
        raise ShapeError(f"expected a square matrix, got {C0.shape}")
    if not np.all(np.isfinite(C0)):
        raise DataError("Gram matrix contains non-finite entries")
    if isinstance(C, GramMatrix) and C.sample_count <= 0 and C.n > 0:
        raise ContractError(f"Gram matrix {C.layer_id!r} has no accumulated samples")
    scale = _scale(C0)
    A = ridged(C0, ridge_scale)
    n = A.shape[0]
    floor = PIVOT_FLOOR * scale
    neg_tol = PSD_TOLERANCE * scale

    L = np.eye(n)
    d = np.zeros(n)
    for j in range(n):
        v = L[j, :j] * d[:j]
        dj = A[j, j] - L[j, :j] @ v
        if dj < -neg_tol:
            raise NotPSDError(j, dj, neg_tol)
        if dj < floor:
            dj = floor
        d[j] = dj
        L[j + 1:, j] = (A[j + 1:, j] - L[j + 1:, :j] @ v) / dj
    return SubspaceFactor(L, d)


def invert_unit_lower_triangular(L) -> np.ndarray:
    L = np.asarray(L, dtype=np.float64)
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError(f"expected a square matrix, got {L.shape}")
    if np.any(np.diag(L) != 1.0):
        raise ContractError("matrix does not have a unit diagonal")
    if np.any(np.triu(L, 1) != 0.0):
        raise ContractError("matrix is not lower-triangular")
    n = L.shape[0]
    out = scipy.linalg.solve_triangular(L, np.eye(n), lower=True, unit_diagonal=True)
    out = np.tril(out, -1)
    out[np.diag_indices(n)] = 1.0
    return out


def _eigh(C: np.ndarray):
    try:
        return np.linalg.eigh(C)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc


def sym_inverse_sqrt(C, eig_floor: float = DEFAULT_EIG_FLOOR) -> np.ndarray:
    """Symmetric ``C^{-1/2}`` (the ZCA whitening matrix) via eigendecomposition.

    Eigenvalues below ``eig_floor * lambda_max`` are raised to that value.
    """
    C = _matrix(C)
    if C.shape[0] == 0:
        return np.zeros((0, 0))
    w, V = _eigh(C)
    lam_max = w[-1]
    if not lam_max > 0:
        raise NumericError("matrix has no positive eigenvalue")
    w = np.maximum(w, eig_floor * lam_max)
    Z = (V * (1.0 / np.sqrt(w))) @ V.T
    return 0.5 * (Z + Z.T)


def sym_sqrt(C) -> np.ndarray:
    """Symmetric PSD square root; negative eigenvalues are treated as zero."""
    C = _matrix(C)
    w, V = _eigh(C)
    S = (V * np.sqrt(np.maximum(w, 0.0))) @ V.T
    return 0.5 * (S + S.T)


def check_permutation(perm, n: int) -> np.ndarray:
    p = np.asarray(perm)
    if p.ndim != 1 or p.shape[0] != n:
        raise ContractError(f"permutation has length {p.shape}, expected {n}")
    if not np.issubdtype(p.dtype, np.integer):
        raise ContractError("permutation entries must be integers")
    if np.any(np.sort(p) != np.arange(n)):
        raise ContractError("permutation has repeated or out-of-range entries")
    return p.astype(np.intp)


def inverse_permutation(perm) -> np.ndarray:
    p = np.asarray(perm, dtype=np.intp)
    inv = np.empty_like(p)
    inv[p] = np.arange(p.shape[0])
    return inv


def apply_permutation(T, perm, axis: str = "rows") -> np.ndarray:
    """Reorder rows (``axis='rows'``) or columns so that new index i holds old index perm[i]."""
    T = np.asarray(T)
    if axis not in ("rows", "cols"):
        raise ContractError(f"axis must be 'rows' or 'cols', got {axis!r}")
    ax = 0 if axis == "rows" else 1
    p = check_permutation(perm, T.shape[ax])
    return np.take(T, p, axis=ax)


def permuted_gram(C, perm) -> np.ndarray:
    """``P C P^T`` for the permutation matrix of ``perm``."""
    C = _matrix(C)
    p = check_permutation(perm, C.shape[0])
    return C[np.ix_(p, p)]


def relative_frobenius(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-30))
