"""Independent oracles for the pruning algebra.

Nothing here touches the LDL path in :mod:`snprune.linalg`.  Linear systems
are solved through a symmetric eigendecomposition or ``numpy.linalg.lstsq``,
so agreement with the pruning module is a genuine cross-check.  The ridge
policy (``ridge_scale * mean(diag C)`` added to the Gram diagonal) matches
the factorization so rank-deficient inputs are comparable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .linalg import DEFAULT_RIDGE, GramMatrix, ldl_decompose, relative_frobenius
from .pruning import identity_plan, recovery_matrix

DEFAULT_THRESHOLD = 1e-8


@dataclass
class OracleResult:
    quantity: str
    oracle_value: np.ndarray
    method_value: np.ndarray
    relative_error: float = field(init=False)
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        self.relative_error = relative_frobenius(self.oracle_value, self.method_value)


def _ridge_amount(C: np.ndarray, ridge_scale: float) -> float:
    s = float(np.mean(np.diag(C))) if C.shape[0] else 0.0
    return ridge_scale * (s if s > 0 else 1.0)


def _eig_solve_right(B: np.ndarray, S: np.ndarray) -> np.ndarray:
    """``B @ inv(S)`` for symmetric positive definite ``S``."""
    w, V = np.linalg.eigh(S)
    if w[0] <= 0 or w[0] < 1e-15 * w[-1]:
        raise NumericError(f"kept Gram block is singular (eigenvalue range {w[0]:.3g}..{w[-1]:.3g})")
    return ((B @ V) / w) @ V.T


def lls_recovery_oracle(X, kept_rows, ridge_scale: float = DEFAULT_RIDGE) -> np.ndarray:
    """``argmin_A ||X - A X[kept]||^2`` via the (ridged) normal equations.

    Returns ``A`` with one column per kept row in the order given.
    """
    X = np.asarray(X, dtype=np.float64)
    kept = np.asarray(kept_rows, dtype=np.intp)
    if kept.size == 0:
        raise ContractError("kept_rows must be non-empty")
    C = X @ X.T
    lam = _ridge_amount(C, ridge_scale)
    C[np.diag_indices_from(C)] += lam
    return _eig_solve_right(C[:, kept], C[np.ix_(kept, kept)])


def residual_score_oracle(X, ridge_scale: float = DEFAULT_RIDGE) -> np.ndarray:
    """Per unit, the residual power left after regressing it on every other unit.

    Brute force: one ridge least-squares fit per unit, solved with ``lstsq`` on
    the ridge-augmented design.  The ridge also inflates the unit's own power,
    as it does on the factorized Gram.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    lam = _ridge_amount(X @ X.T, ridge_scale)
    out = np.empty(n)
    for j in range(n):
        others = np.delete(X, j, axis=0)
        design = np.vstack([others.T, np.sqrt(lam) * np.eye(n - 1)])
        target = np.concatenate([X[j], np.zeros(n - 1)])
        beta, *_ = np.linalg.lstsq(design, target, rcond=None)
        r = target - design @ beta
        out[j] = r @ r + lam
    return out


def reconstruction_error(X, A, kept_rows) -> float:
    """``||X - A @ X[kept]||_F^2``."""
    X = np.asarray(X, dtype=np.float64)
    kept = np.asarray(kept_rows, dtype=np.intp)
    R = X - np.asarray(A, dtype=np.float64) @ X[kept]
    return float(np.sum(R * R))


def correlated_rows(n: int, s: int, rng, mixing: float = 1.0) -> np.ndarray:
    """Random ``n x s`` activations with correlated rows."""
    base = rng.standard_normal((n, s))
    mix = np.eye(n) + mixing * rng.standard_normal((n, n)) / np.sqrt(n)
    scale = np.exp(rng.standard_normal(n))[:, None]
    return scale * (mix @ base)


def random_spd(n: int, rng, cond: float = 1e3) -> np.ndarray:
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.geomspace(1.0, cond, n)
    C = (Q * w) @ Q.T
    return 0.5 * (C + C.T)


# ---------------------------------------------------------------------------
# sweeps used by the CLI ``verify`` command


def lls_equivalence(X, keep: int, ridge_scale: float = DEFAULT_RIDGE, recovery=None) -> OracleResult:
    """Compare the subspace recovery matrix for natural unit order against the oracle.

    ``recovery`` overrides the method side (used for negative controls).
    """
    X = np.asarray(X, dtype=np.float64)
    C = GramMatrix("lls", X @ X.T, X.shape[1])
    kept = np.arange(keep)
    oracle = lls_recovery_oracle(X, kept, ridge_scale)
    if recovery is None:
        method = recovery_matrix(identity_plan("lls", C, keep, ridge_scale))
    else:
        method = recovery(X, keep)
    return OracleResult("lls_recovery", oracle, method, context={"n": X.shape[0], "s": X.shape[1], "keep": keep})


def ldl_reconstruction(C, ridge_scale: float = DEFAULT_RIDGE) -> OracleResult:
    C = np.asarray(C, dtype=np.float64)
    f = ldl_decompose(C, ridge_scale)
    Cr = C.copy()
    Cr[np.diag_indices_from(Cr)] += _ridge_amount(C, ridge_scale)
    return OracleResult("ldl_reconstruction", Cr, (f.M_inv * f.D) @ f.M_inv.T, context={"n": C.shape[0]})


def synthetic_sweep(sizes=(4, 8, 16, 32), instances: int = 5, seed: int = 0,
                    ridge_scale: float = DEFAULT_RIDGE, recovery=None) -> list[OracleResult]:
    """LLS-equivalence for every keep count plus LDL reconstruction on random instances."""
    rng = np.random.default_rng(seed)
    results = []
    for n in sizes:
        for t in range(instances):
            X = correlated_rows(n, 8 * n, rng)
            for keep in range(1, n):
                r = lls_equivalence(X, keep, ridge_scale, recovery)
                r.context["instance"] = t
                results.append(r)
            r = ldl_reconstruction(X @ X.T, ridge_scale)
            r.context["instance"] = t
            results.append(r)
    return results


def gram_lls_check(gram: GramMatrix, ridge_scale: float = DEFAULT_RIDGE, keeps=None) -> list[OracleResult]:
    """LLS-equivalence on a collected Gram matrix (no raw activations needed).

    The oracle side uses the Gram directly: ``A = C[:, kept] inv(C[kept, kept])``.
    """
    C = np.array(gram.C, dtype=np.float64)
    n = C.shape[0]
    Cr = C.copy()
    Cr[np.diag_indices_from(Cr)] += _ridge_amount(C, ridge_scale)
    if keeps is None:
        keeps = sorted({max(1, n // 4), max(1, n // 2), max(1, (3 * n) // 4)} - {n})
    results = []
    for keep in keeps:
        kept = np.arange(keep)
        oracle = _eig_solve_right(Cr[:, kept], Cr[np.ix_(kept, kept)])
        method = recovery_matrix(identity_plan(gram.layer_id, gram, keep, ridge_scale))
        results.append(OracleResult("gram_lls_recovery", oracle, method,
                                    context={"layer_id": gram.layer_id, "n": n, "keep": keep}))
    return results
