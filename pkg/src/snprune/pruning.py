"""Importance scoring, subspace factorization and weight reparameterization.

Each prunable layer's inputs are ordered by an importance score, factorized as
``P C P^T = M_inv diag(D) M_inv^T`` and the trailing subspace units removed.
Folding ``A = M_inv[:, :k] M[:k, :k]`` (un-permuted) into the consuming weights
gives the least-squares reconstruction of the removed units from the kept ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError
from .linalg import (
    DEFAULT_RIDGE,
    GramMatrix,
    SubspaceFactor,
    accumulate_gram,
    invert_unit_lower_triangular,
    ldl_decompose,
    permuted_gram,
    ridged,
    sym_inverse_sqrt,
    sym_sqrt,
)
from .model import Network, count_flops_params, forward
from .report import LayerRecord, PruneReport

METHODS = ("saw", "unnorm_zca", "saw_tilde", "random")
MODES = ("uniform", "variance_cutoff", "explicit")


@dataclass(frozen=True)
class ImportanceScores:
    layer_id: str
    method: str
    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64)
        if s.ndim != 1 or not np.all(np.isfinite(s)):
            raise ContractError(f"scores for {self.layer_id!r} must be a finite vector")
        object.__setattr__(self, "scores", s)


@dataclass(frozen=True)
class PruneSpec:
    mode: str
    uniform_ratio: float | None = None
    variance_threshold: float | None = None
    explicit_keep: dict | None = None
    min_keep: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown prune mode {self.mode!r}")
        required = {"uniform": "uniform_ratio", "variance_cutoff": "variance_threshold",
                    "explicit": "explicit_keep"}[self.mode]
        if getattr(self, required) is None:
            raise ContractError(f"mode {self.mode!r} requires {required}")
        for name in ("uniform_ratio", "variance_threshold"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {v}")
        if self.min_keep < 1:
            raise ContractError("min_keep must be at least 1")

    @classmethod
    def uniform(cls, ratio: float, **kw) -> "PruneSpec":
        return cls("uniform", uniform_ratio=ratio, **kw)

    @classmethod
    def variance_cutoff(cls, tau: float, **kw) -> "PruneSpec":
        return cls("variance_cutoff", variance_threshold=tau, **kw)

    @classmethod
    def explicit(cls, keep: dict, **kw) -> "PruneSpec":
        return cls("explicit", explicit_keep=dict(keep), **kw)


@dataclass(frozen=True)
class LayerPrunePlan:
    layer_id: str
    method: str
    perm: np.ndarray
    keep: int
    factor: SubspaceFactor
    cumulative_importance: np.ndarray
    bias_unit: bool = field(default=False)

    @property
    def n(self) -> int:
        """Real (non-constant) unit count."""
        return self.perm.shape[0] - int(self.bias_unit)

    @property
    def keep_real(self) -> int:
        return self.keep - int(self.bias_unit)

    @property
    def retained_variance_fraction(self) -> float:
        cum = self.cumulative_importance
        return 1.0 if self.keep_real >= cum.shape[0] else float(1.0 - cum[self.keep_real])

    def kept_units(self) -> np.ndarray:
        """Original indices of kept units, ascending."""
        return np.sort(self.perm[: self.keep])

    def to_dict(self) -> dict:
        D = self.factor.D[1:] if self.bias_unit else self.factor.D
        return {
            "layer_id": self.layer_id,
            "method": self.method,
            "perm": [int(p) for p in self.perm],
            "keep": int(self.keep_real),
            "D": [float(d) for d in D],
            "cumulative_importance": [float(c) for c in self.cumulative_importance],
            "bias_unit": self.bias_unit,
        }


# ---------------------------------------------------------------------------
# scoring


def consumer_matrix(weight) -> np.ndarray:
    """View a consuming weight as a 2-d matrix with one column per input unit."""
    W = np.asarray(weight, dtype=np.float64)
    if W.ndim == 2:
        return W
    if W.ndim == 4:
        return W.transpose(0, 2, 3, 1).reshape(-1, W.shape[1])
    raise ContractError(f"cannot score a {W.ndim}-d weight")


def score_saw(W, layer_id: str = "") -> ImportanceScores:
    """Summed absolute weights per input unit."""
    return ImportanceScores(layer_id, "saw", np.abs(consumer_matrix(W)).sum(axis=0))


def score_unnorm_zca(C, ridge_scale: float = DEFAULT_RIDGE, layer_id: str | None = None) -> ImportanceScores:
    """Unnormalized-ZCA scores ``(1 / Z_jj)**2`` with ``Z = C^{-1/2}``.

    ``C`` is ridged the same way as for the LDL factorization before whitening.
    """
    Z = sym_inverse_sqrt(ridged(C, ridge_scale))
    if layer_id is None:
        layer_id = C.layer_id if isinstance(C, GramMatrix) else ""
    return ImportanceScores(layer_id, "unnorm_zca", 1.0 / np.diag(Z) ** 2)


def score_saw_tilde(W, C, layer_id: str | None = None) -> ImportanceScores:
    """SAW measured on ``W @ C^{1/2}``, the weights seen from a whitened input basis."""
    Wm = consumer_matrix(W)
    S = sym_sqrt(C)
    if S.shape[0] != Wm.shape[1]:
        raise ContractError(f"weight has {Wm.shape[1]} inputs but Gram is {S.shape[0]}x{S.shape[0]}")
    if layer_id is None:
        layer_id = C.layer_id if isinstance(C, GramMatrix) else ""
    return ImportanceScores(layer_id, "saw_tilde", np.abs(Wm @ S).sum(axis=0))


def score_random(n: int, seed, layer_id: str = "") -> ImportanceScores:
    return ImportanceScores(layer_id, "random", np.random.default_rng(seed).random(n))


# ---------------------------------------------------------------------------
# planning


def importance_order(scores) -> np.ndarray:
    """Most to least important; ties keep ascending original index."""
    s = scores.scores if isinstance(scores, ImportanceScores) else np.asarray(scores)
    return np.argsort(-s, kind="stable").astype(np.intp)


def cumulative_importance(D) -> np.ndarray:
    """Fraction of total subspace variance held by each unit and all units after it."""
    D = np.asarray(D, dtype=np.float64)
    tail = np.cumsum(D[::-1])[::-1]
    if tail.shape[0] == 0 or tail[0] <= 0:
        return np.ones_like(tail)
    return tail / tail[0]


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def select_keep(spec: PruneSpec, layer_id: str, n: int, cumulative) -> int:
    if spec.mode == "uniform":
        keep = _round_half_away((1.0 - spec.uniform_ratio) * n)
    elif spec.mode == "variance_cutoff":
        tau = spec.variance_threshold
        below = np.flatnonzero(np.asarray(cumulative) < tau)
        keep = int(below[0]) if below.size else n
    else:
        keep = int(spec.explicit_keep.get(layer_id, n))
        if not 1 <= keep <= n:
            raise ContractError(f"explicit keep {keep} for {layer_id!r} outside [1, {n}]")
    return max(min(keep, n), min(spec.min_keep, n))


def build_plan(scores: ImportanceScores, C, spec: PruneSpec,
               ridge_scale: float = DEFAULT_RIDGE, bias_unit: bool = False) -> LayerPrunePlan:
    """Order units by ``scores``, factorize the permuted Gram and choose the keep count.

    With ``bias_unit`` the Gram carries one extra trailing row/column for a
    constant input; that unit is placed first and always kept.
    """
    G = C.C if isinstance(C, GramMatrix) else np.asarray(C, dtype=np.float64)
    if isinstance(C, GramMatrix) and C.sample_count <= 0:
        raise ContractError(f"Gram matrix {C.layer_id!r} has no accumulated samples")
    n = scores.scores.shape[0]
    if G.shape[0] != n + int(bias_unit):
        raise ContractError(
            f"{scores.layer_id!r}: {n} scores but Gram matrix is {G.shape[0]}x{G.shape[0]}"
        )
    perm = importance_order(scores)
    if bias_unit:
        perm = np.concatenate([[n], perm]).astype(np.intp)
    f = ldl_decompose(permuted_gram(G, perm), ridge_scale)
    factor = SubspaceFactor(f.M_inv, f.D, perm)
    D = factor.D[1:] if bias_unit else factor.D
    cum = cumulative_importance(D)
    keep = select_keep(spec, scores.layer_id, n, cum) + int(bias_unit)
    return LayerPrunePlan(scores.layer_id, scores.method, perm, keep, factor, cum, bias_unit)


def identity_plan(layer_id: str, C, keep: int, ridge_scale: float = DEFAULT_RIDGE) -> LayerPrunePlan:
    """Plan that keeps the leading ``keep`` units in their natural order."""
    G = C.C if isinstance(C, GramMatrix) else np.asarray(C, dtype=np.float64)
    n = G.shape[0]
    scores = ImportanceScores(layer_id, "identity", np.arange(n, 0, -1, dtype=np.float64))
    return build_plan(scores, G, PruneSpec.explicit({layer_id: keep}), ridge_scale)


# ---------------------------------------------------------------------------
# reparameterization


def _subspace_recovery(M_inv: np.ndarray, keep: int) -> np.ndarray:
    """``M_inv[:, :k] @ M[:k, :k]`` in factor order; the kept block is exactly I."""
    n = M_inv.shape[0]
    A = np.zeros((n, keep))
    A[:keep] = np.eye(keep)
    if keep < n:
        M_kk = invert_unit_lower_triangular(M_inv[:keep, :keep])
        A[keep:] = M_inv[keep:, :keep] @ M_kk
    return A


def subspace_prune(W, M_inv, keep: int) -> np.ndarray:
    """Prune the trailing units of an unpermuted factorization: ``W @ M_inv[:, :k] @ M[:k, :k]``."""
    W = np.asarray(W, dtype=np.float64)
    n = M_inv.shape[0]
    if not 1 <= keep <= n:
        raise ContractError(f"keep must lie in [1, {n}], got {keep}")
    if keep == n:
        return W.copy()
    return W @ _subspace_recovery(M_inv, keep)


def recovery_matrix(plan: LayerPrunePlan) -> np.ndarray:
    """``A`` (n x keep) such that ``X ~= A @ X[kept_units]`` in original unit order."""
    perm = plan.perm
    n = perm.shape[0]
    if not 1 <= plan.keep <= n:
        raise ContractError(f"keep must lie in [1, {n}], got {plan.keep}")
    A_perm = _subspace_recovery(plan.factor.M_inv, plan.keep)
    A = np.empty_like(A_perm)
    A[perm] = A_perm
    # C order keeps the BLAS kernel, and so the rounding, the same as the unpermuted path
    return np.ascontiguousarray(A[:, np.argsort(perm[: plan.keep], kind="stable")])


def selection_matrix(plan: LayerPrunePlan) -> np.ndarray:
    """``A`` for plain deletion of the pruned units (no reconstruction)."""
    kept = plan.kept_units()
    A = np.zeros((plan.perm.shape[0], kept.shape[0]))
    A[kept, np.arange(kept.shape[0])] = 1.0
    return A


def apply_recovery(W, A) -> np.ndarray:
    """``W @ A`` along the input-unit axis; conv kernels mix input channels per tap."""
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 2:
        return W @ A
    return np.einsum("oipq,ik->okpq", W, A)


def prune_layer(W, plan: LayerPrunePlan) -> np.ndarray:
    """Reparameterized consumer weights with exactly ``plan.keep`` input units."""
    W = np.asarray(W, dtype=np.float64)
    if W.shape[1] != plan.perm.shape[0]:
        raise ContractError(f"weight has {W.shape[1]} inputs, plan covers {plan.perm.shape[0]}")
    if plan.keep == plan.perm.shape[0]:
        return W.copy()
    return apply_recovery(W, recovery_matrix(plan))


# ---------------------------------------------------------------------------
# whole networks


def collect_grams(net: Network, inputs, batch_size: int = 256,
                  absorb_bias: bool = False) -> dict[str, GramMatrix]:
    """Gram matrix of every weighted layer's input over ``inputs``.

    Batches are reduced sequentially in input order.  With ``absorb_bias`` a
    constant unit of value 1 is appended after the real units.
    """
    inputs = np.asarray(inputs)
    grams = {}
    for i in net.weighted_indices():
        layer = net.layers[i]
        grams[layer.name] = GramMatrix.zeros(layer.name, layer.n_in + int(absorb_bias))
    for start in range(0, inputs.shape[0], batch_size):
        _, caps = forward(net, inputs[start:start + batch_size], capture=True)
        for name, X in caps.items():
            if absorb_bias:
                X = np.vstack([X, np.ones((1, X.shape[1]))])
            grams[name] = accumulate_gram(grams[name], X)
    return grams


def grams_from_captures(captures: dict, absorb_bias: bool = False) -> dict[str, GramMatrix]:
    out = {}
    for name, X in captures.items():
        X = np.asarray(X, dtype=np.float64)
        if absorb_bias:
            X = np.vstack([X, np.ones((1, X.shape[1]))])
        out[name] = accumulate_gram(GramMatrix.zeros(name, X.shape[0]), X)
    return out


def score_layer(method: str, W, gram: GramMatrix, layer_id: str, seed=0,
                ridge_scale: float = DEFAULT_RIDGE, bias_unit: bool = False) -> ImportanceScores:
    C = gram.C[:-1, :-1] if bias_unit else gram.C
    if method == "saw":
        return score_saw(W, layer_id)
    if method == "unnorm_zca":
        # redundancy with the constant unit counts too
        s = score_unnorm_zca(gram.C, ridge_scale, layer_id).scores
        return ImportanceScores(layer_id, "unnorm_zca", s[:-1] if bias_unit else s)
    if method == "saw_tilde":
        return score_saw_tilde(W, C, layer_id)
    if method == "random":
        return score_random(C.shape[0], seed, layer_id)
    raise ContractError(f"unknown scoring method {method!r}")


def prune_network(net: Network, captures: dict, spec: PruneSpec, method: str = "unnorm_zca",
                  seed: int = 0, ridge_scale: float = DEFAULT_RIDGE, reconstruct: bool = True,
                  absorb_bias: bool = False):
    """Prune every prunable layer of ``net`` in one pass.

    ``captures`` maps weighted-layer names to either a ``GramMatrix`` or a raw
    units x samples feature matrix, all taken from the original network.
    Returns ``(pruned_net, report, plans)``.
    """
    if method not in METHODS:
        raise ContractError(f"unknown scoring method {method!r}")
    grams = {}
    for name, value in captures.items():
        if isinstance(value, GramMatrix):
            grams[name] = value
        else:
            grams.update(grams_from_captures({name: value}, absorb_bias))

    layers = list(net.layers)
    plans = {}
    records = {}
    for site, (ci, pi) in enumerate(net.prune_sites()):
        consumer, producer = layers[ci], layers[pi]
        if consumer.name not in grams:
            raise ContractError(f"no activation capture for layer {consumer.name!r}")
        gram = grams[consumer.name]
        if gram.n != consumer.n_in + int(absorb_bias):
            raise ContractError(
                f"capture for {consumer.name!r} has {gram.n} units, layer expects "
                f"{consumer.n_in + int(absorb_bias)}"
            )
        scores = score_layer(method, consumer.weight, gram, consumer.name,
                             seed=[seed, site], ridge_scale=ridge_scale, bias_unit=absorb_bias)
        plan = build_plan(scores, gram, spec, ridge_scale, bias_unit=absorb_bias)
        plans[consumer.name] = plan
        records[consumer.name] = LayerRecord(consumer.name, consumer.n_in, plan.keep_real,
                                             plan.retained_variance_fraction)
        if plan.keep == plan.perm.shape[0]:
            continue

        A = recovery_matrix(plan) if reconstruct else selection_matrix(plan)
        W = np.asarray(consumer.weight, dtype=np.float64)
        bias = np.asarray(consumer.bias, dtype=np.float64)
        if absorb_bias:
            pad = [(0, 0)] * W.ndim
            pad[1] = (0, 1)
            W_hat = apply_recovery(np.pad(W, pad), A)
            const = W_hat[:, -1]
            bias = bias + (const if const.ndim == 1 else const.sum(axis=(1, 2)))
            W_hat = W_hat[:, :-1]
        else:
            W_hat = apply_recovery(W, A)
        layers[ci] = replace(consumer, weight=W_hat, bias=bias)

        kept = plan.kept_units()
        kept = kept[kept < consumer.n_in]
        layers[pi] = replace(producer, weight=np.asarray(producer.weight)[kept],
                             bias=np.asarray(producer.bias)[kept])

    pruned = net.with_layers(layers)
    report = PruneReport(method=method, mode=spec.mode)
    for i in net.weighted_indices():
        layer = net.layers[i]
        report.layers.append(records.get(layer.name, LayerRecord(layer.name, layer.n_in, layer.n_in, 1.0)))
    report.flops_before, report.params_before = count_flops_params(net)
    report.flops_after, report.params_after = count_flops_params(pruned)
    return pruned, report, plans

