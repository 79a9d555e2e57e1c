"""Subspace node pruning: remove whole units from dense and conv networks while
folding the least-squares reconstruction of the removed activity into the
surviving weights."""
from .linalg import GramMatrix, SubspaceFactor, accumulate_gram, ldl_decompose, sym_inverse_sqrt
from .model import Layer, Network, count_flops_params, forward, load_model, save_model
from .pruning import (
    ImportanceScores,
    LayerPrunePlan,
    PruneSpec,
    build_plan,
    collect_grams,
    prune_layer,
    prune_network,
    recovery_matrix,
    score_saw,
    score_saw_tilde,
    score_unnorm_zca,
)
from .report import PruneReport

__version__ = "0.1.0"
