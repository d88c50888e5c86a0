from .accuracy import AccuracyTable, aggregate_accuracy, duration_layout, per_show_layout
from .kappa import fleiss_kappa, ratings_to_counts
from .lmm import MixedModelFit, MixedModelSpec, NestedReml, fit_lmm, fit_reml
from .posthoc import ContrastResult, all_posthoc, bonferroni, posthoc_contrasts

__all__ = [
    "AccuracyTable",
    "aggregate_accuracy",
    "duration_layout",
    "per_show_layout",
    "fleiss_kappa",
    "ratings_to_counts",
    "MixedModelFit",
    "MixedModelSpec",
    "NestedReml",
    "fit_lmm",
    "fit_reml",
    "ContrastResult",
    "all_posthoc",
    "bonferroni",
    "posthoc_contrasts",
]
