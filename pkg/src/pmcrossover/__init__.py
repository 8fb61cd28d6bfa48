"""Pattern-mixture analysis of paired 2x2 crossover trials with missing data."""
from .estimation import FitOptions, ModelFit, estimate_proportions, fit
from .inference import delta_variance, interaction_contrast, pooled_means, wald_p
from .model import CovarianceUnstructured, GroupEffects, PairRecord, design_matrix, reduced_moments
from .patterns import GroupingScheme, Sequence, assign_group, classify, selection_matrix, tabulate

__all__ = [
    "CovarianceUnstructured",
    "FitOptions",
    "GroupEffects",
    "GroupingScheme",
    "ModelFit",
    "PairRecord",
    "Sequence",
    "assign_group",
    "classify",
    "delta_variance",
    "design_matrix",
    "estimate_proportions",
    "fit",
    "interaction_contrast",
    "pooled_means",
    "reduced_moments",
    "selection_matrix",
    "tabulate",
    "wald_p",
]
