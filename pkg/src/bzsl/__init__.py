"""Hierarchical Bayesian zero-shot classification with DNA side information."""

from .core import (
    FittedModel,
    Hyperparams,
    build_surrogates,
    estimate_global_prior,
    fit,
    predict,
    predict_batch,
    seen_ppd,
    unseen_ppd,
)
from .datastore import ClassStats, LabelVector, SplitSpec, compute_class_stats, load_matrix, make_split
from .dnaside import SideInfoTable
from .evalharness import GzslReport, SyntheticSpec, generate_synthetic, harmonic_mean, run_gzsl
from .numkernel import StudentTParams, cholesky, make_student_t, student_t_logpdf

__version__ = "0.1.0"

__all__ = [
    "ClassStats", "FittedModel", "GzslReport", "Hyperparams", "LabelVector", "SideInfoTable", "SplitSpec",
    "StudentTParams", "SyntheticSpec", "build_surrogates", "cholesky", "compute_class_stats",
    "estimate_global_prior", "fit", "generate_synthetic", "harmonic_mean", "load_matrix", "make_split",
    "make_student_t", "predict", "predict_batch", "run_gzsl", "seen_ppd", "student_t_logpdf", "unseen_ppd",
]
