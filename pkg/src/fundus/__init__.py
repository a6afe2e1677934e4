"""Hybrid retinal disease classification pipeline.

Vessel segmentation (small encoder-decoder network), PCA feature reduction,
one-vs-one kernel SVMs on two feature channels, and weighted-vote fusion.
"""

from fundus.hybrid import HybridVotingClassifier, EvalReport, evaluate, ratio_sweep
from fundus.pca import CovariancePCA
from fundus.segnet import (
    SegmenterConfig,
    TrainReport,
    UNetSegmenter,
    compute_weight_map,
    weighted_cross_entropy,
)
from fundus.svm import BinarySVC, KernelSpec, OneVsOneSVC, kernel_eval

__version__ = "0.1.0"

__all__ = [
    "BinarySVC",
    "CovariancePCA",
    "EvalReport",
    "HybridVotingClassifier",
    "KernelSpec",
    "OneVsOneSVC",
    "SegmenterConfig",
    "TrainReport",
    "UNetSegmenter",
    "compute_weight_map",
    "evaluate",
    "kernel_eval",
    "ratio_sweep",
    "weighted_cross_entropy",
    "__version__",
]
