"""Toolkit for traffic-sign detection data engineering and evaluation.

Provides the pieces of a detection pipeline that live outside the network
itself: an annotated dataset model with size-based difficulty rules,
homography rectification of polygon-annotated signs, fitted distortion
distributions for synthetic data augmentation, geo-clustered train/test
splitting, ROI sampling strategies, and a full detection evaluation kit.
"""

__version__ = "0.1.0"

from signkit.dataset import (
    Category,
    Dataset,
    ImageRecord,
    Instance,
    Template,
    load_dataset,
    save_dataset,
    validate_category_criteria,
)
from signkit.distortion import DistortionModel, DistortionSample, GaussianMixture, fit_gmm
from signkit.evalkit import Detection, EvalReport, GroundTruth, PRCurve, evaluate
from signkit.geometry import EulerAngles, Homography, Intrinsics
from signkit.splitter import SplitResult, cluster_by_location, split_dataset

__all__ = [
    "Category",
    "Dataset",
    "Detection",
    "DistortionModel",
    "DistortionSample",
    "EulerAngles",
    "EvalReport",
    "GaussianMixture",
    "GroundTruth",
    "Homography",
    "ImageRecord",
    "Instance",
    "Intrinsics",
    "PRCurve",
    "SplitResult",
    "Template",
    "cluster_by_location",
    "evaluate",
    "fit_gmm",
    "load_dataset",
    "save_dataset",
    "split_dataset",
    "validate_category_criteria",
    "__version__",
]
