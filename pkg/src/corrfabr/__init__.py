"""Radiology-pathology feature fusion for lesion aggressiveness prediction."""

from .aggregation import PairedFeatureSet, aggregate_pixel_pixel, aggregate_region_mean, \
    aggregate_region_p95, build_pairs_by_region, sample_normal_regions
from .cca import cca_oracle
from .corrnet import CorrNetModel, FusionTrainConfig, corrnet_grad, encode_radiology, \
    train_fusion
from .evaluation import MetricsReport, confusion_metrics, dice, kfold_split, roc_auc
from .features import FeatureExtractor, extract_highres_patches, extract_lowres, \
    make_builtin_extractor
from .prediction import PredictorTrainConfig, ensemble_average, majority_vote, \
    train_predictor
from .preprocessing import crop_resize_lesion, macenko_fit, macenko_normalize, \
    otsu_threshold, zscore_normalize_lesion
from .synthetic import TwoViewSpec, gen_cohort, gen_two_view, write_cohort
from .tensor_io import load_tensor, make_rng, save_tensor

__version__ = "0.1.0"
