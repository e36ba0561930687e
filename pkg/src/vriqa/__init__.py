"""Quality assessment for equirectangular 360-degree images.

Full-reference baselines (PSNR, SSIM, MS-SSIM, VIFp and the spherical S-PSNR,
WS-PSNR, CPP-PSNR), a patch-based no-reference predictor trained against a
quality-conditioned discriminator, and the tooling around them.
"""

from .image import ImageBuffer, load_image, save_image
from .metrics2d import MetricResult, ms_ssim, psnr, ssim, vifp
from .metrics_sphere import SphericalMetricConfig, cpp_psnr, s_psnr, ws_psnr
from .model import GuiderModel, ModelConfig, PredictorModel, load_model, predict_score, saliency_map, save_model
from .stats import EvalReport, evaluate, plcc, rmse, srocc
from .training import TrainConfig, TrainSample, kfold_split, load_manifest, train

__version__ = "0.1.0"

__all__ = [
    "EvalReport", "GuiderModel", "ImageBuffer", "MetricResult", "ModelConfig", "PredictorModel",
    "SphericalMetricConfig", "TrainConfig", "TrainSample", "cpp_psnr", "evaluate", "kfold_split", "load_image",
    "load_manifest", "load_model", "ms_ssim", "plcc", "predict_score", "psnr", "rmse", "s_psnr", "saliency_map",
    "save_image", "save_model", "srocc", "ssim", "train", "vifp", "ws_psnr",
]
