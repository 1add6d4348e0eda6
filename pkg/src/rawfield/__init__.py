"""rawfield: raw-domain HDR volumetric scene reconstruction.

A simulated camera raw pipeline (forward and inverse), a shot/read noise
model, a differentiable voxel-grid volume renderer, an unbiased
gradient-weighted loss with variable-exposure calibration, a multiplane
synthetic-defocus renderer, and an evaluation harness.
"""

from .bayer import demosaic_bilinear, mosaic
from .camera import CameraMetadata, Intrinsics, Pose, generate_ray, generate_rays
from .checkpoint import load_checkpoint, save_checkpoint
from .field import VoxelField
from .losses import (
    ExposureCalibration,
    LossConfig,
    LossVariant,
    expose,
    gradient_weighted_loss,
    tonemapped_loss,
)
from .metrics import AffineAligner, affine_align, masked_psnr, psnr, raw_psnr, ssim
from .mpi import DefocusParams, MPIStack, blur_kernel, defocus, extract_mpi
from .noise import (
    MiscalibrationTable,
    NoiseInjector,
    NoiseParams,
    NoiseParamsEstimator,
    apply_miscalibration,
    fit_noise_params,
    sample_noise,
)
from .pipeline import (
    ColorSpace,
    LinearRGBImage,
    PipelineConfig,
    RawImage,
    RawPostprocessor,
    Unprocessor,
    build_color_transform,
    normalize_raw,
    postprocess,
    srgb_gamma,
    unprocess,
    white_balance,
)
from .rendering import render_image, render_rays, weight_variance
from .synth import Dataset, SceneSpec, bake_scene, default_scene, generate_dataset
from .training import SceneReconstructor, TrainConfig, TrainState, train

__version__ = "0.1.0"
