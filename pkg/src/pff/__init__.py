"""Predictive filter flow: per-pixel linear filters predicted by a two-stream CNN."""

from .analysis import FilterBank, colorize_flow, kmeans_filters, loading_factor_maps, pca_filters
from .checkpoint import load_checkpoint, save_checkpoint
from .degradation import DegradeSpec, convolve, jpeg_degrade, random_linear_kernel, sr_degrade
from .flow import (
    FilterFlow,
    FlowField,
    apply_flow,
    apply_flow_bruteforce,
    expected_flow,
    identity_flow,
    normalize_simplex,
    read_flow,
    write_flow,
)
from .image import load_image, psnr, resize_bicubic, rgb_to_y, save_image, ssim
from .optim import TrainState, adam_step
from .predictor import NetConfig, Network, build_network, identity_network
from .trainer import TrainConfig, evaluate, infer_tiled, iterate_pff, l1_loss, sample_batch, train

__version__ = "0.1.0"
