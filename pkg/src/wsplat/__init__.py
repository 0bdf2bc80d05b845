"""Wavelet-supervised Gaussian splatting on the CPU.

Differentiable splat rendering with global and patch-wise Haar-subband
training objectives, an optional NIR branch over shared geometry, and a
few-shot benchmark harness.
"""

from .camera import Camera
from .config import DensifyConfig, Stage, TrainConfig
from .losses import (
    LFEnergyMap,
    LossReport,
    PatchSet,
    SubbandWeights,
    global_dwt_loss,
    l1_loss,
    lf_energy_map,
    multispectral_loss,
    patch_dwt_loss,
    select_patches,
    ssim_loss,
    total_loss,
)
from .metrics import MetricsRow, evaluate, psnr, ssim
from .renderer import (
    GaussianCloud,
    RenderOutput,
    load_checkpoint,
    project,
    rasterize,
    rasterize_backward,
    render_multispectral,
    save_checkpoint,
)
from .scene import (
    Scene,
    SyntheticSpec,
    generate_synthetic_scene,
    load_scene,
    save_scene,
    select_train_views,
)
from .trainer import init_cloud, residual_mask, run_training, train
from .wavelet import SubbandPyramid, Subbands, dwt2, dwt2_multi, idwt2, idwt2_multi

__version__ = "0.1.0"
