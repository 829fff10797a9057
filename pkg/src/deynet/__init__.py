"""Y-shaped denoising U-Net with denoising test-time adaptation."""

from .data import (
    CT_WINDOW,
    PhantomSpec,
    SliceBatch,
    Volume,
    generate_phantom,
    load_volume,
    make_joint_batches,
    preprocess_ct,
    save_volume,
)
from .detta import AdaptConfig, adapt_to_volume, predict_averaged, run_detta_eval
from .evaluation import EvalReport, dice_coefficient, evaluate, run_experiment_matrix
from .losses import RampSchedule, dice_loss, joint_loss, masked_mse, ramp_weight, w_max_from_counts
from .masking import MaskPlan, apply_mask, mask_batch, plan_mask
from .network import ArchSpec, build_deynet, copy_params, forward, select_params
from .training import (
    Checkpoint,
    TrainConfig,
    init_deynet_from_pretrain,
    load_checkpoint,
    pretrain_denoiser,
    save_checkpoint,
    train_joint,
)

__version__ = "0.1.0"
