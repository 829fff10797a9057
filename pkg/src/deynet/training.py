"""Denoiser pretraining, decoder transfer and joint training with checkpoints."""

import hashlib
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import count_slices, make_batches, make_joint_batches
from .errors import FormatError, ParameterError, ShapeError, TrainingError
from .losses import DICE_EPS, RampSchedule, joint_loss, masked_mse, ramp_weight, w_max_from_counts
from .masking import DEFAULT_RADIUS, DEFAULT_RATIO, derive_seed, mask_batch
from .network import ArchSpec, build_deynet, build_unet, copy_params

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "deynet-checkpoint/1"

# Initialization variants: (encoder, seg decoder, den decoder) copied from the pretrained denoiser.
VARIANTS = {
    1: (False, False, False),
    2: (True, False, False),
    3: (False, True, False),
    4: (False, False, True),
    5: (True, True, False),
    6: (True, False, True),
    7: (False, True, True),
    8: (True, True, True),
}

# Fields that do not influence the optimization trajectory and are left out of the hash.
_UNHASHED = ("epochs", "checkpoint_every", "checkpoint_dir", "log_path")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class ConfigMismatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    adam_betas: tuple = (0.9, 0.99)
    mask_ratio: float = DEFAULT_RATIO
    mask_radius: int = DEFAULT_RADIUS
    alpha: float = 30.0
    ramp_epochs: int = 200
    loss_mode: str = "denoise"
    dice_eps: float = DICE_EPS
    seed: int = 0
    arch: ArchSpec = field(default_factory=ArchSpec)
    dtype: str = "float32"
    checkpoint_every: int = 10
    checkpoint_dir: str = None
    log_path: str = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not self.lr > 0:
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if self.loss_mode not in ("denoise", "reconstruct"):
            raise ParameterError(f"unknown loss mode {self.loss_mode!r}")
        if self.dtype not in _DTYPES:
            raise ParameterError(f"dtype must be one of {sorted(_DTYPES)}")
        if isinstance(self.arch, dict):
            object.__setattr__(self, "arch", ArchSpec.from_dict(self.arch))
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))

    @property
    def torch_dtype(self):
        return _DTYPES[self.dtype]

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(d["adam_betas"])
        return d

    def config_hash(self):
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    model: torch.nn.Module
    optimizer_state: dict
    epoch: int
    config_hash: str
    rng_state: torch.Tensor = None
    config: dict = None
    log: list = field(default_factory=list)

    @property
    def kind(self):
        return type(self.model).__name__.lower()


def set_deterministic(flag=True):
    """Force deterministic torch kernels (bit-reproducible runs on one machine)."""
    torch.use_deterministic_algorithms(flag)


# ---------------------------------------------------------------------------
# checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": ckpt.kind,
        "arch": json.dumps(ckpt.model.arch.to_dict()),
        "dtype": str(next(ckpt.model.parameters()).dtype).removeprefix("torch."),
        "model_state": ckpt.model.state_dict(),
        "optimizer_state": ckpt.optimizer_state,
        "epoch": int(ckpt.epoch),
        "config_hash": ckpt.config_hash,
        "config": json.dumps(ckpt.config) if ckpt.config is not None else "",
        "rng_state": ckpt.rng_state,
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, cfg=None):
    """Load a checkpoint; warns with :class:`ConfigMismatchWarning` if ``cfg`` hashes differently."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise FormatError(f"{path}: unreadable checkpoint ({type(exc).__name__}: {exc})") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    try:
        arch = ArchSpec.from_dict(json.loads(payload["arch"]))
        builder = {"unet": build_unet, "deynet": build_deynet}[payload["kind"]]
        model = builder(arch, seed=0, dtype=_DTYPES[payload["dtype"]])
        model.load_state_dict(payload["model_state"])
        ckpt = Checkpoint(
            model=model,
            optimizer_state=payload["optimizer_state"],
            epoch=payload["epoch"],
            config_hash=payload["config_hash"],
            rng_state=payload["rng_state"],
            config=json.loads(payload["config"]) if payload["config"] else None,
        )
    except (KeyError, TypeError, ValueError, RuntimeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint contents ({exc})") from exc
    if cfg is not None:
        check_config(ckpt, cfg)
    return ckpt


def check_config(ckpt, cfg):
    if ckpt.config_hash != cfg.config_hash():
        warnings.warn(
            f"checkpoint config hash {ckpt.config_hash} differs from current config {cfg.config_hash()}",
            ConfigMismatchWarning,
            stacklevel=2,
        )
        return False
    return True


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _adam(params, cfg):
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.adam_betas)


def _to_tensor(arr, dtype):
    return torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)


def _write_log(cfg, record):
    if cfg.log_path:
        with open(cfg.log_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def _maybe_checkpoint(cfg, ckpt, prefix, final):
    if not cfg.checkpoint_dir:
        return
    if final or ckpt.epoch % cfg.checkpoint_every == 0:
        save_checkpoint(ckpt, Path(cfg.checkpoint_dir) / f"{prefix}-epoch{ckpt.epoch:04d}.pt")


def _resume(model, opt, start, cfg):
    if start is None:
        return 0
    check_config(start, cfg)
    copy_params(start.model, model)
    opt.load_state_dict(start.optimizer_state)
    return int(start.epoch)


# ---------------------------------------------------------------------------
# stage 1: denoiser pretraining
# ---------------------------------------------------------------------------


def pretrain_denoiser(volumes, cfg, start=None):
    """Train a single-decoder U-Net on the blind-spot loss over every slice.

    Labels are ignored.  ``start`` resumes from a checkpoint of this stage.
    """
    volumes = list(volumes)
    if count_slices(volumes) == 0:
        raise ParameterError("pretraining needs at least one slice")
    model = build_unet(cfg.arch, seed=cfg.seed, dtype=cfg.torch_dtype)
    opt = _adam(model.parameters(), cfg)
    first = _resume(model, opt, start, cfg)
    history = []
    for epoch in range(first, cfg.epochs):
        model.train()
        for step, batch in enumerate(make_batches(volumes, cfg.batch_size, cfg.seed, epoch)):
            masked, plans = mask_batch(
                batch, cfg.mask_ratio, cfg.mask_radius, derive_seed(cfg.seed, epoch, step, 1)
            )
            out = model(_to_tensor(masked.images, cfg.torch_dtype))
            loss = torch.stack([masked_mse(out[i, 0], p) for i, p in enumerate(plans)]).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite denoising loss at epoch {epoch}", epoch=epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            rec = {"stage": "pretrain", "epoch": epoch, "step": step, "l_de": loss.item()}
            history.append(rec)
            _write_log(cfg, rec)
        ckpt = Checkpoint(model, opt.state_dict(), epoch + 1, cfg.config_hash(), torch.get_rng_state(), cfg.to_dict())
        _maybe_checkpoint(cfg, ckpt, "pretrain", final=epoch + 1 == cfg.epochs)
        log.info("pretrain epoch %d  l_de=%.5f", epoch, history[-1]["l_de"])
    ckpt = Checkpoint(model, opt.state_dict(), cfg.epochs, cfg.config_hash(), torch.get_rng_state(), cfg.to_dict())
    ckpt.log = history
    return ckpt


# ---------------------------------------------------------------------------
# stage 2: transfer
# ---------------------------------------------------------------------------


def init_deynet_from_pretrain(pretrain, arch=None, seed=0, variant=3):
    """Fresh Y-net with selected groups copied from a pretrained denoiser.

    ``variant`` indexes :data:`VARIANTS`; the default copies only the
    denoiser's decoder into the segmentation decoder.
    """
    if variant not in VARIANTS:
        raise ParameterError(f"variant must be 1..8, got {variant}")
    donor = pretrain.model if isinstance(pretrain, Checkpoint) else pretrain
    arch = arch or donor.arch
    dtype = next(donor.parameters()).dtype
    model = build_deynet(arch, seed=seed, dtype=dtype)
    use_f, use_s, use_d = VARIANTS[variant]
    try:
        if use_f:
            copy_params(donor.encoder, model.encoder)
        if use_s:
            copy_params(donor.decoder, model.seg_decoder)
        if use_d:
            copy_params(donor.decoder, model.den_decoder)
    except ShapeError as exc:
        raise ShapeError(f"pretrained denoiser does not match architecture {arch}: {exc}") from exc
    return model


# ---------------------------------------------------------------------------
# stage 3: joint training
# ---------------------------------------------------------------------------


def train_joint(model, labeled, unlabeled, cfg, start=None):
    """Joint segmentation + denoising training of a Y-net, in place.

    Each step masks one half-labeled batch once, runs one forward pass and
    one Adam update on every parameter.  The unsupervised weight follows
    the Gaussian ramp with ``w_max = alpha * n_l / (n_l + n_un)`` computed
    from slice counts.  Pass ``start`` to resume from a checkpoint.
    """
    labeled, unlabeled = list(labeled), list(unlabeled)
    n_l, n_un = count_slices(labeled), count_slices(unlabeled)
    sched = RampSchedule(
        w_max=w_max_from_counts(cfg.alpha, n_l, n_un), ramp_epochs=cfg.ramp_epochs
    )
    opt = _adam(model.parameters(), cfg)
    first = _resume(model, opt, start, cfg)
    history = list(start.log) if start is not None else []
    dtype = next(model.parameters()).dtype

    for epoch in range(first, cfg.epochs):
        w_t = ramp_weight(epoch, sched)
        model.train()
        for step, batch in enumerate(
            make_joint_batches(labeled, unlabeled, cfg.batch_size, cfg.seed, epoch)
        ):
            masked, plans = mask_batch(
                batch, cfg.mask_ratio, cfg.mask_radius, derive_seed(cfg.seed, epoch, step, 2)
            )
            seg, den = model(_to_tensor(masked.images, dtype))
            total, l_seg, l_de = joint_loss(
                seg,
                _to_tensor(batch.labels, dtype),
                den,
                plans,
                epoch,
                sched,
                mode=cfg.loss_mode,
                labeled_flags=batch.labeled_flags,
                originals=_to_tensor(batch.images, dtype),
                dice_eps=cfg.dice_eps,
            )
            if not math.isfinite(total.item()):
                raise TrainingError(f"non-finite joint loss at epoch {epoch}, step {step}", epoch=epoch)
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            rec = {
                "stage": "joint",
                "epoch": epoch,
                "step": step,
                "l_seg": l_seg.item(),
                "l_de": l_de.item(),
                "w_t": w_t,
                "total": total.item(),
            }
            history.append(rec)
            _write_log(cfg, rec)
        ckpt = Checkpoint(model, opt.state_dict(), epoch + 1, cfg.config_hash(), torch.get_rng_state(), cfg.to_dict())
        ckpt.log = history
        _maybe_checkpoint(cfg, ckpt, "joint", final=epoch + 1 == cfg.epochs)
        log.info("joint epoch %d  w=%.4f  total=%.5f", epoch, w_t, history[-1]["total"])

    ckpt = Checkpoint(model, opt.state_dict(), cfg.epochs, cfg.config_hash(), torch.get_rng_state(), cfg.to_dict())
    ckpt.log = history
    return ckpt

