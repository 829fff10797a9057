"""Per-volume test-time adaptation and masked-input prediction averaging.

Each test volume gets a private copy of the trained model.  One (or
``steps``) plain gradient-descent update of the blind-spot denoising loss,
accumulated over every slice of the volume, is applied to the encoder's
batch-norm affine terms only; the segmentation decoder never moves.  The
adapted copy then segments ``K`` independently masked versions of each
slice and the probabilities are averaged.  The copy is dropped afterwards,
so volumes never influence one another.
"""

import copy
import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn as nn

from .errors import AdaptationError, ParameterError
from .evaluation import EvalReport, _row, binarize, dice_coefficient
from .losses import masked_mse
from .masking import DEFAULT_RADIUS, DEFAULT_RATIO, derive_seed, mask_stack
from .network import select_params

log = logging.getLogger(__name__)

_GROUPS = ("encoder_bn_affine", "encoder", "all_encoder")


@dataclass(frozen=True)
class AdaptConfig:
    lr: float = 1e-6
    steps: int = 1
    optimized_group: str = "encoder_bn_affine"
    include_den_decoder_bn: bool = False
    K: int = 2
    mask_ratio: float = DEFAULT_RATIO
    mask_radius: int = DEFAULT_RADIUS
    seed: int = 0
    chunk_size: int = 8
    bn_stats: str = "volume"
    threshold: float = 0.5

    def __post_init__(self):
        if self.steps < 0:
            raise ParameterError(f"steps must be >= 0, got {self.steps}")
        if self.K < 0:
            raise ParameterError(f"K must be >= 0, got {self.K}")
        if self.optimized_group not in _GROUPS:
            raise ParameterError(f"optimized_group must be one of {_GROUPS}")
        if self.bn_stats not in ("volume", "momentum"):
            raise ParameterError(f"bn_stats must be 'volume' or 'momentum', got {self.bn_stats!r}")
        if self.chunk_size < 1:
            raise ParameterError("chunk_size must be >= 1")

    def replace(self, **kw):
        return replace(self, **kw)

    def config_hash(self):
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def volume_key(volume):
    """Stable integer key of a volume id; seeds derive from it, not from list position."""
    return zlib.crc32(str(volume.id).encode())


def prediction_seeds(volume, cfg):
    """One mask sub-seed per augmentation copy."""
    key = volume_key(volume)
    return [derive_seed(cfg.seed, key, k, 200) for k in range(cfg.K)]


def _adapt_params(model, cfg):
    name = "encoder" if cfg.optimized_group in ("encoder", "all_encoder") else "encoder_bn_affine"
    params = select_params(model, name)
    if cfg.include_den_decoder_bn:
        params = params + select_params(model, "den_decoder_bn_affine")
    return params


def adapt_to_volume(model0, volume, cfg):
    """Adapted copy of ``model0`` for one volume; ``model0`` is not touched.

    The adaptation pass runs batch norm on test-volume batch statistics.
    With ``bn_stats="volume"`` the running statistics of the layers it
    traverses are replaced by the volume's own; with ``"momentum"`` they
    are blended in with the layer momentum.  Raises
    :class:`AdaptationError` on a non-finite gradient.
    """
    model = copy.deepcopy(model0)
    if cfg.steps == 0:
        return model
    params = _adapt_params(model, cfg)
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)
    dtype = next(model.parameters()).dtype
    x_all = np.ascontiguousarray(volume.voxels, dtype=np.float64)
    n = x_all.shape[0]
    key = volume_key(volume)
    bns = [
        m
        for part in (model.encoder, model.den_decoder)
        for m in part.modules()
        if isinstance(m, nn.BatchNorm2d)
    ]
    momenta = [bn.momentum for bn in bns]

    try:
        for step in range(cfg.steps):
            model.train()
            if cfg.bn_stats == "volume":
                for bn in bns:
                    bn.reset_running_stats()
                    bn.momentum = None
            for p in params:
                p.grad = None
            step_seed = derive_seed(cfg.seed, key, step, 100)
            for start in range(0, n, cfg.chunk_size):
                idx = range(start, min(start + cfg.chunk_size, n))
                masked, plans = mask_stack(
                    x_all[start : idx.stop],
                    cfg.mask_ratio,
                    cfg.mask_radius,
                    [derive_seed(step_seed, i) for i in idx],
                )
                den = model.denoise(torch.from_numpy(masked[:, None]).to(dtype))
                # mean over all slices of the volume, accumulated chunk by chunk
                loss = torch.stack([masked_mse(den[j, 0], plans[j]) for j in range(len(plans))]).sum() / n
                loss.backward()
            grads = [p.grad for p in params if p.grad is not None]
            if any(not torch.isfinite(g).all() for g in grads):
                raise AdaptationError(f"non-finite adaptation gradient on volume {volume.id!r}")
            with torch.no_grad():
                for p in params:
                    if p.grad is not None:
                        p.sub_(cfg.lr * p.grad)
    finally:
        for bn, mom in zip(bns, momenta):
            bn.momentum = mom
        for p in model.parameters():
            p.grad = None
            p.requires_grad_(True)
        model.eval()
    return model


@torch.no_grad()
def predict_averaged(model, volume, cfg, mask_seeds=None):
    """Per-slice foreground probabilities averaged over ``K`` masked copies.

    ``K = 0`` predicts once on the unmasked slices.  ``mask_seeds`` (one per
    copy) overrides the seeds derived from ``(cfg.seed, volume.id)``.
    Returns a float64 array shaped like the volume.
    """
    model.eval()
    dtype = next(model.parameters()).dtype
    x_all = np.ascontiguousarray(volume.voxels, dtype=np.float64)
    n = x_all.shape[0]
    seeds = list(mask_seeds) if mask_seeds is not None else prediction_seeds(volume, cfg)
    if mask_seeds is not None and len(seeds) != cfg.K:
        raise ParameterError(f"got {len(seeds)} mask seeds for K={cfg.K}")

    def run(x):
        out = np.empty(x.shape, dtype=np.float64)
        for start in range(0, n, cfg.chunk_size):
            xb = torch.from_numpy(x[start : start + cfg.chunk_size, None]).to(dtype)
            out[start : start + cfg.chunk_size] = torch.sigmoid(model.segment(xb))[:, 0].double().numpy()
        return out

    if cfg.K == 0:
        return run(x_all)
    acc = np.zeros_like(x_all)
    for s in seeds:
        masked, _ = mask_stack(x_all, cfg.mask_ratio, cfg.mask_radius, [derive_seed(s, i) for i in range(n)])
        acc += run(masked)
    return acc / cfg.K


def run_detta_eval(model0, volumes, cfg, method="detta"):
    """Adapt, predict and score each volume independently from ``model0``."""
    rows = []
    for v in volumes:
        fallback = False
        try:
            model = adapt_to_volume(model0, v, cfg)
        except AdaptationError:
            log.warning("adaptation failed on %s; scoring with the unadapted model", v.id)
            model, fallback = model0, True
        probs = predict_averaged(model, v, cfg)
        dice = dice_coefficient(binarize(probs, cfg.threshold), v.label)
        rows.append(_row(v, method, dice, cfg.seed, adapted=cfg.steps > 0 and not fallback, fallback=fallback))
        del model
    return EvalReport(rows=rows, config_hash=cfg.config_hash())
