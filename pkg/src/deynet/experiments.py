"""Desk-scale domain-shift experiment on synthetic phantoms.

Trains a segmentation-only baseline (the ``alpha = 0`` path of the joint
trainer) and a pretrained-and-transferred Y-net on a clean source domain,
then scores both on a noisier, intensity-shifted target domain with and
without test-time adaptation.
"""

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PhantomSpec, phantom_domain
from .detta import AdaptConfig
from .evaluation import evaluate
from .network import ArchSpec, build_deynet
from .training import TrainConfig, init_deynet_from_pretrain, pretrain_denoiser, train_joint

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrendSetup:
    n_train: int = 12
    n_labeled: int = 8
    n_test: int = 8
    shape: tuple = (16, 48, 48)
    organ_count: int = 3
    source_noise: float = 0.02
    target_noise: float = 0.10
    target_shift: float = 0.15
    epochs: int = 60
    lr: float = 1e-3
    alpha: float = 30.0
    variant: int = 3
    arch: ArchSpec = field(default_factory=lambda: ArchSpec(depth=3, base_channels=16))
    adapt: AdaptConfig = field(default_factory=lambda: AdaptConfig(lr=1e-6, steps=1, K=2))

    def train_config(self, seed):
        # the ramp is compressed to the shortened schedule
        return TrainConfig(epochs=self.epochs, lr=self.lr, alpha=self.alpha, ramp_epochs=self.epochs,
                           seed=seed, arch=self.arch)


def make_domains(setup):
    src = PhantomSpec(organ_count=setup.organ_count, noise_sigma=setup.source_noise, shape=setup.shape)
    tgt = replace(src, noise_sigma=setup.target_noise, intensity_shift=setup.target_shift)
    train = phantom_domain(setup.n_train, src, seed0=1000, domain_tag="source")
    test = phantom_domain(setup.n_test, tgt, seed0=5000, domain_tag="shifted")
    return train[: setup.n_labeled], train[setup.n_labeled :], test


def run_seed(setup, seed, domains=None):
    """Train both models for one seed; per-volume Dice for every scoring route."""
    labeled, unlabeled, test = domains or make_domains(setup)
    cfg = setup.train_config(seed)
    t0 = time.time()

    baseline = build_deynet(cfg.arch, seed=seed, dtype=cfg.torch_dtype)
    train_joint(baseline, labeled, unlabeled, replace(cfg, alpha=0.0))

    pre = pretrain_denoiser(labeled + unlabeled, cfg)
    deynet = init_deynet_from_pretrain(pre, cfg.arch, seed=seed, variant=setup.variant)
    train_joint(deynet, labeled, unlabeled, cfg)

    acfg = setup.adapt.replace(seed=seed)
    scores = {
        "baseline": evaluate(baseline, test, "plain", acfg).dice_by_volume(),
        "deynet": evaluate(deynet, test, "masked_k", acfg).dice_by_volume(),
        "deynet_detta": evaluate(deynet, test, "detta", acfg).dice_by_volume(),
    }
    ids = [v.id for v in test]
    out = {k: np.array([v[i] for i in ids]) for k, v in scores.items()}
    log.info("seed %d done in %.0fs: %s", seed, time.time() - t0,
             {k: round(float(v.mean()), 2) for k, v in out.items()})
    return out


def trend_gates(per_seed):
    """Evaluate the directional gates from per-seed score dicts."""
    base = np.array([s["baseline"].mean() for s in per_seed])
    dey = np.array([s["deynet"].mean() for s in per_seed])
    detta = np.array([s["deynet_detta"].mean() for s in per_seed])
    worst_improved = [
        s["deynet_detta"][np.argmin(s["deynet"])] > s["deynet"].min() for s in per_seed
    ]
    need = -(-2 * len(per_seed) // 3)  # two of three seeds
    return {
        "baseline_mean": float(base.mean()),
        "deynet_mean": float(dey.mean()),
        "detta_mean": float(detta.mean()),
        "a_mean_ok": bool(dey.mean() >= base.mean() - 0.5),
        "a_seeds_higher": int((dey > base).sum()),
        "b_delta": float(detta.mean() - dey.mean()),
        "b_delta_ok": bool(detta.mean() - dey.mean() >= -0.3),
        "b_worst_improved": int(sum(worst_improved)),
        "seeds_needed": need,
    }
