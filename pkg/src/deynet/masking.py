"""Blind-spot (Noise2Void-style) masking of 2D slices."""

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .errors import ConsistencyError, ParameterError

DEFAULT_RATIO = 0.1
DEFAULT_RADIUS = 2


@dataclass(frozen=True, eq=False)
class MaskPlan:
    """Masked coordinates of one slice with their targets and replacements.

    ``sources`` records which neighbour each replacement was copied from.
    """

    coords: np.ndarray
    originals: np.ndarray
    replacements: np.ndarray
    sources: np.ndarray
    window_radius: int
    seed: int
    shape: tuple

    def __len__(self):
        return self.coords.shape[0]


def derive_seed(seed, *keys):
    """Deterministic 32-bit child seed for ``(seed, *keys)``."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


def plan_mask(image, ratio=DEFAULT_RATIO, window_radius=DEFAULT_RADIUS, seed=0):
    """Pick ``floor(ratio * H * W)`` distinct pixels and a neighbour value for each."""
    image = np.asarray(image)
    if image.ndim != 2 or image.size == 0:
        raise ParameterError(f"image must be a non-empty 2D array, got shape {image.shape}")
    if not 0.0 <= ratio <= 1.0:
        raise ParameterError(f"mask ratio must lie in [0, 1], got {ratio}")
    if window_radius <= 0:
        raise ParameterError(f"window_radius must be >= 1, got {window_radius}")
    h, w = image.shape
    if h * w < 2:
        raise ParameterError("image needs at least two pixels to have a neighbour")
    n = int(np.floor(ratio * h * w))
    rng = np.random.default_rng(seed)
    flat = rng.choice(h * w, size=n, replace=False)
    coords = np.stack([flat // w, flat % w], axis=1).astype(np.int64)
    u = rng.random(n)
    sources = kernels.neighbor_sources(coords, u, h, w, window_radius)
    return MaskPlan(
        coords=coords,
        originals=image[coords[:, 0], coords[:, 1]].copy(),
        replacements=image[sources[:, 0], sources[:, 1]].copy(),
        sources=sources,
        window_radius=int(window_radius),
        seed=int(seed),
        shape=(h, w),
    )


def apply_mask(image, plan):
    """Copy of ``image`` with the plan's pixels replaced by their neighbour values."""
    image = np.asarray(image)
    out = image.copy()
    if len(plan) == 0:
        return out
    h, w = image.shape
    r, c = plan.coords[:, 0], plan.coords[:, 1]
    if r.min() < 0 or c.min() < 0 or r.max() >= h or c.max() >= w:
        raise ConsistencyError(f"mask plan coordinates fall outside image of shape {image.shape}")
    out[r, c] = plan.replacements
    return out


def mask_image(image, ratio=DEFAULT_RATIO, window_radius=DEFAULT_RADIUS, seed=0):
    plan = plan_mask(image, ratio, window_radius, seed)
    return apply_mask(image, plan), plan


def mask_batch(batch, ratio=DEFAULT_RATIO, window_radius=DEFAULT_RADIUS, seed=0):
    """Mask every slice of ``batch`` with its own derived seed.

    Returns ``(masked_batch, plans)``; the input batch is left untouched.
    """
    images = batch.images
    masked = np.empty_like(images)
    plans = []
    for i in range(images.shape[0]):
        x, plan = mask_image(images[i, 0], ratio, window_radius, derive_seed(seed, i))
        masked[i, 0] = x
        plans.append(plan)
    return replace(batch, images=masked), plans


def mask_stack(slices, ratio, window_radius, seeds):
    """Mask a (N, H, W) stack with one explicit seed per slice."""
    out = np.empty_like(slices)
    plans = []
    for i, s in enumerate(seeds):
        out[i], plan = mask_image(slices[i], ratio, window_radius, s)
        plans.append(plan)
    return out, plans
