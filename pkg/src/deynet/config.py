"""Config files: nested YAML/JSON mapped onto the dataclass configs.

Recognised keys (all optional)::

    mask:  {ratio, window_radius}
    loss:  {alpha, ramp_epochs, dice_eps, mode}
    train: {epochs, batch_size, lr, adam_betas, seed, dtype, checkpoint_every,
            checkpoint_dir, log_path}
    arch:  {depth, base_channels, upsample, activation}
    adapt: {lr, steps, group, K, seed, chunk_size, bn_stats, threshold}

Dotted keys at the top level (``mask.ratio: 0.2``) are accepted as well.
"""

from pathlib import Path

import yaml

from .errors import ParameterError
from .network import ArchSpec

_TRAIN_KEYS = {
    ("mask", "ratio"): "mask_ratio",
    ("mask", "window_radius"): "mask_radius",
    ("loss", "alpha"): "alpha",
    ("loss", "ramp_epochs"): "ramp_epochs",
    ("loss", "dice_eps"): "dice_eps",
    ("loss", "mode"): "loss_mode",
    ("train", "epochs"): "epochs",
    ("train", "batch_size"): "batch_size",
    ("train", "lr"): "lr",
    ("train", "adam_betas"): "adam_betas",
    ("train", "seed"): "seed",
    ("train", "dtype"): "dtype",
    ("train", "checkpoint_every"): "checkpoint_every",
    ("train", "checkpoint_dir"): "checkpoint_dir",
    ("train", "log_path"): "log_path",
}

_ADAPT_KEYS = {
    ("mask", "ratio"): "mask_ratio",
    ("mask", "window_radius"): "mask_radius",
    ("adapt", "lr"): "lr",
    ("adapt", "steps"): "steps",
    ("adapt", "group"): "optimized_group",
    ("adapt", "K"): "K",
    ("adapt", "seed"): "seed",
    ("adapt", "chunk_size"): "chunk_size",
    ("adapt", "bn_stats"): "bn_stats",
    ("adapt", "threshold"): "threshold",
}

_SECTIONS = {"mask", "loss", "train", "arch", "adapt", "phantom"}


def _nest(raw):
    out = {}
    for key, value in raw.items():
        if "." in key:
            section, name = key.split(".", 1)
            out.setdefault(section, {})[name] = value
        elif isinstance(value, dict):
            out.setdefault(key, {}).update(value)
        else:
            raise ParameterError(f"config key {key!r} must be a section or a dotted key")
    unknown = set(out) - _SECTIONS
    if unknown:
        raise ParameterError(f"unknown config sections: {sorted(unknown)}")
    return out


def load_config(path):
    """Read a YAML or JSON config file into a nested dict."""
    text = Path(path).read_text()
    raw = yaml.safe_load(text) or {}
    if not isinstance(raw, dict):
        raise ParameterError(f"{path}: top level must be a mapping")
    return _nest(raw)


def _pick(nested, table):
    kw = {}
    for (section, name), field_name in table.items():
        if name in nested.get(section, {}):
            kw[field_name] = nested[section][name]
    known = {}
    for section, name in table:
        known.setdefault(section, set()).add(name)
    for section, names in known.items():
        extra = set(nested.get(section, {})) - names
        if extra:
            raise ParameterError(f"unknown keys in [{section}]: {sorted(extra)}")
    return kw


def train_config(nested, **overrides):
    from .training import TrainConfig

    kw = _pick(nested, _TRAIN_KEYS)
    if "arch" in nested:
        kw["arch"] = ArchSpec.from_dict(nested["arch"])
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kw)


def adapt_config(nested, **overrides):
    from .detta import AdaptConfig

    kw = _pick(nested, _ADAPT_KEYS)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return AdaptConfig(**kw)
