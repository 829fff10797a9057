"""Volumes, CT preprocessing, joint batching and synthetic phantoms."""

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import DataError, FormatError, ParameterError, ShapeError

CT_WINDOW = (-200.0, 400.0)

_DTYPES = {"f32": np.dtype("<f4"), "i16": np.dtype("<i2"), "u8": np.dtype("u1")}
_HEADER_SUFFIX = ".hdr"
_PAYLOAD_SUFFIX = ".raw"
_LABEL_TAG = ".label"


@dataclass(frozen=True, eq=False)
class Volume:
    """A stack of 2D slices with optional binary label of the same shape."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    label: np.ndarray = None
    id: str = ""
    domain_tag: str = ""

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ShapeError(f"voxels must be 3D (slices, H, W), got shape {self.voxels.shape}")
        if self.label is not None:
            if self.label.shape != self.voxels.shape:
                raise ShapeError(
                    f"label shape {self.label.shape} does not match voxels {self.voxels.shape}"
                )
            if not np.isin(self.label, (0, 1)).all():
                raise DataError(f"label of volume {self.id!r} contains values outside {{0, 1}}")
        self.voxels.flags.writeable = False
        if self.label is not None:
            self.label.flags.writeable = False

    @property
    def n_slices(self):
        return self.voxels.shape[0]

    @property
    def shape(self):
        return self.voxels.shape


@dataclass
class SliceBatch:
    """A training batch of preprocessed slices.

    ``labels`` holds masks for the labeled items only, in batch order, so
    ``labels.shape[0] == labeled_flags.sum()``.
    """

    images: np.ndarray
    labels: np.ndarray
    labeled_flags: np.ndarray
    source_ids: list

    def __post_init__(self):
        n_lab = int(np.count_nonzero(self.labeled_flags))
        got = 0 if self.labels is None else self.labels.shape[0]
        if got != n_lab:
            raise DataError(f"batch has {n_lab} labeled items but {got} labels")

    def __len__(self):
        return self.images.shape[0]


@dataclass(frozen=True)
class PhantomSpec:
    organ_count: int = 3
    noise_sigma: float = 0.0
    intensity_shift: float = 0.0
    deform_amp: float = 0.0
    shape: tuple = (16, 64, 64)
    seed: int = 0

    def __post_init__(self):
        for name in ("noise_sigma", "intensity_shift", "deform_amp"):
            if getattr(self, name) < 0:
                raise ParameterError(f"PhantomSpec.{name} must be nonnegative")
        if self.organ_count < 1:
            raise ParameterError("PhantomSpec.organ_count must be >= 1")
        if len(self.shape) != 3 or min(self.shape) < 16:
            raise ParameterError(f"PhantomSpec.shape components must be >= 16, got {self.shape}")


# ---------------------------------------------------------------------------
# container format
# ---------------------------------------------------------------------------


def _header_paths(path):
    path = Path(path)
    if path.suffix == _PAYLOAD_SUFFIX:
        path = path.with_suffix(_HEADER_SUFFIX)
    elif path.suffix != _HEADER_SUFFIX:
        path = path.with_name(path.name + _HEADER_SUFFIX)
    return path, path.with_suffix(_PAYLOAD_SUFFIX)


def _label_header(header_path):
    return header_path.with_name(header_path.stem + _LABEL_TAG + _HEADER_SUFFIX)


def _read_array(header_path):
    header_path, payload_path = _header_paths(header_path)
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{header_path}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{header_path}: header must be a key/value object")

    dims = header.get("dims")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and d > 0 for d in dims)
    ):
        raise FormatError(f"{header_path}: field 'dims' must be three positive integers")
    spacing = header.get("spacing", [1.0, 1.0, 1.0])
    if not isinstance(spacing, list) or len(spacing) != 3:
        raise FormatError(f"{header_path}: field 'spacing' must be three numbers")
    code = header.get("dtype")
    if code not in _DTYPES:
        raise FormatError(f"{header_path}: field 'dtype' has unknown code {code!r}")
    if header.get("byte_order", "little") not in ("little", "little-endian"):
        raise FormatError(f"{header_path}: field 'byte_order' must be little-endian")

    dtype = _DTYPES[code]
    raw = payload_path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{payload_path}: payload has {len(raw)} bytes, header 'dims'/'dtype' imply {expected}"
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims)
    return arr, header


def load_volume(path):
    """Read a volume (and its sibling ``.label`` file when present)."""
    header_path, _ = _header_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(header_path)
    arr, header = _read_array(header_path)
    label = None
    label_path = _label_header(header_path)
    if label_path.exists():
        label, _ = _read_array(label_path)
        if label.shape != arr.shape:
            raise ShapeError(f"{label_path}: label dims {label.shape} != image dims {arr.shape}")
        label = label.astype(np.uint8)
    return Volume(
        voxels=arr.astype(np.float32),
        spacing=tuple(float(s) for s in header.get("spacing", [1.0, 1.0, 1.0])),
        label=label,
        id=str(header.get("id", header_path.stem)),
        domain_tag=str(header.get("domain_tag", "")),
    )


def _write_array(header_path, arr, code, spacing, extra=None):
    payload_path = header_path.with_suffix(_PAYLOAD_SUFFIX)
    header = {
        "dims": [int(d) for d in arr.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": code,
        "byte_order": "little",
    }
    if extra:
        header.update(extra)
    header_path.write_text(json.dumps(header, indent=1))
    payload_path.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def save_volume(volume, path, dtype="f32"):
    """Write ``volume`` in the header + raw payload format; returns the header path."""
    if dtype not in ("f32", "i16"):
        raise ParameterError(f"image dtype must be 'f32' or 'i16', got {dtype!r}")
    header_path, _ = _header_paths(path)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    voxels = volume.voxels
    if dtype == "i16":
        voxels = np.rint(voxels)
    _write_array(
        header_path,
        voxels,
        dtype,
        volume.spacing,
        {"id": volume.id, "domain_tag": volume.domain_tag},
    )
    if volume.label is not None:
        _write_array(_label_header(header_path), volume.label, "u8", volume.spacing)
    return header_path


def load_dir(directory):
    """Load every image volume in ``directory`` sorted by file name."""
    directory = Path(directory)
    headers = sorted(
        p for p in directory.glob("*" + _HEADER_SUFFIX) if not p.stem.endswith(_LABEL_TAG)
    )
    if not headers:
        raise DataError(f"no volumes found in {directory}")
    return [load_volume(p) for p in headers]


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def preprocess_ct(volume, window=CT_WINDOW):
    """Clip to ``window`` then min-max normalize each slice to [0, 1].

    Statistics are taken after clipping; constant slices become zeros.
    """
    low, high = window
    if not low < high:
        raise ParameterError(f"window low must be < high, got {window}")
    v = np.clip(volume.voxels.astype(np.float64), low, high)
    vmin = v.min(axis=(1, 2), keepdims=True)
    rng = v.max(axis=(1, 2), keepdims=True) - vmin
    safe = np.where(rng > 0, rng, 1.0)
    out = np.where(rng > 0, (v - vmin) / safe, 0.0)
    return replace(volume, voxels=out.astype(np.float32))


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _slice_index(volumes):
    return [(vi, s) for vi, v in enumerate(volumes) for s in range(v.n_slices)]


def _epoch_rng(seed, epoch, stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), stream]))


def count_slices(volumes):
    return sum(v.n_slices for v in volumes)


def make_joint_batches(labeled, unlabeled, batch_size, seed, epoch=0):
    """One epoch of half-labeled / half-unlabeled batches.

    Every labeled slice is visited exactly once per epoch; unlabeled slices
    are drawn with replacement to pair with them.  When the labeled count is
    not a multiple of ``batch_size // 2`` the final batch is smaller but
    still balanced.  The order depends only on ``(seed, epoch)``.
    """
    if batch_size <= 0 or batch_size % 2:
        raise ParameterError(f"batch_size must be a positive even integer, got {batch_size}")
    labeled, unlabeled = list(labeled), list(unlabeled)
    if not labeled or not unlabeled:
        raise DataError("joint batching needs non-empty labeled and unlabeled sets")
    for v in labeled:
        if v.label is None:
            raise DataError(f"labeled volume {v.id!r} carries no label")

    lab_idx = _slice_index(labeled)
    unl_idx = _slice_index(unlabeled)
    half = batch_size // 2
    rng = _epoch_rng(seed, epoch, 0)
    order = rng.permutation(len(lab_idx))
    draws = rng.integers(0, len(unl_idx), size=len(lab_idx))

    for start in range(0, len(order), half):
        sel = order[start : start + half]
        pick = draws[start : start + half]
        imgs, labels, ids = [], [], []
        for i in sel:
            vi, s = lab_idx[i]
            imgs.append(labeled[vi].voxels[s])
            labels.append(labeled[vi].label[s])
            ids.append((labeled[vi].id, s))
        for j in pick:
            vi, s = unl_idx[j]
            imgs.append(unlabeled[vi].voxels[s])
            ids.append((unlabeled[vi].id, s))
        n = len(sel)
        yield SliceBatch(
            images=np.stack(imgs)[:, None].astype(np.float32),
            labels=np.stack(labels)[:, None].astype(np.uint8),
            labeled_flags=np.array([True] * n + [False] * n),
            source_ids=ids,
        )


def make_batches(volumes, batch_size, seed, epoch=0):
    """One epoch of unlabeled batches over every slice (denoiser pretraining)."""
    if batch_size <= 0:
        raise ParameterError(f"batch_size must be positive, got {batch_size}")
    volumes = list(volumes)
    idx = _slice_index(volumes)
    if not idx:
        raise DataError("no slices to batch")
    order = _epoch_rng(seed, epoch, 1).permutation(len(idx))
    for start in range(0, len(order), batch_size):
        sel = [idx[i] for i in order[start : start + batch_size]]
        yield SliceBatch(
            images=np.stack([volumes[vi].voxels[s] for vi, s in sel])[:, None].astype(np.float32),
            labels=None,
            labeled_flags=np.zeros(len(sel), dtype=bool),
            source_ids=[(volumes[vi].id, s) for vi, s in sel],
        )


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

# Intensities in window-normalized units; converted to HU on output.
_AIR = -1.4
_BODY = 0.45
_LIVER = 0.62
_DISTRACTORS = (0.78, 0.52, 0.70, 0.35)


def phantom_displacement(spec):
    """Smooth in-plane displacement field (2, D, H, W) in pixels, scaled to ``deform_amp``."""
    d, h, w = spec.shape
    if spec.deform_amp == 0:
        return np.zeros((2, d, h, w))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    raw = rng.standard_normal((2, d, h, w))
    sigma = (max(d / 8, 1.0), h / 8, w / 8)
    field_ = np.stack([ndimage.gaussian_filter(raw[i], sigma, mode="wrap") for i in range(2)])
    peak = np.abs(field_).max()
    return field_ * (spec.deform_amp / peak) if peak > 0 else field_


def warp(volume_array, displacement, order):
    """Resample a (D, H, W) array at ``grid + displacement`` (in-plane)."""
    d, h, w = volume_array.shape
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([zz, yy + displacement[0], xx + displacement[1]]).astype(np.float64)
    return ndimage.map_coordinates(volume_array, coords, order=order, mode="nearest")


def bias_field(spec):
    """Smooth low-frequency additive field whose peak magnitude is ``intensity_shift``."""
    d, h, w = spec.shape
    if spec.intensity_shift == 0:
        return np.zeros(spec.shape)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 11]))
    y = np.linspace(-1, 1, h)[None, :, None]
    x = np.linspace(-1, 1, w)[None, None, :]
    z = np.linspace(-1, 1, d)[:, None, None]
    a = rng.uniform(-1, 1, size=5)
    f = a[0] * x + a[1] * y + a[2] * x * y + a[3] * (x**2 - 0.5) + a[4] * z
    return spec.intensity_shift * f / np.abs(f).max()


def _organ_layout(spec, rng):
    d, h, w = spec.shape
    body_c = np.array([(d - 1) / 2, (h - 1) / 2, (w - 1) / 2])
    body_r = np.array([d * 2.0, h * 0.42, w * 0.46]) * rng.uniform(0.92, 1.05, size=3)
    centers, radii, vals = [body_c], [body_r], [_BODY]
    # the liver: large, off-centre to one side, covers a central slab of slices
    liver_c = np.array(
        [
            (d - 1) * rng.uniform(0.4, 0.6),
            h * rng.uniform(0.38, 0.5),
            w * rng.uniform(0.3, 0.4),
        ]
    )
    liver_r = np.array([d * rng.uniform(0.32, 0.45), h * rng.uniform(0.16, 0.22), w * rng.uniform(0.13, 0.19)])
    for k in range(spec.organ_count - 1):
        c = np.array(
            [
                (d - 1) * rng.uniform(0.2, 0.8),
                h * rng.uniform(0.35, 0.68),
                w * rng.uniform(0.55, 0.75),
            ]
        )
        r = np.array([d * rng.uniform(0.2, 0.4), h * rng.uniform(0.06, 0.11), w * rng.uniform(0.06, 0.11)])
        centers.append(c)
        radii.append(r)
        vals.append(_DISTRACTORS[k % len(_DISTRACTORS)] + rng.uniform(-0.03, 0.03))
    # liver painted last so its label is never occluded
    centers.append(liver_c)
    radii.append(liver_r)
    vals.append(_LIVER + rng.uniform(-0.02, 0.02))
    return np.array(centers), np.array(radii), np.array(vals)


def render_phantom(spec):
    """Canonical (undeformed, noise-free) image in normalized units plus its label."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))
    centers, radii, vals = _organ_layout(spec, rng)
    image, member = kernels.render_organs(spec.shape, centers, radii, vals, _AIR, 0.04)
    label = (member[-1] > 0.5).astype(np.uint8)
    return image, label


def generate_phantom(spec, id=None, domain_tag=""):
    """Synthetic abdominal-like CT volume in HU with a liver-like label.

    ``noise_sigma`` and ``intensity_shift`` are given in window-normalized
    units (1.0 == the width of :data:`CT_WINDOW`).
    """
    image, label = render_phantom(spec)
    disp = phantom_displacement(spec)
    if spec.deform_amp > 0:
        image = warp(image, disp, order=1)
        label = warp(label.astype(np.float64), disp, order=0).astype(np.uint8)
    image = image + bias_field(spec)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 5]))
        image = image + spec.noise_sigma * rng.standard_normal(spec.shape)
    low, high = CT_WINDOW
    hu = low + (high - low) * image
    return Volume(
        voxels=hu.astype(np.float32),
        spacing=(2.5, 0.8, 0.8),
        label=label,
        id=id if id is not None else f"phantom-{spec.seed}",
        domain_tag=domain_tag,
    )


def phantom_spec_from_dict(d):
    d = dict(d)
    if "shape" in d:
        d["shape"] = tuple(d["shape"])
    return PhantomSpec(**d)


def phantom_domain(n, base_spec, seed0, domain_tag, preprocess=True):
    """``n`` phantoms sharing ``base_spec`` except for consecutive seeds."""
    vols = []
    for i in range(n):
        spec = replace(base_spec, seed=seed0 + i)
        v = generate_phantom(spec, id=f"{domain_tag}-{seed0 + i:04d}", domain_tag=domain_tag)
        vols.append(preprocess_ct(v) if preprocess else v)
    return vols
