"""U-Net encoder with two identical decoders (segmentation and denoising)."""

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from .errors import ParameterError, ShapeError

GROUPS = ("encoder", "seg_decoder", "den_decoder", "encoder_bn_affine", "den_decoder_bn_affine", "all")


@dataclass(frozen=True)
class ArchSpec:
    depth: int = 4
    base_channels: int = 32
    in_channels: int = 1
    upsample: str = "transpose"
    activation: str = "elu"

    def __post_init__(self):
        if self.depth < 2:
            raise ParameterError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ParameterError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.upsample not in ("transpose", "bilinear"):
            raise ParameterError(f"unknown upsample mode {self.upsample!r}")
        if self.activation not in _ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")

    def channels(self):
        return [self.base_channels * 2**i for i in range(self.depth)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


_ACTIVATIONS = {
    "relu": lambda: nn.ReLU(inplace=True),
    "leaky_relu": lambda: nn.LeakyReLU(0.01, inplace=True),
    "elu": lambda: nn.ELU(inplace=True),
}


class DoubleConv(nn.Sequential):
    def __init__(self, cin, cout, activation):
        act = _ACTIVATIONS[activation]
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            act(),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False),
            nn.BatchNorm2d(cout),
            act(),
        )


class Encoder(nn.Module):
    """Down path; returns the feature map of every resolution level."""

    def __init__(self, arch):
        super().__init__()
        ch = arch.channels()
        self.levels = nn.ModuleList()
        cin = arch.in_channels
        for c in ch:
            self.levels.append(DoubleConv(cin, c, arch.activation))
            cin = c
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        feats = []
        for i, level in enumerate(self.levels):
            if i > 0:
                x = self.pool(x)
            x = level(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    """Up path with skip connections ending in a single-channel 1x1 head."""

    def __init__(self, arch):
        super().__init__()
        ch = arch.channels()
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(arch.depth - 1, 0, -1):
            if arch.upsample == "transpose":
                up = nn.ConvTranspose2d(ch[i], ch[i - 1], 2, stride=2)
            else:
                up = nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                    nn.Conv2d(ch[i], ch[i - 1], 1),
                )
            self.ups.append(up)
            self.blocks.append(DoubleConv(2 * ch[i - 1], ch[i - 1], arch.activation))
        self.head = nn.Conv2d(ch[0], 1, 1)

    def forward(self, feats):
        x = feats[-1]
        for up, block, skip in zip(self.ups, self.blocks, reversed(feats[:-1])):
            x = block(torch.cat([skip, up(x)], dim=1))
        return self.head(x)


def _check_input(x, depth):
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected input of shape (N, 1, H, W), got {tuple(x.shape)}")
    f = 2 ** (depth - 1)
    if x.shape[-2] % f or x.shape[-1] % f:
        raise ShapeError(f"H and W must be divisible by {f} for depth {depth}, got {tuple(x.shape[-2:])}")


class UNet(nn.Module):
    """Plain single-decoder U-Net (used for denoiser pretraining)."""

    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.decoder = Decoder(arch)

    def forward(self, x):
        _check_input(x, self.arch.depth)
        return self.decoder(self.encoder(x))


class DeYNet(nn.Module):
    """Shared encoder feeding a segmentation decoder and a denoising decoder."""

    def __init__(self, arch):
        super().__init__()
        self.arch = arch
        self.encoder = Encoder(arch)
        self.seg_decoder = Decoder(arch)
        self.den_decoder = Decoder(arch)

    def forward(self, x):
        _check_input(x, self.arch.depth)
        feats = self.encoder(x)
        return self.seg_decoder(feats), self.den_decoder(feats)

    def denoise(self, x):
        _check_input(x, self.arch.depth)
        return self.den_decoder(self.encoder(x))

    def segment(self, x):
        _check_input(x, self.arch.depth)
        return self.seg_decoder(self.encoder(x))


def _seeded_build(cls, arch, seed, dtype):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = cls(arch)
    return model.to(dtype)


def build_deynet(arch=None, seed=0, dtype=torch.float32):
    """Fresh model whose initial weights depend only on ``(arch, seed)``."""
    return _seeded_build(DeYNet, arch or ArchSpec(), seed, dtype)


def build_unet(arch=None, seed=0, dtype=torch.float32):
    return _seeded_build(UNet, arch or ArchSpec(), seed, dtype)


def forward(model, x, mode="eval"):
    """Run ``model`` on ``x`` in the given normalization mode.

    In ``"train"`` mode batch norm uses batch statistics and updates its
    running estimates; in ``"eval"`` mode it uses (and keeps) stored ones.
    """
    if mode not in ("train", "eval"):
        raise ParameterError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    return model(x)


def _bn_affine(module):
    out = []
    for m in module.modules():
        if isinstance(m, nn.BatchNorm2d):
            out.extend([m.weight, m.bias])
    return out


def select_params(model, name):
    """Parameters of one named group, in module order."""
    if name == "encoder":
        return list(model.encoder.parameters())
    if name == "encoder_bn_affine":
        return _bn_affine(model.encoder)
    if name == "seg_decoder":
        return list(model.seg_decoder.parameters())
    if name == "den_decoder":
        return list(model.den_decoder.parameters())
    if name == "den_decoder_bn_affine":
        return _bn_affine(model.den_decoder)
    if name == "all":
        return list(model.parameters())
    raise ParameterError(f"unknown parameter group {name!r}; expected one of {GROUPS}")


def param_groups(model):
    """Mapping of every partitioning group name to its parameter names."""
    names = {}
    for n, _ in model.named_parameters():
        names.setdefault(n.split(".", 1)[0], []).append(n)
    return names


@torch.no_grad()
def copy_params(src, dst):
    """Copy values from ``src`` into ``dst`` layer by layer.

    Accepts modules (parameters and batch-norm buffers are copied) or
    sequences of tensors.
    """
    if isinstance(src, nn.Module) and isinstance(dst, nn.Module):
        src_t = list(src.state_dict().values())
        dst_t = list(dst.state_dict().values())
    else:
        src_t, dst_t = list(src), list(dst)
    if len(src_t) != len(dst_t):
        raise ShapeError(f"groups differ in length: {len(src_t)} vs {len(dst_t)}")
    for i, (s, d) in enumerate(zip(src_t, dst_t)):
        if s.shape != d.shape:
            raise ShapeError(f"tensor {i}: shape {tuple(s.shape)} vs {tuple(d.shape)}")
    for s, d in zip(src_t, dst_t):
        d.copy_(s)


def count_params(params):
    return sum(p.numel() for p in params)
