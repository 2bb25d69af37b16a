"""Network architectures and forward contracts.

Student: one U-Net encoder feeding three structurally identical decoders
(main, feature-noise, feature-dropout). Teacher: same U-Net shape with
dropout sites in the decoder for stochastic sampling. Discriminator: a
patch-output convolutional classifier over latent features (or masks).

All stochastic forwards take explicit torch generators so they are pure
functions of (params, input, rng state). U-Nets use GroupNorm and the
discriminator uses batch-statistics BatchNorm, so no forward pass mutates
buffers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .errors import BadInputDims, RangeViolation
from .types import DomainTag


@dataclass(frozen=True)
class UNetSpec:
    depth: int = 4
    base_filters: int = 16
    in_channels: int = 3
    out_channels: int = 1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_filters * 2**self.depth


@dataclass(frozen=True)
class StudentSpec:
    unet: UNetSpec = field(default_factory=UNetSpec)
    noise_sigma: float = 0.3
    dropout_gamma: tuple = (0.7, 0.9)
    # Default perturbs the bottleneck only; True also perturbs every skip
    # feature handed to the auxiliary decoders.
    perturb_skip_connections: bool = False


@dataclass(frozen=True)
class TeacherSpec:
    unet: UNetSpec = field(default_factory=UNetSpec)
    mc_dropout_rate: float = 0.5
    # "per_stage": one dropout after each decoder stage (depth sites);
    # "final_stage": all four stacked after the last decoder stage.
    mc_dropout_placement: str = "per_stage"
    mc_dropout_layers: int = 4


@dataclass(frozen=True)
class DiscriminatorSpec:
    base_filters: int = 64
    conv_layers: int = 3
    leaky_slope: float = 0.2


@dataclass
class FeatureMap:
    """Latent feature tensor plus where it came from (for the discriminator)."""

    values: torch.Tensor  # (N, C, H', W')
    provenance: str  # "student_encoder" | "teacher_encoder"
    domain: DomainTag

    def __post_init__(self):
        if not torch.isfinite(self.values).all():
            raise RangeViolation("feature map contains non-finite values")


def _group_norm(ch: int) -> nn.GroupNorm:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return nn.GroupNorm(g, ch)
    return nn.GroupNorm(1, ch)


class ConvBlock(nn.Module):
    """Two 3x3 convs, each followed by GroupNorm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            _group_norm(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            _group_norm(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Encoder(nn.Module):
    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        chans = [spec.base_filters * 2**i for i in range(spec.depth + 1)]
        self.in_conv = ConvBlock(spec.in_channels, chans[0])
        self.pool = nn.MaxPool2d(2)
        self.downs = nn.ModuleList(ConvBlock(chans[i], chans[i + 1]) for i in range(spec.depth))

    def forward(self, x) -> list:
        """Returns [f_0 .. f_depth]; the last entry is the bottleneck."""
        feats = [self.in_conv(x)]
        for down in self.downs:
            feats.append(down(self.pool(feats[-1])))
        return feats


def _functional_dropout(x, rate: float, gen: torch.Generator | None):
    if rate <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=gen, device=x.device) >= rate).to(x.dtype)
    return x * keep / (1.0 - rate)


class Decoder(nn.Module):
    def __init__(self, spec: UNetSpec, mc: TeacherSpec | None = None):
        super().__init__()
        self.spec = spec
        self.mc = mc
        chans = [spec.base_filters * 2**i for i in range(spec.depth + 1)]
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2)
            for i in reversed(range(spec.depth))
        )
        self.convs = nn.ModuleList(
            ConvBlock(2 * chans[i], chans[i]) for i in reversed(range(spec.depth))
        )
        self.out_conv = nn.Conv2d(chans[0], spec.out_channels, 1)

    def forward(self, feats: list, stochastic: bool = False, gen: torch.Generator | None = None):
        x = feats[-1]
        n_stages = len(self.ups)
        for i, (up, conv) in enumerate(zip(self.ups, self.convs)):
            x = conv(torch.cat([feats[-(i + 2)], up(x)], dim=1))
            if stochastic and self.mc is not None and self.mc.mc_dropout_placement == "per_stage":
                x = _functional_dropout(x, self.mc.mc_dropout_rate, gen)
        if stochastic and self.mc is not None and self.mc.mc_dropout_placement == "final_stage":
            for _ in range(self.mc.mc_dropout_layers):
                x = _functional_dropout(x, self.mc.mc_dropout_rate, gen)
        return torch.sigmoid(self.out_conv(x))


def _check_input_dims(x, depth: int):
    h, w = x.shape[-2], x.shape[-1]
    div = 2**depth
    if h % div or w % div or h < div or w < div:
        raise BadInputDims(f"input {h}x{w} must be divisible by 2^depth = {div}")


def feature_noise(z: torch.Tensor, sigma: float, gen: torch.Generator | None = None) -> torch.Tensor:
    """Additive elementwise noise drawn uniformly from (-sigma, sigma)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0.0:
        return z
    eps = (torch.rand(z.shape, generator=gen, device=z.device, dtype=z.dtype) * 2.0 - 1.0) * sigma
    return z + eps


def attention_map(z: torch.Tensor) -> torch.Tensor:
    """Per-pixel mean over channels; (N,C,H,W) -> (N,H,W)."""
    return z.mean(dim=1)


def feature_dropout(z: torch.Tensor, gamma: float, gen: torch.Generator | None = None) -> torch.Tensor:
    """Zero all channels at pixels whose attention reaches gamma * max(attention).

    The threshold is per batch item. gamma = 0 is the explicit off switch
    (all-ones mask); otherwise gamma must lie in (0, 1].
    """
    if gamma == 0.0:
        return z
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1] (or exactly 0 to disable)")
    att = z.mean(dim=1, keepdim=True)
    t = gamma * att.amax(dim=(2, 3), keepdim=True)
    keep = (att < t).to(z.dtype)
    return z * keep


class StudentNet(nn.Module):
    """U-Net encoder with main, feature-noise, and feature-dropout decoders."""

    def __init__(self, spec: StudentSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec.unet)
        self.decoder_main = Decoder(spec.unet)
        self.decoder_noise = Decoder(spec.unet)
        self.decoder_dropout = Decoder(spec.unet)

    def forward(
        self,
        x,
        noise_gen: torch.Generator | None = None,
        dropout_gen: torch.Generator | None = None,
        noise_sigma: float | None = None,
        dropout_gamma: float | None = None,
        aux: bool = True,
    ):
        """Returns (z, y_main, y_noise, y_dropout); aux outputs are None when
        aux=False (unlabeled passes use the main decoder only)."""
        _check_input_dims(x, self.spec.unet.depth)
        feats = self.encoder(x)
        z = feats[-1]
        y_main = self.decoder_main(feats)
        if not aux:
            return z, y_main, None, None
        sigma = self.spec.noise_sigma if noise_sigma is None else noise_sigma
        if dropout_gamma is None:
            lo, hi = self.spec.dropout_gamma
            if hi <= 0.0:
                gamma = 0.0
            else:
                u = torch.rand((), generator=dropout_gen).item()
                gamma = lo + (hi - lo) * u
        else:
            gamma = dropout_gamma

        def perturb(fs, fn):
            if self.spec.perturb_skip_connections:
                return [fn(f) for f in fs]
            return fs[:-1] + [fn(fs[-1])]

        y_noise = self.decoder_noise(perturb(feats, lambda f: feature_noise(f, sigma, noise_gen)))
        y_drop = self.decoder_dropout(perturb(feats, lambda f: feature_dropout(f, gamma, dropout_gen)))
        return z, y_main, y_noise, y_drop

    def tie_aux_decoders_(self):
        """Copy the main decoder's parameters into both auxiliary decoders."""
        self.decoder_noise.load_state_dict(self.decoder_main.state_dict())
        self.decoder_dropout.load_state_dict(self.decoder_main.state_dict())


class TeacherNet(nn.Module):
    """U-Net congruent with the student's (encoder + main decoder), with
    dropout sites for stochastic sampling."""

    def __init__(self, spec: TeacherSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec.unet)
        self.decoder = Decoder(spec.unet, mc=spec)

    def forward(self, x, stochastic: bool = False, gen: torch.Generator | None = None):
        """Returns (z, prob map). stochastic=True activates the dropout sites."""
        _check_input_dims(x, self.spec.unet.depth)
        feats = self.encoder(x)
        return feats[-1], self.decoder(feats, stochastic=stochastic, gen=gen)


class Discriminator(nn.Module):
    """Patch-output domain classifier: three stride-2 convs with doubling
    filters, BatchNorm, LeakyReLU, then a sigmoid map at 1/8 resolution."""

    def __init__(self, in_channels: int, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        layers = []
        ch = in_channels
        filters = spec.base_filters
        for _ in range(spec.conv_layers):
            layers += [
                nn.Conv2d(ch, filters, 4, stride=2, padding=1),
                nn.BatchNorm2d(filters, track_running_stats=False),
                nn.LeakyReLU(spec.leaky_slope, inplace=True),
            ]
            ch = filters
            filters *= 2
        layers.append(nn.Conv2d(ch, 1, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        h, w = z.shape[-2], z.shape[-1]
        div = 2**self.spec.conv_layers
        if h < div or w < div or h % div or w % div:
            raise BadInputDims(f"discriminator input {h}x{w} must be a multiple of {div}")
        return torch.sigmoid(self.net(z))


def collate_images(images: list) -> torch.Tensor:
    """List of HxWxC float arrays -> (N,C,H,W) float32 tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


def collate_masks(masks: list) -> torch.Tensor:
    """List of HxW arrays -> (N,1,H,W) float32 tensor."""
    arr = np.stack([np.asarray(m, dtype=np.float32) for m in masks])
    return torch.from_numpy(arr).unsqueeze(1).contiguous()
