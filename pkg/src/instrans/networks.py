"""Set-conditioned generators and discriminators.

Each network encodes an image together with a *set* of single-channel
instance masks.  Per-instance features are summed into a set feature, which
makes the image branch invariant to the order of the masks; every mask
output additionally sees its own feature, which makes the mask branch
equivariant.

Masks enter the networks in network range ([-1, 1]) with shape
``[N, 1, H, W]``.  Images are ``[3, H, W]``.  All forwards process one sample;
the instance axis is used as the batch axis of the per-mask sub-networks.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
from torch import Tensor
from torch.nn.utils.parametrizations import spectral_norm


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 64
    n_res_blocks: int = 9
    n_downsample: int = 2
    discriminator_layers: int = 5
    use_instance_norm: bool = True
    use_spectral_norm_D: bool = True
    mask_capacity: int = 4

    def __post_init__(self):
        if self.n_res_blocks < 1:
            raise ValueError("n_res_blocks must be >= 1")
        if self.n_downsample < 1:
            raise ValueError("n_downsample must be >= 1")
        if self.discriminator_layers < 3:
            raise ValueError("discriminator_layers must be >= 3 (>= 1 extractor layer + 2 head layers)")
        if self.base_channels < 1 or self.mask_capacity < 1:
            raise ValueError("base_channels and mask_capacity must be positive")

    @property
    def extractor_layers(self) -> int:
        return self.discriminator_layers - 2

    @property
    def encoder_channels(self) -> int:
        return self.base_channels * 2 ** self.n_downsample

    @property
    def extractor_channels(self) -> int:
        return self.base_channels * 2 ** (self.extractor_layers - 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _norm(channels: int, enabled: bool) -> nn.Module:
    return nn.InstanceNorm2d(channels) if enabled else nn.Identity()


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, use_norm: bool = True):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            _norm(channels, use_norm),
            nn.ReLU(True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3),
            _norm(channels, use_norm),
        )

    def forward(self, x):
        return x + self.block(x)


class Encoder(nn.Module):
    """Downsampling blocks followed by residual blocks."""

    def __init__(self, in_channels: int, config: NetConfig):
        super().__init__()
        ch = config.base_channels
        norm = config.use_instance_norm
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(in_channels, ch, 7), _norm(ch, norm), nn.ReLU(True)]
        for _ in range(config.n_downsample):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1), _norm(ch * 2, norm), nn.ReLU(True)]
            ch *= 2
        layers += [ResidualBlock(ch, norm) for _ in range(config.n_res_blocks)]
        self.model = nn.Sequential(*layers)
        self.out_channels = ch

    def forward(self, x):
        return self.model(x)


class Decoder(nn.Module):
    """Upsampling blocks and a tanh output layer."""

    def __init__(self, in_channels: int, out_channels: int, config: NetConfig):
        super().__init__()
        norm = config.use_instance_norm
        ch = config.encoder_channels
        layers = []
        prev = in_channels
        for _ in range(config.n_downsample):
            ch //= 2
            layers += [
                nn.ConvTranspose2d(prev, ch, 3, stride=2, padding=1, output_padding=1),
                _norm(ch, norm),
                nn.ReLU(True),
            ]
            prev = ch
        layers += [nn.ReflectionPad2d(3), nn.Conv2d(prev, out_channels, 7), nn.Tanh()]
        self.model = nn.Sequential(*layers)
        self.in_channels = in_channels

    def forward(self, x):
        return self.model(x)


class PatchExtractor(nn.Module):
    """The stride-2 front of a PatchGAN discriminator."""

    def __init__(self, in_channels: int, config: NetConfig):
        super().__init__()
        ch = config.base_channels
        layers = [nn.Conv2d(in_channels, ch, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        for _ in range(config.extractor_layers - 1):
            layers += [
                nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
                _norm(ch * 2, config.use_instance_norm),
                nn.LeakyReLU(0.2, True),
            ]
            ch *= 2
        self.model = nn.Sequential(*layers)
        self.out_channels = ch

    def forward(self, x):
        return self.model(x)


class PatchHead(nn.Module):
    def __init__(self, in_channels: int, config: NetConfig):
        super().__init__()
        self.model = nn.Sequential(
            nn.Conv2d(in_channels, in_channels, 4, stride=1, padding=1),
            _norm(in_channels, config.use_instance_norm),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(in_channels, 1, 4, stride=1, padding=1),
        )
        self.in_channels = in_channels

    def forward(self, x):
        return self.model(x)


def aggregate_set_feature(features: Tensor, valid: Optional[Tensor] = None) -> Tensor:
    """Sum per-instance features ``[N, ...]`` over the valid slots.

    Padding slots are dropped before the sum, so they contribute exactly zero
    whatever their feature values are.  Returns a tensor shaped ``[1, ...]``.
    """
    if valid is not None:
        features = features[valid.to(torch.bool)]
    if features.shape[0] == 0:
        raise ValueError("set feature needs at least one valid instance")
    return features.sum(dim=0, keepdim=True)


def _select_valid(masks: Tensor, valid: Optional[Tensor]) -> Tuple[Tensor, Optional[Tensor]]:
    if masks.dim() != 4 or masks.shape[1] != 1:
        raise ValueError(f"masks must be shaped [N, 1, H, W], got {tuple(masks.shape)}")
    if valid is None:
        idx = None
    else:
        valid = valid.to(torch.bool)
        if valid.shape != (masks.shape[0],):
            raise ValueError("validity flags must have one entry per mask slot")
        idx = valid.nonzero().flatten()
        masks = masks[idx]
    if masks.shape[0] == 0:
        raise ValueError("at least one valid instance mask is required")
    return masks, idx


def _check_image(image: Tensor, masks: Tensor, multiple: int):
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValueError(f"image must be shaped [3, H, W], got {tuple(image.shape)}")
    if image.shape[1:] != masks.shape[2:]:
        raise ValueError("image and masks must share H x W")
    h, w = image.shape[1:]
    if h % multiple or w % multiple:
        raise ValueError(f"H and W must be divisible by {multiple}, got {h}x{w}")


class SetGenerator(nn.Module):
    """Translates an (image, mask set) pair.

    ``f_x``/``f_a`` encode the image and each mask; ``g_x`` decodes
    ``[f_x(x); sum_i f_a(a_i)]`` and ``g_a`` decodes
    ``[f_x(x); sum_i f_a(a_i); f_a(a_n)]`` once per mask.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.f_x = Encoder(3, config)
        self.f_a = Encoder(1, config)
        c = self.f_x.out_channels
        self.g_x = Decoder(2 * c, 3, config)
        self.g_a = Decoder(3 * c, 1, config)

    def forward(self, image: Tensor, masks: Tensor, valid: Optional[Tensor] = None) -> Tuple[Tensor, Tensor]:
        selected, idx = _select_valid(masks, valid)
        _check_image(image, masks, 2 ** self.config.n_downsample)
        feat_x = self.f_x(image.unsqueeze(0))
        feat_a = self.f_a(selected)
        feat_set = aggregate_set_feature(feat_a)
        out_image = self.g_x(torch.cat([feat_x, feat_set], dim=1))[0]
        n = feat_a.shape[0]
        h_a = torch.cat([feat_x.expand(n, -1, -1, -1), feat_set.expand(n, -1, -1, -1), feat_a], dim=1)
        out_masks = self.g_a(h_a)
        if idx is not None:
            # padding slots stay all-background
            full = torch.full_like(masks, -1.0)
            out_masks = full.index_copy(0, idx, out_masks)
        return out_image, out_masks


class SetDiscriminator(nn.Module):
    """PatchGAN discriminator over ``[f_dx(x); sum_i f_da(a_i)]``."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        self.f_x = PatchExtractor(3, config)
        self.f_a = PatchExtractor(1, config)
        self.g_x = PatchHead(2 * self.f_x.out_channels, config)

    def forward(self, image: Tensor, masks: Tensor, valid: Optional[Tensor] = None) -> Tensor:
        selected, _ = _select_valid(masks, valid)
        _check_image(image, masks, 1)
        feat_x = self.f_x(image.unsqueeze(0))
        feat_set = aggregate_set_feature(self.f_a(selected))
        return self.g_x(torch.cat([feat_x, feat_set], dim=1))[0]


class NetworkBundle(nn.Module):
    """Both generators and both discriminators.

    ``G_XY`` maps domain X to Y and is judged by ``D_Y``; ``G_YX`` the reverse.
    Conv weights are drawn from N(0, 0.02) using ``seed``; spectral norm is
    attached to the discriminator convs afterwards so its power-iteration
    vectors match the initial weights.
    """

    def __init__(self, config: NetConfig, seed: int = 0):
        super().__init__()
        self.config = config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.G_XY = SetGenerator(config)
            self.G_YX = SetGenerator(config)
            self.D_X = SetDiscriminator(config)
            self.D_Y = SetDiscriminator(config)
            gen = torch.Generator().manual_seed(seed)
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                    nn.init.normal_(m.weight, 0.0, 0.02, generator=gen)
                    nn.init.zeros_(m.bias)
            if config.use_spectral_norm_D:
                _apply_spectral_norm(self.D_X)
                _apply_spectral_norm(self.D_Y)

    def generators(self):
        return self.G_XY, self.G_YX

    def discriminators(self):
        return self.D_X, self.D_Y

    def generator_parameters(self):
        return list(self.G_XY.parameters()) + list(self.G_YX.parameters())

    def discriminator_parameters(self):
        return list(self.D_X.parameters()) + list(self.D_Y.parameters())


def _apply_spectral_norm(module: nn.Module):
    for parent in list(module.modules()):
        for name, child in list(parent.named_children()):
            if isinstance(child, nn.Conv2d):
                setattr(parent, name, spectral_norm(child))


def init_networks(config: NetConfig, seed: int, dtype: torch.dtype = torch.float32) -> NetworkBundle:
    """Build all four networks, deterministic in ``seed``."""
    return NetworkBundle(config, seed).to(dtype)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
