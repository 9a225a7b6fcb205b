"""Main encoder: contour features fused with identity features by per-site modulation.

Each bottleneck owns a pair of fully-convolutional heads that turn the
identity feature of its block's pyramid level into spatial ``gamma``/``beta``
tensors; the bottleneck's intermediate activation is then ``gamma * h + beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AblationFlags, ScaleProfile

__all__ = [
    "LatentBundle",
    "ModulationParams",
    "ifm_apply",
    "ModulationHead",
    "IFBottleneck",
    "IFBlock",
    "MainEncoder",
]


@dataclass
class LatentBundle:
    style: torch.Tensor  # (B, style_layer_count, style_dim)
    input_latent: torch.Tensor  # (B, channels, s, s)

    def detach(self) -> LatentBundle:
        return LatentBundle(self.style.detach(), self.input_latent.detach())


@dataclass
class ModulationParams:
    gamma: torch.Tensor
    beta: torch.Tensor


def ifm_apply(h: torch.Tensor, params: ModulationParams) -> torch.Tensor:
    if params.gamma.shape != h.shape or params.beta.shape != h.shape:
        raise ValueError(
            f"modulation shapes {tuple(params.gamma.shape)}/{tuple(params.beta.shape)} "
            f"do not match feature map {tuple(h.shape)}"
        )
    return params.gamma * h + params.beta


class ModulationHead(nn.Module):
    """Two 3x3-conv FCNs mapping an identity feature to (gamma, beta).

    First-layer biases start at 0 and final biases at 1 (gamma) / 0 (beta), so
    a zero identity feature gives the identity transform.
    """

    def __init__(self, id_ch: int, out_ch: int, hidden: int):
        super().__init__()
        self.gamma = self._fcn(id_ch, out_ch, hidden, bias=1.0)
        self.beta = self._fcn(id_ch, out_ch, hidden, bias=0.0)

    @staticmethod
    def _fcn(id_ch, out_ch, hidden, bias):
        first = nn.Conv2d(id_ch, hidden, 3, 1, 1)
        last = nn.Conv2d(hidden, out_ch, 3, 1, 1)
        nn.init.zeros_(first.bias)
        nn.init.constant_(last.bias, bias)
        with torch.no_grad():
            last.weight.mul_(0.5)
        return nn.Sequential(first, nn.LeakyReLU(0.2), last)

    def forward(self, f_id: torch.Tensor, target_shape) -> ModulationParams:
        size = tuple(target_shape[-2:])
        if f_id.shape[-2:] != size:
            f_id = F.interpolate(f_id, size=size, mode="bilinear", align_corners=False)
        return ModulationParams(self.gamma(f_id), self.beta(f_id))


class IFBottleneck(nn.Module):
    """Residual bottleneck whose inner activation is identity-modulated.

    With ``use_ifm=False`` it is a plain residual bottleneck and ignores the
    identity feature.
    """

    def __init__(self, in_ch: int, out_ch: int, id_ch: int, stride: int = 1, use_ifm: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2)
        self.shortcut = (
            nn.Identity() if stride == 1 and in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1, stride)
        )
        self.in_ch = in_ch
        self.use_ifm = use_ifm
        self.modulation = ModulationHead(id_ch, out_ch, max(16, out_ch // 4)) if use_ifm else None

    def forward(self, h: torch.Tensor, f_id: torch.Tensor | None = None) -> torch.Tensor:
        if h.dim() != 4 or h.shape[1] != self.in_ch:
            raise ValueError(f"bottleneck expects {self.in_ch} channels, got {tuple(h.shape)}")
        x = self.conv1(h)
        if self.use_ifm:
            if f_id is None:
                raise ValueError("identity feature required when modulation is enabled")
            x = ifm_apply(x, self.modulation(f_id, x.shape))
        x = self.conv2(self.act(x))
        return self.act(x + self.shortcut(h))


class IFBlock(nn.Module):
    """Encoder stage; every bottleneck sees the same pyramid level."""

    def __init__(self, in_ch: int, out_ch: int, id_ch: int, n_bottlenecks: int = 2, use_ifm: bool = True):
        super().__init__()
        self.bottlenecks = nn.ModuleList(
            IFBottleneck(in_ch if j == 0 else out_ch, out_ch, id_ch, 2 if j == 0 else 1, use_ifm)
            for j in range(n_bottlenecks)
        )

    def compute_modulation(self, f_id: torch.Tensor, j: int, target_shape) -> ModulationParams:
        if not 0 <= j < len(self.bottlenecks):
            raise IndexError(f"bottleneck index {j} out of range 0..{len(self.bottlenecks) - 1}")
        head = self.bottlenecks[j].modulation
        if head is None:
            raise ValueError("modulation disabled (use_ifblock=false)")
        return head(f_id, target_shape)

    def forward(self, h, f_id=None):
        for b in self.bottlenecks:
            h = b(h, f_id)
        return h


class MainEncoder(nn.Module):
    """Maps (contour, feedback image, identity pyramid) to a LatentBundle.

    The style head pools the final map and applies one linear map per
    generator layer; predictions are offsets from the average style code.
    The input-latent head is a 3x3 conv on the final map, added to a learned
    constant. With ``use_input_latent=False`` only that constant is emitted.
    """

    def __init__(
        self,
        profile: ScaleProfile,
        contour_channels: int,
        flags: AblationFlags = AblationFlags(),
        n_bottlenecks: int = 2,
    ):
        super().__init__()
        self.profile = profile
        self.flags = flags
        self.contour_channels = contour_channels
        widths = profile.main_encoder_widths
        id_widths = profile.encoder_widths
        n = profile.encoder_block_count
        res = profile.contour_input_resolution
        s = profile.input_latent_spatial
        head_stride = res // (s * 2**n)
        if head_stride < 1 or head_stride * s * 2**n != res:
            raise ValueError(f"cannot reduce {res}px input to {s}px with {n} halving blocks")
        layers: list[nn.Module] = []
        ch = contour_channels + 3
        for _ in range(int(math.log2(head_stride))):
            layers += [nn.Conv2d(ch, widths[0], 3, 2, 1), nn.LeakyReLU(0.2)]
            ch = widths[0]
        layers += [nn.Conv2d(ch, widths[0], 3, 1, 1), nn.LeakyReLU(0.2)]
        self.head = nn.Sequential(*layers)
        chans = [widths[0], *widths]
        self.blocks = nn.ModuleList(
            IFBlock(chans[i], chans[i + 1], id_widths[i], n_bottlenecks, flags.use_ifblock) for i in range(n)
        )
        self.style_heads = nn.ModuleList(
            nn.Linear(widths[-1], profile.style_dim) for _ in range(profile.style_layer_count)
        )
        for lin in self.style_heads:
            nn.init.zeros_(lin.bias)
            with torch.no_grad():
                lin.weight.mul_(0.1)
        # zero init: the latent starts at the generator's own constant input
        self.latent_head = nn.Conv2d(widths[-1], profile.input_latent_channels, 3, 1, 1)
        nn.init.zeros_(self.latent_head.weight)
        nn.init.zeros_(self.latent_head.bias)
        self.register_buffer("w_avg", torch.zeros(profile.style_dim))
        self.latent_const = nn.Parameter(
            torch.zeros(profile.input_latent_channels, s, s)
        )

    def set_anchors(self, w_avg: torch.Tensor, const: torch.Tensor) -> None:
        """Start predictions from the generator's average code and constant input."""
        with torch.no_grad():
            self.w_avg.copy_(w_avg)
            self.latent_const.copy_(const)

    def compute_modulation(self, pyramid, i: int, j: int, target_shape) -> ModulationParams:
        if not 0 <= i < len(self.blocks):
            raise IndexError(f"pyramid level {i} out of range 0..{len(self.blocks) - 1}")
        return self.blocks[i].compute_modulation(pyramid[i], j, target_shape)

    def forward(self, contour: torch.Tensor, feedback: torch.Tensor, pyramid=None) -> LatentBundle:
        res = self.profile.contour_input_resolution
        for name, t, ch in (("contour", contour, self.contour_channels), ("feedback", feedback, 3)):
            if t.dim() != 4 or t.shape[1] != ch or t.shape[-2:] != (res, res):
                raise ValueError(f"{name} must be (B,{ch},{res},{res}), got {tuple(t.shape)}")
        if self.flags.use_ifblock and (pyramid is None or len(pyramid) != len(self.blocks)):
            raise ValueError(f"need an identity pyramid with {len(self.blocks)} levels")
        h = self.head(torch.cat([contour, feedback], dim=1))
        for i, block in enumerate(self.blocks):
            h = block(h, pyramid[i] if self.flags.use_ifblock else None)
        pooled = h.mean(dim=(2, 3))
        style = torch.stack([lin(pooled) for lin in self.style_heads], dim=1) + self.w_avg
        const = self.latent_const.expand(h.shape[0], -1, -1, -1)
        if self.flags.use_input_latent:
            latent = const + self.latent_head(h)
        else:
            latent = const
        return LatentBundle(style, latent)

    encode = forward
