"""Toy style-based generator that stays frozen while the encoders train.

Synthesis starts from a 4x4 input tensor (the input latent, or the learned
constant) and doubles resolution per level. Every convolution is followed by
AdaIN modulation from its own style row; RGB outputs of all levels are
upsampled and summed. Style rows are consumed as

    level 0:  conv -> row 0, to_rgb -> row 1
    level k:  up-conv -> row 2k-1, conv -> row 2k, to_rgb -> row 2k+1

giving ``2*log2(resolution) - 2`` rows in total.
"""

from __future__ import annotations

import hashlib
import logging
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ScaleProfile
from .encoder import LatentBundle

logger = logging.getLogger(__name__)

__all__ = [
    "MappingNetwork",
    "StyledConv",
    "ToRGB",
    "StyleGenerator",
    "pretrain_toy",
    "parameter_hash",
]


def parameter_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class MappingNetwork(nn.Module):
    def __init__(self, dim: int, n_layers: int = 4):
        super().__init__()
        layers = []
        for _ in range(n_layers):
            layers += [nn.Linear(dim, dim), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        z = z * torch.rsqrt(z.pow(2).mean(dim=1, keepdim=True) + 1e-8)
        return self.net(z)


class StyledConv(nn.Module):
    def __init__(self, in_ch, out_ch, style_dim, resolution, upsample=False, noise_seed=0):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(in_ch, out_ch, 3, 1, 1)
        self.affine = nn.Linear(style_dim, 2 * out_ch)
        nn.init.zeros_(self.affine.bias)
        with torch.no_grad():
            self.affine.bias[:out_ch] = 1.0
            self.affine.weight.mul_(0.25)
        gen = torch.Generator().manual_seed(noise_seed)
        self.register_buffer("noise", torch.randn(1, 1, resolution, resolution, generator=gen))
        self.noise_strength = nn.Parameter(torch.zeros(1))
        self.out_ch = out_ch

    def forward(self, x, w):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = self.conv(x) + self.noise_strength * self.noise
        x = F.instance_norm(F.leaky_relu(x, 0.2))
        scale, shift = self.affine(w).unsqueeze(-1).unsqueeze(-1).split(self.out_ch, dim=1)
        return scale * x + shift


class ToRGB(nn.Module):
    def __init__(self, in_ch, style_dim):
        super().__init__()
        self.affine = nn.Linear(style_dim, in_ch)
        nn.init.ones_(self.affine.bias)
        with torch.no_grad():
            self.affine.weight.mul_(0.25)
        self.conv = nn.Conv2d(in_ch, 3, 1)

    def forward(self, x, w):
        return self.conv(x * self.affine(w).unsqueeze(-1).unsqueeze(-1))


class StyleGenerator(nn.Module):
    def __init__(self, profile: ScaleProfile, mapping_layers: int = 4):
        super().__init__()
        chans = profile.generator_channels
        if profile.input_latent_channels != chans[0]:
            raise ValueError("input_latent_channels must equal the 4x4 synthesis width")
        d = profile.style_dim
        self.profile = profile
        self.mapping = MappingNetwork(d, mapping_layers)
        s = profile.input_latent_spatial
        self.const = nn.Parameter(torch.randn(chans[0], s, s))
        self.convs = nn.ModuleList([StyledConv(chans[0], chans[0], d, s, noise_seed=0)])
        self.to_rgbs = nn.ModuleList([ToRGB(chans[0], d)])
        for level in range(1, profile.num_levels):
            res = s * 2**level
            self.convs.append(StyledConv(chans[level - 1], chans[level], d, res, True, 2 * level - 1))
            self.convs.append(StyledConv(chans[level], chans[level], d, res, False, 2 * level))
            self.to_rgbs.append(ToRGB(chans[level], d))
        self.register_buffer("w_avg", torch.zeros(d))
        self.frozen = False
        self._avg_image = None

    # -- synthesis ----------------------------------------------------------

    def synthesize(self, bundle: LatentBundle, max_level: int | None = None) -> torch.Tensor:
        """Render a bundle to images in [0, 1].

        ``max_level`` truncates generation after that level (for inspecting
        which style rows affect which resolutions).
        """
        style, latent = bundle.style, bundle.input_latent
        (n_rows, d), lat_shape = self.profile.latent_shapes
        if style.dim() != 3 or style.shape[1:] != (n_rows, d):
            raise ValueError(f"style code must be (B,{n_rows},{d}), got {tuple(style.shape)}")
        if latent.dim() != 4 or latent.shape[1:] != lat_shape:
            raise ValueError(f"input latent must be (B,{lat_shape}), got {tuple(latent.shape)}")
        last = self.profile.num_levels - 1 if max_level is None else max_level
        x = self.convs[0](latent, style[:, 0])
        rgb = self.to_rgbs[0](x, style[:, 1])
        for level in range(1, last + 1):
            x = self.convs[2 * level - 1](x, style[:, 2 * level - 1])
            x = self.convs[2 * level](x, style[:, 2 * level])
            rgb = F.interpolate(rgb, scale_factor=2, mode="bilinear", align_corners=False)
            rgb = rgb + self.to_rgbs[level](x, style[:, 2 * level + 1])
        return ((rgb + 1) / 2).clamp(0, 1)

    forward = synthesize

    def constant_bundle(self, w: torch.Tensor) -> LatentBundle:
        """Bundle with every style row equal to ``w`` (B, D) and the constant input."""
        n_rows = self.profile.style_layer_count
        latent = self.const.expand(w.shape[0], -1, -1, -1)
        return LatentBundle(w.unsqueeze(1).expand(-1, n_rows, -1), latent)

    def sample(self, n: int, seed: int = 0) -> torch.Tensor:
        gen = torch.Generator().manual_seed(seed)
        z = torch.randn(n, self.profile.style_dim, generator=gen)
        with torch.no_grad():
            return self.synthesize(self.constant_bundle(self.mapping(z)))

    # -- average code / image ----------------------------------------------

    @torch.no_grad()
    def average_code(self, samples: int = 10_000, seed: int = 0, chunk: int = 4096) -> torch.Tensor:
        if samples < 1:
            raise ValueError("samples must be >= 1")
        gen = torch.Generator().manual_seed(seed)
        total = torch.zeros(self.profile.style_dim, dtype=torch.float64)
        done = 0
        while done < samples:
            n = min(chunk, samples - done)
            z = torch.randn(n, self.profile.style_dim, generator=gen)
            total += self.mapping(z).double().sum(dim=0)
            done += n
        return (total / samples).float()

    def set_average_code(self, w_avg: torch.Tensor) -> None:
        with torch.no_grad():
            self.w_avg.copy_(w_avg)
        self._avg_image = None

    @torch.no_grad()
    def average_image(self) -> torch.Tensor:
        """Image of the average code with the constant input; cached."""
        if self._avg_image is None:
            self._avg_image = self.synthesize(self.constant_bundle(self.w_avg.unsqueeze(0)))[0]
        return self._avg_image

    # -- parameter handling -------------------------------------------------

    def freeze(self) -> StyleGenerator:
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        return self

    def set_parameters(self, container: Mapping[str, torch.Tensor]) -> None:
        """Injection point for externally converted weights (same names and shapes)."""
        self.load_state_dict(dict(container), strict=True)
        self._avg_image = None

    def train(self, mode: bool = True):
        # a frozen generator never re-enters training mode
        return super().train(mode and not getattr(self, "frozen", False))


def pretrain_toy(
    profile: ScaleProfile,
    images: torch.Tensor,
    steps: int,
    seed: int = 0,
    batch_size: int = 16,
    lr: float = 2e-3,
    avg_samples: int = 10_000,
) -> StyleGenerator:
    """Reconstruction pretraining with per-image learned codes, then freeze.

    Each training image owns a latent ``z`` optimized jointly with the
    network; codes are kept on the sphere the mapping network's input
    normalization projects onto, so random draws land among them.
    """
    torch.manual_seed(seed)
    gen_rng = torch.Generator().manual_seed(seed)
    g = StyleGenerator(profile)
    n, d = images.shape[0], profile.style_dim
    target = F.interpolate(images, size=profile.generator_resolution, mode="bilinear", antialias=True)
    z = nn.Parameter(torch.randn(n, d, generator=gen_rng))
    opt = torch.optim.Adam([{"params": g.parameters()}, {"params": [z], "lr": 10 * lr}], lr=lr, betas=(0.5, 0.99))
    for step in range(steps):
        idx = torch.randint(n, (min(batch_size, n),), generator=gen_rng)
        out = g.synthesize(g.constant_bundle(g.mapping(z[idx])))
        loss = F.mse_loss(out, target[idx]) + 0.1 * (out - target[idx]).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            z.mul_(np.sqrt(d) / z.norm(dim=1, keepdim=True))
        if step % 100 == 0:
            logger.info("generator step %d  rec=%.5f", step, loss.item())
    g.set_average_code(g.average_code(avg_samples, seed))
    return g.freeze()
