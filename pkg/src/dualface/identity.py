"""Identity encoder (feature pyramid) and the frozen stand-in face embedder."""

from __future__ import annotations

import logging
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ScaleProfile

logger = logging.getLogger(__name__)

__all__ = [
    "ResidualBlock",
    "Backbone",
    "IdentityEncoder",
    "IdentityEmbedder",
    "train_embedder",
    "cosine_similarity",
]


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1)
        self.act = nn.LeakyReLU(0.2)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        h = self.conv2(self.act(self.conv1(x)))
        return self.act(h + self.shortcut(x))


class Backbone(nn.Module):
    """Stride-4 stem followed by one residual stage per pyramid level.

    The first stage keeps resolution, each later stage halves it, so a
    64x64 input yields levels of 16, 8, 4 and 2 pixels.
    """

    def __init__(self, widths: Sequence[int], in_ch: int = 3):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_ch, widths[0], 3, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(widths[0], widths[0], 3, 2, 1),
            nn.LeakyReLU(0.2),
        )
        chans = [widths[0], *widths]
        self.stages = nn.ModuleList(
            ResidualBlock(chans[i], chans[i + 1], 1 if i == 0 else 2) for i in range(len(widths))
        )

    def forward(self, x) -> list[torch.Tensor]:
        h = self.stem(x)
        levels = []
        for stage in self.stages:
            h = stage(h)
            levels.append(h)
        return levels


class IdentityEncoder(nn.Module):
    """Extracts the multi-level identity feature pyramid from an identity image."""

    def __init__(self, profile: ScaleProfile):
        super().__init__()
        self.profile = profile
        self.backbone = Backbone(profile.encoder_widths)
        self.pretrained_loaded = False

    def forward(self, x_id: torch.Tensor) -> list[torch.Tensor]:
        res = self.profile.contour_input_resolution
        if x_id.dim() != 4 or x_id.shape[-2:] != (res, res):
            raise ValueError(f"identity image must be (B,3,{res},{res}), got {tuple(x_id.shape)}")
        return self.backbone(x_id)

    encode_identity = forward

    def load_pretrained(self, weights: Mapping[str, torch.Tensor]) -> None:
        """Copy backbone parameters from a recognition model's parameter container.

        Keys may carry a ``backbone.`` prefix; anything under ``head.`` or
        ``classifier.`` is ignored. Missing, unexpected or mis-shaped entries
        raise a ``ValueError`` listing each offender.
        """
        own = self.backbone.state_dict()
        incoming = {}
        for key, value in weights.items():
            if key.startswith(("head.", "classifier.")):
                continue
            incoming[key.removeprefix("backbone.")] = value
        problems = [f"unexpected parameter {k!r}" for k in incoming if k not in own]
        problems += [f"missing parameter {k!r}" for k in own if k not in incoming]
        problems += [
            f"shape mismatch for {k!r}: expected {tuple(own[k].shape)}, got {tuple(v.shape)}"
            for k, v in incoming.items()
            if k in own and v.shape != own[k].shape
        ]
        if problems:
            raise ValueError("cannot load pretrained identity weights:\n  " + "\n  ".join(problems))
        self.backbone.load_state_dict(incoming)
        self.pretrained_loaded = True


class IdentityEmbedder(nn.Module):
    """Small recognition network; the pre-classifier layer is the identity embedding.

    Shares the identity encoder's backbone layout so its trained weights can
    initialize that encoder.
    """

    def __init__(self, profile: ScaleProfile, num_classes: int):
        super().__init__()
        self.profile = profile
        self.backbone = Backbone(profile.encoder_widths)
        self.head = nn.Linear(profile.encoder_widths[-1], profile.embedding_dim)
        self.classifier = nn.Linear(profile.embedding_dim, num_classes)

    def _check(self, x):
        res = self.profile.loss_resolution
        if x.dim() != 4 or x.shape[-2:] != (res, res):
            raise ValueError(f"embedder input must be (B,3,{res},{res}), got {tuple(x.shape)}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x)
        feat = self.backbone(x)[-1].mean(dim=(2, 3))
        return self.head(feat)

    embed = forward

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(F.leaky_relu(self.forward(x), 0.2))

    def freeze(self) -> IdentityEmbedder:
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(-1) / (a.norm(dim=-1) * b.norm(dim=-1))


def train_embedder(
    profile: ScaleProfile,
    images: torch.Tensor,
    labels: torch.Tensor,
    steps: int,
    seed: int = 0,
    batch_size: int = 32,
    lr: float = 1e-3,
) -> IdentityEmbedder:
    """Train the stand-in embedder as an identity classifier, then freeze it.

    Light brightness/shift jitter keeps the embedding from keying on exact pixels.
    """
    gen = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    num_classes = int(labels.max()) + 1
    model = IdentityEmbedder(profile, num_classes)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = images.shape[0]
    for step in range(steps):
        idx = torch.randint(n, (min(batch_size, n),), generator=gen)
        x = images[idx]
        gain = 1 + 0.1 * (torch.rand(x.shape[0], 1, 1, 1, generator=gen) - 0.5)
        shift = torch.randint(-2, 3, (2,), generator=gen)
        x = torch.roll(x * gain, shifts=(int(shift[0]), int(shift[1])), dims=(2, 3)).clamp(0, 1)
        loss = F.cross_entropy(model.logits(x), labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            logger.info("embedder step %d  ce=%.4f", step, loss.item())
    return model.freeze()
