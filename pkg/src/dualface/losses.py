"""Reconstruction, perceptual, identity and W-normalization losses.

All image losses expect inputs already resized to the profile's loss
resolution. Norm-based terms are divided by the square root of the element
count unless ``normalized=False`` (the raw Euclidean norm). Batched inputs are
reduced per sample, then averaged over the batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .identity import cosine_similarity

__all__ = [
    "LossReport",
    "PerceptualExtractor",
    "l2_loss",
    "perceptual_loss",
    "identity_loss",
    "wnorm_loss",
    "total_loss",
    "LossLogger",
]

CSV_FIELDS = ("step", "l2", "perceptual", "identity", "wnorm", "total")


def _per_sample_norm(diff: torch.Tensor, normalized: bool) -> torch.Tensor:
    flat = diff.reshape(diff.shape[0], -1)
    norm = torch.linalg.vector_norm(flat, dim=1)
    return norm / flat.shape[1] ** 0.5 if normalized else norm


def _batched(x: torch.Tensor, dims: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == dims else x


def l2_loss(gen: torch.Tensor, gt: torch.Tensor, normalized: bool = True) -> torch.Tensor:
    if gen.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(gen.shape)} vs {tuple(gt.shape)}")
    return _per_sample_norm(_batched(gen - gt, 3), normalized).mean()


class PerceptualExtractor(nn.Module):
    """Fixed random five-layer conv stack with channel-unit-normalized outputs.

    Stands in for a pretrained LPIPS backbone. GELU keeps the distance smooth
    so finite-difference checks behave.
    """

    widths = (16, 32, 32, 64, 64)
    strides = (1, 2, 2, 2, 2)

    def __init__(self, in_ch: int = 3, seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        ch = in_ch
        for w, s in zip(self.widths, self.strides):
            conv = nn.Conv2d(ch, w, 3, s, 1)
            with torch.no_grad():
                conv.weight.normal_(0.0, (2.0 / (9 * ch)) ** 0.5, generator=gen)
                conv.bias.zero_()
            layers.append(conv)
            ch = w
        self.layers = nn.ModuleList(layers)
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        h = x * 2 - 1
        feats = []
        for conv in self.layers:
            h = F.gelu(conv(h))
            feats.append(h / (h.pow(2).sum(dim=1, keepdim=True) + 1e-10).sqrt())
        return feats


def perceptual_loss(
    gen: torch.Tensor, gt: torch.Tensor, extractor: PerceptualExtractor, normalized: bool = True
) -> torch.Tensor:
    if gen.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(gen.shape)} vs {tuple(gt.shape)}")
    gen, gt = _batched(gen, 3), _batched(gt, 3)
    extractor = extractor.to(gen.dtype)
    total = 0.0
    for fa, fb in zip(extractor(gen), extractor(gt)):
        total = total + _per_sample_norm(fa - fb, normalized)
    return total.mean()


def identity_loss(z_id: torch.Tensor, z_gen: torch.Tensor) -> torch.Tensor:
    """One minus cosine similarity, in [0, 2]."""
    if z_id.shape != z_gen.shape:
        raise ValueError(f"shape mismatch: {tuple(z_id.shape)} vs {tuple(z_gen.shape)}")
    z_id, z_gen = _batched(z_id, 1), _batched(z_gen, 1)
    n_id, n_gen = z_id.norm(dim=-1), z_gen.norm(dim=-1)
    if bool((n_id == 0).any() or (n_gen == 0).any()):
        raise ValueError("identity embedding has zero norm")
    cos = cosine_similarity(z_id, z_gen)
    return (1 - cos).clamp(0.0, 2.0).mean()


def wnorm_loss(w: torch.Tensor, w_bar: torch.Tensor, normalized: bool = True) -> torch.Tensor:
    """Distance of a (B, layers, dim) style code from the broadcast average code."""
    w = _batched(w, 2)
    if w_bar.dim() != 1 or w.shape[-1] != w_bar.shape[0]:
        raise ValueError(f"cannot broadcast average code {tuple(w_bar.shape)} over {tuple(w.shape)}")
    return _per_sample_norm(w - w_bar, normalized).mean()


@dataclass
class LossReport:
    l2: torch.Tensor
    perceptual: torch.Tensor
    identity: torch.Tensor
    wnorm: torch.Tensor
    total: torch.Tensor
    lambdas: tuple[float, float, float, float]

    def terms(self) -> tuple[torch.Tensor, ...]:
        return (self.l2, self.perceptual, self.identity, self.wnorm)

    def as_row(self, step: int) -> dict:
        row = {"step": step}
        for name in CSV_FIELDS[1:]:
            row[name] = float(getattr(self, name))
        return row

    def detach(self) -> LossReport:
        return LossReport(*(t.detach() for t in (*self.terms(), self.total)), self.lambdas)


def total_loss(terms: Sequence, lambdas: Sequence[float]) -> LossReport:
    """Weighted sum of (l2, perceptual, identity, wnorm)."""
    if len(terms) != 4 or len(lambdas) != 4:
        raise ValueError("need exactly four terms and four weights")
    terms = [t if torch.is_tensor(t) else torch.tensor(float(t)) for t in terms]
    total = sum(lam * t for lam, t in zip(lambdas, terms))
    return LossReport(*terms, total=total, lambdas=tuple(float(x) for x in lambdas))


class LossLogger:
    """Appends one CSV row per logged step."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("w", newline="") as fh:
            csv.writer(fh).writerow(CSV_FIELDS)

    def log(self, step: int, report: LossReport) -> None:
        row = report.as_row(step)
        with self.path.open("a", newline="") as fh:
            csv.writer(fh).writerow([row["step"]] + [f"{row[k]:.8g}" for k in CSV_FIELDS[1:]])
