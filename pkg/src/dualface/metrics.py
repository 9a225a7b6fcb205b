"""Evaluation metrics: perceptual distance, identity similarity and Frechet distance."""

from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .identity import cosine_similarity
from .losses import PerceptualExtractor, perceptual_loss

__all__ = [
    "MetricsRow",
    "eval_lpips",
    "eval_idsim",
    "eval_fid",
    "frechet_distance",
    "fit_gaussian",
    "psd_sqrt",
    "product_sqrt",
    "report",
    "format_table",
]

SHRINKAGE = 1e-6
# column -> header with direction marker
COLUMNS = {"lpips": "LPIPS↓", "idsim": "IDSIM↑", "fid": "FID↓"}


@dataclass
class MetricsRow:
    tag: str
    n_samples: int
    lpips: float
    idsim: float
    fid: float


def _stack(images) -> torch.Tensor:
    return images if torch.is_tensor(images) else torch.stack(list(images))


@torch.no_grad()
def eval_lpips(generated, ground_truth, extractor: PerceptualExtractor, chunk: int = 64) -> float:
    """Mean per-pair perceptual distance."""
    gen, gt = _stack(generated), _stack(ground_truth)
    if len(gen) == 0:
        raise ValueError("eval_lpips needs at least one pair")
    if gen.shape != gt.shape:
        raise ValueError(f"unaligned pairs: {tuple(gen.shape)} vs {tuple(gt.shape)}")
    total = 0.0
    for s in range(0, len(gen), chunk):
        a, b = gen[s : s + chunk], gt[s : s + chunk]
        total += perceptual_loss(a, b, extractor).item() * len(a)
    return total / len(gen)


@torch.no_grad()
def eval_idsim(generated, identity_images, embedder, chunk: int = 64) -> float:
    """Mean cosine similarity of embeddings of the generated and identity faces."""
    gen, ids = _stack(generated), _stack(identity_images)
    if len(gen) == 0:
        raise ValueError("eval_idsim needs at least one pair")
    if gen.shape != ids.shape:
        raise ValueError(f"unaligned pairs: {tuple(gen.shape)} vs {tuple(ids.shape)}")
    sims = []
    for s in range(0, len(gen), chunk):
        a, b = embedder(gen[s : s + chunk]), embedder(ids[s : s + chunk])
        sims.append(cosine_similarity(a, b))
    return float(torch.cat(sims).double().mean())


def psd_sqrt(m: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; negative eigenvalues clamp to 0."""
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def product_sqrt(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """Principal square root of ``s1 @ s2`` for symmetric positive-definite inputs.

    Uses ``s1^(1/2) (s1^(1/2) s2 s1^(1/2))^(1/2) s1^(-1/2)``, whose inner
    factor is symmetric, so only symmetric eigendecompositions are needed.
    """
    vals, vecs = np.linalg.eigh((s1 + s1.T) / 2)
    vals = np.clip(vals, 0, None)
    root = (vecs * np.sqrt(vals)) @ vecs.T
    inv_root = (vecs / np.sqrt(vals)) @ vecs.T
    return root @ psd_sqrt(root @ s2 @ root) @ inv_root


def fit_gaussian(features: np.ndarray, shrinkage: float = SHRINKAGE) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ValueError("need a (n >= 2, dim) feature matrix")
    mu = feats.mean(axis=0)
    sigma = np.atleast_2d(np.cov(feats, rowvar=False))
    if shrinkage > 0:
        sigma = sigma + shrinkage * np.eye(sigma.shape[0])
    elif np.linalg.matrix_rank(sigma) < sigma.shape[0]:
        raise ValueError(f"degenerate covariance from {len(feats)} samples in {feats.shape[1]} dims")
    return mu, sigma


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), clipped at 0."""
    r1 = psd_sqrt(sigma1)
    cross = np.sqrt(np.clip(np.linalg.eigvalsh(_sym(r1 @ sigma2 @ r1)), 0, None)).sum()
    diff = mu1 - mu2
    d = diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2 * cross
    return float(max(d, 0.0))


def _sym(m):
    return (m + m.T) / 2


def eval_fid(features_a: np.ndarray, features_b: np.ndarray, shrinkage: float = SHRINKAGE) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    The trace term is symmetric in its arguments only up to rounding, so
    both orders are averaged.
    """
    ma, sa = fit_gaussian(features_a, shrinkage)
    mb, sb = fit_gaussian(features_b, shrinkage)
    return 0.5 * (frechet_distance(ma, sa, mb, sb) + frechet_distance(mb, sb, ma, sa))


@torch.no_grad()
def embed_features(images, embedder, chunk: int = 64) -> np.ndarray:
    imgs = _stack(images)
    return torch.cat([embedder(imgs[s : s + chunk]) for s in range(0, len(imgs), chunk)]).double().numpy()


def format_table(rows: Sequence[MetricsRow]) -> str:
    headers = ["tag", "n", *COLUMNS.values()]
    body = [[r.tag, str(r.n_samples), f"{r.lpips:.4f}", f"{r.idsim:.4f}", f"{r.fid:.4f}"] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(c.ljust(w) for c, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def report(rows: Sequence[MetricsRow], path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>`` as CSV and a sibling ``.txt`` aligned table."""
    if not rows:
        raise ValueError("report needs at least one row")
    path = Path(path)
    if path.suffix != ".csv":
        path = path / "metrics.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f.name for f in fields(MetricsRow)])
        for r in rows:
            w.writerow([r.tag, r.n_samples, *(f"{v:.6f}" for v in astuple(r)[2:])])
    txt = path.with_suffix(".txt")
    txt.write_text(format_table(rows))
    return path, txt
