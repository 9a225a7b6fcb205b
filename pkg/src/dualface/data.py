"""Contour synthesis, contour-identity pairing and batching.

Images are float tensors shaped ``(C, H, W)`` with values in ``[0, 1]``;
batches add a leading dimension.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

logger = logging.getLogger(__name__)

__all__ = [
    "FaceRecord",
    "ContourCondition",
    "PairedSample",
    "Batch",
    "resize",
    "luminance",
    "render_face",
    "toy_dataset",
    "make_lr_contour",
    "make_sketch_contour",
    "make_mask_contour",
    "make_contour",
    "contour_channels",
    "build_pairs",
    "batch_iter",
    "load_image_dir",
    "read_manifest",
    "write_manifest",
    "load_image",
    "save_image",
]

SKETCH_THRESHOLD = 0.1


@dataclass(frozen=True)
class FaceRecord:
    label: int
    image: torch.Tensor
    key: str


@dataclass(frozen=True)
class ContourCondition:
    modality: str
    image: torch.Tensor
    source_id: str


@dataclass(frozen=True)
class PairedSample:
    contour: ContourCondition
    identity_image: torch.Tensor
    contour_gt: torch.Tensor
    identity_label: int
    identity_key: str = ""


@dataclass
class Batch:
    contour: torch.Tensor
    identity: torch.Tensor
    contour_gt: torch.Tensor
    identity_label: torch.Tensor

    def __len__(self) -> int:
        return self.contour.shape[0]


def resize(x: torch.Tensor, size: int, mode: str = "bicubic") -> torch.Tensor:
    """Resize ``(C,H,W)`` or ``(B,C,H,W)`` to ``size`` x ``size``.

    Bicubic uses the antialiased (PIL-style, a=-0.5) kernel so downsampling
    integrates over the source footprint. Output is clamped to [0, 1].
    """
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.shape[-1] == size and x.shape[-2] == size:
        out = x
    elif mode == "nearest":
        out = F.interpolate(x, size=(size, size), mode="nearest-exact")
    else:
        out = F.interpolate(x, size=(size, size), mode=mode, align_corners=False, antialias=True)
    out = out.clamp(0.0, 1.0)
    return out.squeeze(0) if squeeze else out


def luminance(x: torch.Tensor) -> torch.Tensor:
    """Rec. 601 luma of an RGB image; single-channel inputs pass through."""
    if x.shape[-3] == 1:
        return x
    w = x.new_tensor([0.299, 0.587, 0.114]).view(3, 1, 1)
    return (x * w).sum(dim=-3, keepdim=True)


def _check_square(face: torch.Tensor) -> int:
    if face.dim() != 3 or face.shape[1] != face.shape[2]:
        raise ValueError(f"expected a square (C,H,W) image, got shape {tuple(face.shape)}")
    return face.shape[1]


# -- procedural faces -------------------------------------------------------


def _identity_traits(label: int) -> dict:
    rng = np.random.default_rng(10_007 * label + 17)
    return {
        "skin": rng.uniform([0.45, 0.3, 0.2], [0.95, 0.8, 0.7]),
        "hair": rng.uniform(0.0, 0.8, 3),
        "eyes": rng.uniform(0.0, 1.0, 3),
        "lips": rng.uniform([0.5, 0.0, 0.1], [0.9, 0.4, 0.5]),
        "face_w": rng.uniform(0.26, 0.36),
        "face_h": rng.uniform(0.34, 0.44),
        "eye_gap": rng.uniform(0.09, 0.16),
        "eye_r": rng.uniform(0.035, 0.06),
        "mouth_w": rng.uniform(0.06, 0.14),
        "hair_h": rng.uniform(0.05, 0.18),
    }


def render_face(label: int, variant: int, size: int) -> torch.Tensor:
    """Draw a face-like composite of soft ellipses.

    ``label`` fixes the identity traits (colours, proportions); ``variant``
    jitters pose, lighting and background.
    """
    t = _identity_traits(label)
    rng = np.random.default_rng(7919 * variant + 31 * label + 5)
    cx, cy = 0.5 + rng.uniform(-0.06, 0.06), 0.52 + rng.uniform(-0.05, 0.05)
    light = rng.uniform(-0.25, 0.25, 2)
    bg = rng.uniform(0.6, 1.0, 3)

    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    soft = 1.5 / size

    def ellipse(x0, y0, rx, ry):
        d = np.sqrt(((xx - x0) / rx) ** 2 + ((yy - y0) / ry) ** 2)
        return np.clip((1.0 - d) * min(rx, ry) / soft + 0.5, 0.0, 1.0)[..., None]

    img = np.broadcast_to(bg, (size, size, 3)).copy()
    hair = ellipse(cx, cy - t["face_h"] * 0.35, t["face_w"] * 1.12, t["face_h"] * 0.75 + t["hair_h"])
    img = img * (1 - hair) + t["hair"] * hair
    face = ellipse(cx, cy, t["face_w"], t["face_h"])
    shade = 1.0 + light[0] * (xx - cx)[..., None] + light[1] * (yy - cy)[..., None]
    img = img * (1 - face) + np.clip(t["skin"] * shade, 0, 1) * face
    for side in (-1, 1):
        ex, ey = cx + side * t["eye_gap"], cy - t["face_h"] * 0.18
        white = ellipse(ex, ey, t["eye_r"] * 1.6, t["eye_r"])
        img = img * (1 - white) + 0.95 * white
        iris = ellipse(ex, ey, t["eye_r"] * 0.8, t["eye_r"] * 0.8)
        img = img * (1 - iris) + t["eyes"] * iris
    mouth = ellipse(cx, cy + t["face_h"] * 0.5, t["mouth_w"], 0.03)
    img = img * (1 - mouth) + t["lips"] * mouth
    return torch.from_numpy(np.clip(img, 0, 1).transpose(2, 0, 1).astype(np.float32))


def toy_dataset(num_identities: int, renders_per_identity: int, size: int, offset: int = 0) -> list[FaceRecord]:
    """Procedural records; ``offset`` shifts the variant index for held-out renders."""
    records = []
    for label in range(num_identities):
        for v in range(offset, offset + renders_per_identity):
            records.append(FaceRecord(label, render_face(label, v, size), f"{label}_{v}"))
    return records


# -- contours ---------------------------------------------------------------


def make_lr_contour(face: torch.Tensor, target_size: int, source_id: str = "") -> ContourCondition:
    side = _check_square(face)
    if side < target_size:
        raise ValueError(f"face side {side} is smaller than target {target_size}")
    return ContourCondition("lr", resize(face, target_size), source_id)


def make_sketch_contour(
    face: torch.Tensor, threshold: float = SKETCH_THRESHOLD, source_id: str = ""
) -> ContourCondition:
    """Binary edge map from backward-difference gradient magnitude of the luma.

    A step between columns k-1 and k marks column k.
    """
    _check_square(face)
    lum = luminance(face)
    dx = torch.zeros_like(lum)
    dy = torch.zeros_like(lum)
    dx[..., :, 1:] = lum[..., :, 1:] - lum[..., :, :-1]
    dy[..., 1:, :] = lum[..., 1:, :] - lum[..., :-1, :]
    mag = torch.sqrt(dx**2 + dy**2)
    return ContourCondition("sketch", (mag > threshold).to(face.dtype), source_id)


def make_mask_contour(face: torch.Tensor, k: int, source_id: str = "") -> ContourCondition:
    """One-hot label volume from quantizing luma into ``k`` equal bins."""
    if k < 2:
        raise ValueError("mask needs k >= 2 classes")
    _check_square(face)
    lum = luminance(face)[0]
    bins = torch.clamp((lum * k).floor().long(), 0, k - 1)
    onehot = F.one_hot(bins, k).permute(2, 0, 1).to(face.dtype)
    return ContourCondition("mask", onehot, source_id)


def contour_channels(modality: str, mask_classes: int = 4) -> int:
    return {"lr": 3, "sketch": 1, "mask": mask_classes}[modality]


def make_contour(face, modality, *, lr_size=8, mask_classes=4, source_id="") -> ContourCondition:
    if modality == "lr":
        return make_lr_contour(face, lr_size, source_id)
    if modality == "sketch":
        return make_sketch_contour(face, source_id=source_id)
    if modality == "mask":
        return make_mask_contour(face, mask_classes, source_id)
    raise ValueError(f"unknown modality {modality!r}")


# -- pairing and batching ---------------------------------------------------


def build_pairs(
    records: Sequence[FaceRecord],
    per_contour: int,
    seed: int,
    *,
    modality: str = "lr",
    lr_size: int = 8,
    mask_classes: int = 4,
    make_contours: bool = True,
) -> list[PairedSample]:
    """Pair every record's contour with ``per_contour`` random identity images.

    Identity images are drawn from records of a different label when the
    dataset has at least two labels (from other records, then from the record
    itself, otherwise). Draws are without replacement while candidates last.
    ``make_contours=False`` skips contour synthesis (placeholder image) for
    counting-only use.
    """
    if not records:
        raise ValueError("cannot build pairs from an empty dataset")
    if per_contour < 1:
        raise ValueError("per_contour must be >= 1")
    rng = np.random.default_rng(seed)
    labels = np.array([r.label for r in records])
    multi_label = len(np.unique(labels)) >= 2
    all_idx = np.arange(len(records))
    pairs = []
    for i, rec in enumerate(records):
        if multi_label:
            cand = all_idx[labels != rec.label]
        elif len(records) > 1:
            cand = all_idx[all_idx != i]
        else:
            cand = all_idx
        picks = rng.choice(cand, size=per_contour, replace=per_contour > len(cand))
        if make_contours:
            contour = make_contour(
                rec.image, modality, lr_size=lr_size, mask_classes=mask_classes, source_id=rec.key
            )
        else:
            contour = ContourCondition(modality, rec.image[:0], rec.key)
        for j in picks:
            other = records[int(j)]
            pairs.append(PairedSample(contour, other.image, rec.image, other.label, other.key))
    return pairs


def _prepare_contour(c: ContourCondition, resolution: int) -> torch.Tensor:
    # lr inputs are smooth images; binary sketches and one-hot masks must stay discrete
    mode = "bicubic" if c.modality == "lr" else "nearest"
    return resize(c.image, resolution, mode)


def batch_iter(
    samples: Sequence[PairedSample],
    batch_size: int,
    resolution: int,
    seed: int | None = None,
) -> Iterator[Batch]:
    """Yield batches in order (or a seeded permutation); the last may be partial.

    Contour and identity images are resized to ``resolution``; ``contour_gt``
    keeps its native size.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(order), batch_size):
        chunk = [samples[int(i)] for i in order[start : start + batch_size]]
        yield Batch(
            contour=torch.stack([_prepare_contour(s.contour, resolution) for s in chunk]),
            identity=torch.stack([resize(s.identity_image, resolution) for s in chunk]),
            contour_gt=torch.stack([s.contour_gt for s in chunk]),
            identity_label=torch.tensor([s.identity_label for s in chunk]),
        )


# -- image files ------------------------------------------------------------


def load_image(path: str | Path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def save_image(img: torch.Tensor, path: str | Path) -> None:
    arr = img.detach().clamp(0, 1).mul(255).round().to(torch.uint8).cpu().numpy()
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path)
    else:
        Image.fromarray(arr[:3].transpose(1, 2, 0)).save(path)


_IMAGE_SUFFIXES = {".png", ".bmp", ".tif", ".tiff", ".ppm"}


def load_image_dir(directory: str | Path) -> list[FaceRecord]:
    """Read ``<label>_<anything>.png`` style files; all must share one square size."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found in {directory}")
    names = sorted({p.name.split("_", 1)[0] for p in files})
    label_of = {n: int(n) if n.isdigit() else i for i, n in enumerate(names)}
    records, size = [], None
    for p in files:
        img = load_image(p)
        if img.shape[1] != img.shape[2] or (size is not None and img.shape[1] != size):
            raise ValueError(f"{p.name}: images must be equal-size squares, got {tuple(img.shape[1:])}")
        size = img.shape[1]
        records.append(FaceRecord(label_of[p.name.split("_", 1)[0]], img, p.stem))
    logger.info("loaded %d images (%d identities) from %s", len(records), len(names), directory)
    return records


def read_manifest(path: str | Path) -> list[FaceRecord]:
    """Read a ``label<TAB>path`` manifest; relative paths resolve against it."""
    path = Path(path)
    records = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            label, rel = line.split("\t", 1)
            records.append(FaceRecord(int(label), load_image(path.parent / rel), Path(rel).stem))
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: bad manifest line {line!r}") from exc
    return records


def write_manifest(entries: Sequence[tuple[int, str]], path: str | Path) -> None:
    Path(path).write_text("".join(f"{label}\t{p}\n" for label, p in entries))
