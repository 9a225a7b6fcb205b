"""Iterative generate-and-feed-back loop, training, checkpoints and ablations."""

from __future__ import annotations

import hashlib
import logging
import statistics
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import AblationFlags, ConfigError, ExperimentConfig, parse_config, seed_everything
from .data import (
    Batch,
    FaceRecord,
    PairedSample,
    batch_iter,
    build_pairs,
    contour_channels,
    load_image_dir,
    resize,
    toy_dataset,
)
from .encoder import LatentBundle, MainEncoder
from .generator import StyleGenerator, pretrain_toy
from .identity import IdentityEmbedder, IdentityEncoder, train_embedder
from .losses import (
    LossLogger,
    LossReport,
    PerceptualExtractor,
    identity_loss,
    l2_loss,
    perceptual_loss,
    total_loss,
    wnorm_loss,
)
from .metrics import MetricsRow, embed_features, eval_fid, eval_idsim, eval_lpips, report

logger = logging.getLogger(__name__)

__all__ = [
    "TrainingDiverged",
    "Frozen",
    "Models",
    "RefinementStep",
    "RefinementTrace",
    "Trainer",
    "prepare_frozen",
    "build_models",
    "build_samples",
    "refine",
    "train",
    "evaluate",
    "run_ablation",
    "save_checkpoint",
    "load_checkpoint",
    "models_from_checkpoint",
    "STANDARD_GRID",
]

CHECKPOINT_FORMAT = "dualface-checkpoint-v1"
# baseline, +IFBlock, +input latent, full method
STANDARD_GRID = [AblationFlags(*f) for f in ((0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1))]
HELD_OUT_OFFSET = 1000


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Frozen:
    """Components that never receive updates during encoder training."""

    generator: StyleGenerator
    embedder: IdentityEmbedder
    extractor: PerceptualExtractor = field(default_factory=PerceptualExtractor)


@dataclass
class Models:
    config: ExperimentConfig
    identity_encoder: IdentityEncoder
    main_encoder: MainEncoder
    frozen: Frozen

    @property
    def generator(self) -> StyleGenerator:
        return self.frozen.generator

    @property
    def embedder(self) -> IdentityEmbedder:
        return self.frozen.embedder

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        params = list(self.identity_encoder.parameters()) + list(self.main_encoder.parameters())
        return [p for p in params if p.requires_grad]

    def train(self, mode: bool = True) -> None:
        self.identity_encoder.train(mode)
        self.main_encoder.train(mode)


@dataclass
class RefinementStep:
    feedback: torch.Tensor
    bundle: LatentBundle
    output: torch.Tensor
    report: LossReport | None = None


@dataclass
class RefinementTrace:
    steps: list[RefinementStep]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def final(self) -> torch.Tensor:
        return self.steps[-1].output


# -- data and frozen components ---------------------------------------------


def base_records(config: ExperimentConfig, held_out: bool = False) -> list[FaceRecord]:
    if config.data_dir:
        return load_image_dir(config.data_dir)
    res = config.scale.generator_resolution
    offset = HELD_OUT_OFFSET if held_out else 0
    return toy_dataset(config.num_identities, config.renders_per_identity, res, offset)


def build_samples(config: ExperimentConfig, records: Sequence[FaceRecord] | None = None, held_out=False):
    records = base_records(config, held_out) if records is None else records
    return build_pairs(
        records,
        config.per_contour,
        config.seed,
        modality=config.modality,
        lr_size=config.scale.lr_contour_size,
        mask_classes=config.mask_classes,
    )


def _frozen_key(config: ExperimentConfig) -> str:
    parts = (
        config.profile,
        config.data_dir,
        config.num_identities,
        config.generator_pretrain_steps,
        config.embedder_pretrain_steps,
        config.avg_samples,
    )
    return hashlib.sha1(repr(parts).encode()).hexdigest()[:12]


def prepare_frozen(config: ExperimentConfig, cache_dir: str | Path | None = None) -> Frozen:
    """Pretrain (or load cached) generator and embedder for this data setup.

    Both are trained with seed 0 regardless of the experiment seed so every
    ablation cell shares them.
    """
    profile = config.scale
    cache = Path(cache_dir) / f"frozen-{_frozen_key(config)}.pt" if cache_dir else None
    if cache is not None and cache.is_file():
        blob = torch.load(cache, map_location="cpu")
        return _frozen_from_state(config, blob)
    if config.data_dir:
        records = load_image_dir(config.data_dir)
    else:
        records = toy_dataset(config.num_identities, 16, profile.generator_resolution)
    images = torch.stack([r.image for r in records])
    labels = torch.tensor([r.label for r in records])
    if config.generator_checkpoint:
        generator = StyleGenerator(profile)
        generator.set_parameters(torch.load(config.generator_checkpoint, map_location="cpu"))
        generator.freeze()
    else:
        generator = pretrain_toy(profile, images, config.generator_pretrain_steps, 0, avg_samples=config.avg_samples)
    embedder = train_embedder(profile, resize(images, profile.loss_resolution), labels, config.embedder_pretrain_steps)
    frozen = Frozen(generator, embedder)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        torch.save(_frozen_state(frozen), cache)
    return frozen


def _frozen_state(frozen: Frozen) -> dict:
    return {
        "generator": frozen.generator.state_dict(),
        "embedder": frozen.embedder.state_dict(),
        "embedder_classes": frozen.embedder.classifier.out_features,
    }


def _frozen_from_state(config: ExperimentConfig, blob: dict) -> Frozen:
    profile = config.scale
    generator = StyleGenerator(profile)
    generator.set_parameters(blob["generator"])
    embedder = IdentityEmbedder(profile, blob["embedder_classes"])
    embedder.load_state_dict(blob["embedder"])
    return Frozen(generator.freeze(), embedder.freeze())


def build_models(config: ExperimentConfig, frozen: Frozen) -> Models:
    """Seeded construction of both encoders around the frozen components."""
    seed_everything(config.seed)
    profile = config.scale
    id_enc = IdentityEncoder(profile)
    main = MainEncoder(profile, contour_channels(config.modality, config.mask_classes), config.ablation)
    if config.ablation.load_pretrained_id:
        id_enc.load_pretrained(frozen.embedder.state_dict())
    main.set_anchors(frozen.generator.w_avg, frozen.generator.const)
    return Models(config, id_enc, main, frozen)


# -- refinement loop ----------------------------------------------------------


def compute_losses(models: Models, output, gt, z_id, style) -> LossReport:
    cfg = models.config
    res = cfg.scale.loss_resolution
    out = resize(output, res)
    normalized = not cfg.strict_norm
    z_gen = models.embedder(out)
    terms = (
        l2_loss(out, gt, normalized),
        perceptual_loss(out, gt, models.frozen.extractor, normalized),
        identity_loss(z_id, z_gen),
        wnorm_loss(style, models.generator.w_avg, normalized),
    )
    return total_loss(terms, cfg.lambdas)


def refine(
    models: Models,
    contour: torch.Tensor,
    identity_image: torch.Tensor,
    T: int,
    contour_gt: torch.Tensor | None = None,
) -> RefinementTrace:
    """Run ``T`` encode-synthesize passes, feeding each output back in.

    The first feedback is the generator's average image; later feedbacks are
    the previous output, detached and resized to the encoder input size.
    With ``contour_gt`` each step also carries its LossReport.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    res = models.config.scale.contour_input_resolution
    loss_res = models.config.scale.loss_resolution
    batch = contour.shape[0]
    pyramid = None
    if models.config.ablation.use_ifblock:
        pyramid = models.identity_encoder(resize(identity_image, res))
    z_id = gt = None
    if contour_gt is not None:
        with torch.no_grad():
            z_id = models.embedder(resize(identity_image, loss_res))
        gt = resize(contour_gt, loss_res)
    feedback = resize(models.generator.average_image(), res).unsqueeze(0).expand(batch, -1, -1, -1)
    steps = []
    for _ in range(T):
        bundle = models.main_encoder(contour, feedback, pyramid)
        output = models.generator.synthesize(bundle)
        rep = compute_losses(models, output, gt, z_id, bundle.style) if gt is not None else None
        steps.append(RefinementStep(feedback, bundle, output, rep))
        feedback = resize(output.detach(), res)
    return RefinementTrace(steps)


def _sum_reports(reports: Sequence[LossReport]) -> LossReport:
    terms = [sum(r.terms()[k] for r in reports) for k in range(4)]
    return total_loss(terms, reports[0].lambdas)


# -- training -----------------------------------------------------------------


class Trainer:
    def __init__(self, models: Models):
        self.models = models
        self.config = models.config
        self.optimizer = torch.optim.Adam(models.trainable_parameters(), lr=self.config.learning_rate)
        self.step = 0
        self._recent = deque(maxlen=50)

    def loss_on(self, batch: Batch) -> LossReport:
        trace = refine(
            self.models, batch.contour, batch.identity, self.config.refinement_steps, batch.contour_gt
        )
        reports = [s.report for s in trace.steps]
        return reports[-1] if self.config.final_only else _sum_reports(reports)

    def train_step(self, batch: Batch) -> LossReport:
        self.models.train(True)
        rep = self.loss_on(batch)
        if not torch.isfinite(rep.total):
            raise TrainingDiverged(f"non-finite total loss at step {self.step + 1}")
        value = rep.total.item()
        if len(self._recent) >= 10 and value > 10 * statistics.median(self._recent):
            logger.warning("step %d: total loss %.4g exceeds 10x running median", self.step + 1, value)
        self._recent.append(value)
        self.optimizer.zero_grad(set_to_none=True)
        rep.total.backward()
        self.optimizer.step()
        self.step += 1
        return rep.detach()

    def batches(self, samples: Sequence[PairedSample]):
        res = self.config.scale.contour_input_resolution
        epoch = 0
        while True:
            yield from batch_iter(samples, self.config.batch_size, res, seed=self.config.seed + epoch)
            epoch += 1

    def fit(
        self,
        samples: Sequence[PairedSample],
        steps: int,
        out_dir: str | Path | None = None,
        checkpoint_steps: Sequence[int] = (),
    ) -> list[dict]:
        """Train for ``steps`` more steps; returns the logged rows.

        With ``out_dir``, writes ``losses.csv`` and checkpoints at
        ``checkpoint_every`` multiples plus any of ``checkpoint_steps``.
        """
        torch.use_deterministic_algorithms(True)
        log = LossLogger(Path(out_dir) / "losses.csv") if out_dir else None
        rows = []
        batches = self.batches(samples)
        for _ in range(steps):
            rep = self.train_step(next(batches))
            rows.append(rep.as_row(self.step))
            if log and (self.step == 1 or self.step % self.config.log_every == 0):
                log.log(self.step, rep)
            if self.step % self.config.log_every == 0:
                logger.info("step %d  total=%.5f", self.step, rows[-1]["total"])
            if out_dir and (
                self.step in checkpoint_steps
                or (self.config.checkpoint_every and self.step % self.config.checkpoint_every == 0)
            ):
                save_checkpoint(self, Path(out_dir) / f"step{self.step:06d}.pt")
        return rows


def train(
    config: ExperimentConfig,
    frozen: Frozen | None = None,
    samples: Sequence[PairedSample] | None = None,
    out_dir: str | Path | None = None,
    cache_dir: str | Path | None = None,
) -> Trainer:
    frozen = frozen or prepare_frozen(config, cache_dir)
    samples = build_samples(config) if samples is None else samples
    trainer = Trainer(build_models(config, frozen))
    out_dir = Path(out_dir or config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.save(out_dir / "config.txt")
    trainer.fit(samples, config.steps, out_dir)
    save_checkpoint(trainer, out_dir / "final.pt")
    return trainer


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(trainer: Trainer, path: str | Path) -> Path:
    m = trainer.models
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "profile": m.config.profile,
            "config": m.config.to_text(),
            "flags": m.config.ablation.tag(),
            "step": trainer.step,
            "identity_encoder": m.identity_encoder.state_dict(),
            "main_encoder": m.main_encoder.state_dict(),
            "generator": m.generator.state_dict(),
            "embedder": m.embedder.state_dict(),
            "embedder_classes": m.embedder.classifier.out_features,
            "optimizer": trainer.optimizer.state_dict(),
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        blob = torch.load(path, map_location="cpu")
    except Exception as exc:
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    return blob


def models_from_checkpoint(blob: dict, overrides: Sequence[str] = ()) -> Trainer:
    """Rebuild a trainer from a checkpoint; ``overrides`` patch its config snapshot."""
    config = parse_config(blob["config"], list(overrides))
    frozen = _frozen_from_state(config, blob)
    trainer = Trainer(build_models(config, frozen))
    restore(trainer, blob)
    return trainer


def restore(trainer: Trainer, blob: dict) -> None:
    """Load checkpoint state into an existing trainer of the same profile."""
    m = trainer.models
    if blob["profile"] != m.config.profile:
        raise ConfigError(
            f"checkpoint profile {blob['profile']!r} does not match model profile {m.config.profile!r}"
        )
    try:
        m.identity_encoder.load_state_dict(blob["identity_encoder"])
        m.main_encoder.load_state_dict(blob["main_encoder"])
        m.generator.set_parameters(blob["generator"])
        m.embedder.load_state_dict(blob["embedder"])
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint shapes do not fit profile {m.config.profile!r}: {exc}") from exc
    trainer.optimizer.load_state_dict(blob["optimizer"])
    trainer.step = blob["step"]


# -- evaluation ---------------------------------------------------------------


@dataclass
class Evaluation:
    row: MetricsRow
    mean_total_loss: float
    outputs: torch.Tensor


@torch.no_grad()
def evaluate(models: Models, samples: Sequence[PairedSample], tag: str = "", batch_size: int = 16) -> Evaluation:
    """Refine every sample and score the final outputs."""
    cfg = models.config
    models.train(False)
    res = cfg.scale.contour_input_resolution
    loss_res = cfg.scale.loss_resolution
    outs, gts, ids, losses = [], [], [], []
    for batch in batch_iter(samples, batch_size, res):
        trace = refine(models, batch.contour, batch.identity, cfg.refinement_steps, batch.contour_gt)
        outs.append(resize(trace.final, loss_res))
        gts.append(resize(batch.contour_gt, loss_res))
        ids.append(resize(batch.identity, loss_res))
        rep = _sum_reports([s.report for s in trace.steps]) if not cfg.final_only else trace.steps[-1].report
        losses.append(rep.total.item() * len(batch))
    out, gt, idi = torch.cat(outs), torch.cat(gts), torch.cat(ids)
    ref = embed_features(gt, models.embedder)
    row = MetricsRow(
        tag=tag or cfg.ablation.tag(),
        n_samples=len(out),
        lpips=eval_lpips(out, gt, models.frozen.extractor),
        idsim=eval_idsim(out, idi, models.embedder),
        fid=eval_fid(embed_features(out, models.embedder), ref),
    )
    return Evaluation(row, sum(losses) / len(out), out)


def run_ablation(
    config: ExperimentConfig,
    grid: Sequence[AblationFlags] = STANDARD_GRID,
    frozen: Frozen | None = None,
    samples: Sequence[PairedSample] | None = None,
    out_dir: str | Path | None = None,
    cache_dir: str | Path | None = None,
) -> list[Evaluation]:
    """Train one model per flag combination on shared data; one metrics row each."""
    frozen = frozen or prepare_frozen(config, cache_dir)
    samples = build_samples(config) if samples is None else samples
    out_dir = Path(out_dir or config.out_dir)
    results = []
    for flags in grid:
        cell = config.replace(ablation=flags)
        cell_dir = out_dir / f"cell-{flags.tag()}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        trainer = Trainer(build_models(cell, frozen))
        trainer.fit(samples, cell.steps, cell_dir)
        save_checkpoint(trainer, cell_dir / "final.pt")
        ev = evaluate(trainer.models, samples, tag=flags.tag())
        logger.info("ablation %s: %s  loss=%.5f", flags.tag(), ev.row, ev.mean_total_loss)
        results.append(ev)
    report([r.row for r in results], out_dir / "ablation.csv")
    return results


def mean_rows(rows: Sequence[MetricsRow], tag: str) -> MetricsRow:
    return MetricsRow(
        tag,
        rows[0].n_samples,
        float(np.mean([r.lpips for r in rows])),
        float(np.mean([r.idsim for r in rows])),
        float(np.mean([r.fid for r in rows])),
    )
