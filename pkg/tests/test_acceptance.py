"""End-to-end acceptance criteria.

Each test records a one-line PASS/FAIL verdict (shown in the terminal
summary and with ``-s``) before asserting. The training-based criteria share
one overfit setup: 8 procedural identities with one render each and two
identity partners per contour, giving 16 fixed samples, trained with the
default loss weights, learning rate, batch size and refinement count.

Expect roughly an hour on one CPU core; frozen-component pretraining is cached
in pytest's cache directory after the first run.
"""

import math
import time
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from dualface.config import AblationFlags, ExperimentConfig, full_profile, toy_profile
from dualface.data import resize
from dualface.encoder import LatentBundle, MainEncoder, ModulationParams, ifm_apply
from dualface.generator import StyleGenerator, parameter_hash
from dualface.identity import IdentityEncoder
from dualface.losses import PerceptualExtractor, identity_loss, l2_loss, perceptual_loss, wnorm_loss
from dualface.metrics import eval_fid
from dualface.trainer import Trainer, build_models, build_samples, evaluate, load_checkpoint, prepare_frozen, refine

pytestmark = pytest.mark.acceptance

OVERFIT = ExperimentConfig(num_identities=8, renders_per_identity=1, per_contour=2, steps=500, log_every=50)
ABLATION_SEEDS = (0, 1, 2)
# per-cell training length for the ablation; the full 500 would take ~1.5 h on CPU
ABLATION_STEPS = 200


@pytest.fixture(scope="module")
def frozen(frozen_cache):
    return prepare_frozen(OVERFIT, frozen_cache)


@pytest.fixture(scope="module")
def samples():
    s = build_samples(OVERFIT)
    assert len(s) == 16
    return s


def _run(frozen, samples, steps, out_dir, checkpoint_steps):
    trainer = Trainer(build_models(OVERFIT, frozen))
    before = parameter_hash(trainer.models.generator)
    start = time.perf_counter()
    rows = trainer.fit(samples, steps, out_dir, checkpoint_steps)
    return SimpleNamespace(
        trainer=trainer, rows=rows, hash_before=before, out_dir=out_dir, seconds=time.perf_counter() - start
    )


@pytest.fixture(scope="module")
def run_a(frozen, samples, tmp_path_factory):
    return _run(frozen, samples, 500, tmp_path_factory.mktemp("run_a"), (100, 200))


@pytest.fixture(scope="module")
def run_b(frozen, samples, tmp_path_factory):
    return _run(frozen, samples, 100, tmp_path_factory.mktemp("run_b"), (100,))


# -- 1 ------------------------------------------------------------------------


def _scalar_loop_ifm(h, gamma, beta):
    flat_h, flat_g, flat_b = (t.reshape(-1).tolist() for t in (h, gamma, beta))
    return torch.tensor([g * x + b for x, g, b in zip(flat_h, flat_g, flat_b)], dtype=h.dtype).reshape(h.shape)


def test_criterion_1_ifm_matches_scalar_oracle(criterion):
    gen = torch.Generator().manual_seed(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        shape = tuple(int(v) for v in torch.randint(1, 6, (4,), generator=gen))
        h, g, b = (torch.randn(shape, generator=gen) for _ in range(3))
        out = ifm_apply(h, ModulationParams(g, b))
        worst = max(worst, (out - _scalar_loop_ifm(h, g, b)).abs().max().item())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 10
    criterion(1, "modulation vs scalar-loop oracle", ok, f"max |dev| {worst:.2e} over 100 tensors in {elapsed:.2f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------


def _fd_relative_error(fn, x, eps=1e-4):
    x = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(x), x)
    fd = torch.zeros_like(x)
    flat = fd.view(-1)
    base = x.detach()
    for i in range(base.numel()):
        step = torch.zeros_like(base).view(-1)
        step[i] = eps
        step = step.view_as(base)
        flat[i] = (fn(base + step) - fn(base - step)) / (2 * eps)
    return ((grad - fd).norm() / fd.norm()).item()


def test_criterion_2_loss_gradients(criterion):
    gen = torch.Generator().manual_seed(2)
    dd = torch.float64
    gt = torch.rand(1, 3, 4, 4, generator=gen, dtype=dd)
    img = torch.rand(1, 3, 4, 4, generator=gen, dtype=dd)
    extractor = PerceptualExtractor()
    z_id = torch.randn(1, 16, generator=gen, dtype=dd)
    z_gen = torch.randn(1, 16, generator=gen, dtype=dd)
    w = torch.randn(1, 4, 4, generator=gen, dtype=dd)
    w_bar = torch.randn(4, generator=gen, dtype=dd)
    start = time.perf_counter()
    errors = {
        "l2": _fd_relative_error(lambda x: l2_loss(x, gt), img),
        "perceptual": _fd_relative_error(lambda x: perceptual_loss(x, gt, extractor), img),
        "identity": _fd_relative_error(lambda z: identity_loss(z_id, z), z_gen),
        "wnorm": _fd_relative_error(lambda x: wnorm_loss(x, w_bar), w),
    }
    elapsed = time.perf_counter() - start
    ok = max(errors.values()) <= 1e-5 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items()) + f" in {elapsed:.1f}s"
    criterion(2, "central finite differences, float64", ok, detail)
    assert ok


# -- 3 ------------------------------------------------------------------------


def _encode_shapes(profile):
    res = profile.contour_input_resolution
    x = torch.rand(1, 3, res, res)
    pyramid = IdentityEncoder(profile)(x)
    out = MainEncoder(profile, 3)(x, x, pyramid)
    return tuple(out.style.shape[1:]), tuple(out.input_latent.shape[1:])


def _generator_shape(profile):
    # the 1024px synthesis runs on the meta device: shapes only, no arithmetic
    (n, d), lat = profile.latent_shapes
    with torch.device("meta"):
        out = StyleGenerator(profile).synthesize(LatentBundle(torch.empty(1, n, d), torch.empty(1, *lat)))
    return tuple(out.shape[1:])


def test_criterion_3_shape_contracts(criterion):
    start = time.perf_counter()
    got = {}
    with torch.no_grad():
        for profile in (full_profile(), toy_profile()):
            got[profile.name] = (*_encode_shapes(profile), _generator_shape(profile))
    elapsed = time.perf_counter() - start
    expected = {
        "full": ((18, 512), (512, 4, 4), (3, 1024, 1024)),
        "toy": ((10, 64), (64, 4, 4), (3, 64, 64)),
    }
    ok = got == expected and elapsed < 30
    criterion(3, "encoder/generator shapes", ok, f"{got} in {elapsed:.1f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------


def test_criterion_4_generator_untouched(run_a, criterion):
    blob = load_checkpoint(run_a.out_dir / "step000200.pt")
    at_200 = StyleGenerator(toy_profile())
    at_200.set_parameters(blob["generator"])
    h200 = parameter_hash(at_200)
    h500 = parameter_hash(run_a.trainer.models.generator)
    ok = h200 == run_a.hash_before == h500
    criterion(4, "frozen generator hash", ok, f"start {run_a.hash_before[:12]} step200 {h200[:12]} step500 {h500[:12]}")
    assert ok


# -- 5 ------------------------------------------------------------------------


def test_criterion_5_overfit(run_a, criterion):
    first, last = run_a.rows[0]["total"], run_a.rows[499]["total"]
    ratio = last / first
    ok = ratio <= 0.5
    detail = f"step1 {first:.4f} step500 {last:.4f} ratio {ratio:.3f} ({run_a.seconds / 60:.1f} min)"
    criterion(5, "overfit 16 samples, 500 steps", ok, detail)
    assert ok


# -- 6 ------------------------------------------------------------------------


def test_criterion_6_identity_triple(criterion):
    z = torch.randn(64, generator=torch.Generator().manual_seed(6), dtype=torch.float64)
    ortho = torch.zeros_like(z)
    ortho[0], ortho[1] = -z[1], z[0]
    got = [identity_loss(z, z).item(), identity_loss(z, ortho).item(), identity_loss(z, -z).item()]
    ok = all(abs(g - e) <= 1e-6 for g, e in zip(got, (0.0, 1.0, 2.0)))
    criterion(6, "identity loss matched/orthogonal/negated", ok, f"{got[0]:.2e}, {got[1]:.8f}, {got[2]:.8f}")
    assert ok


# -- 7 ------------------------------------------------------------------------


def test_criterion_7_fid_sanity(criterion):
    rng = np.random.default_rng(7)
    d, n = 8, 10_000
    a = rng.standard_normal((n, d))
    same = eval_fid(a, a.copy())
    # a large shift keeps sampling noise in the fitted moments well below the tolerance
    mu = rng.standard_normal(d)
    mu *= 100.0 / np.linalg.norm(mu)
    b = rng.standard_normal((n, d)) + mu
    expected = float(mu @ mu)
    rel = abs(eval_fid(a, b) - expected) / expected
    ok = abs(same) <= 1e-6 and rel <= 1e-3
    criterion(7, "FID identical and shifted Gaussians", ok, f"identical {same:.1e}; |mu|^2={expected:.0f}: rel {rel:.1e}")
    assert ok


# -- 8 ------------------------------------------------------------------------


def test_criterion_8_ablation_direction(frozen, criterion):
    cells = {
        "FFF": AblationFlags(False, False, False),
        "TFF": AblationFlags(True, False, False),
        "TTF": AblationFlags(True, True, False),
    }
    idsim = {k: [] for k in cells}
    loss = {k: [] for k in cells}
    start = time.perf_counter()
    for seed in ABLATION_SEEDS:
        for tag, flags in cells.items():
            cfg = OVERFIT.replace(seed=seed, ablation=flags, steps=ABLATION_STEPS)
            samples = build_samples(cfg)
            trainer = Trainer(build_models(cfg, frozen))
            trainer.fit(samples, cfg.steps)
            ev = evaluate(trainer.models, samples, tag=tag)
            idsim[tag].append(ev.row.idsim)
            loss[tag].append(ev.mean_total_loss)
    m_id = {k: float(np.mean(v)) for k, v in idsim.items()}
    m_loss = {k: float(np.mean(v)) for k, v in loss.items()}
    ok_id = m_id["TFF"] > m_id["FFF"]
    ok_loss = m_loss["TTF"] < m_loss["TFF"]
    detail = (
        f"IDSIM +IFBlock {m_id['TFF']:.4f} vs baseline {m_id['FFF']:.4f}; "
        f"loss +input latent {m_loss['TTF']:.4f} vs constant {m_loss['TFF']:.4f} "
        f"({len(ABLATION_SEEDS)} seeds x {ABLATION_STEPS} steps, {(time.perf_counter() - start) / 60:.1f} min)"
    )
    criterion(8, "ablation direction", ok_id and ok_loss, detail)
    assert ok_id, detail
    assert ok_loss, detail


# -- 9 ------------------------------------------------------------------------


def _diff_keys(a, b, prefix=""):
    if isinstance(a, dict):
        if set(a) != set(b):
            return [prefix or "<keys>"]
        return [k for key in a for k in _diff_keys(a[key], b[key], f"{prefix}/{key}")]
    if isinstance(a, (list, tuple)):
        if len(a) != len(b):
            return [prefix]
        return [k for i, (x, y) in enumerate(zip(a, b)) for k in _diff_keys(x, y, f"{prefix}[{i}]")]
    if torch.is_tensor(a):
        same = torch.is_tensor(b) and a.dtype == b.dtype and a.shape == b.shape and torch.equal(a, b)
        return [] if same else [prefix]
    if isinstance(a, float) and math.isnan(a):
        return [] if isinstance(b, float) and math.isnan(b) else [prefix]
    return [] if a == b else [prefix]


def test_criterion_9_determinism(run_a, run_b, criterion):
    a = load_checkpoint(run_a.out_dir / "step000100.pt")
    b = load_checkpoint(run_b.out_dir / "step000100.pt")
    diffs = _diff_keys(a, b)
    n_tensors = sum(len(a[k]) for k in ("identity_encoder", "main_encoder", "generator", "embedder"))
    ok = not diffs
    detail = "bit-identical" if ok else f"{len(diffs)} differing entries, e.g. {diffs[:3]}"
    criterion(9, "step-100 checkpoints of two runs", ok, f"{detail} ({n_tensors} tensors + optimizer state)")
    assert ok


# -- 10 -----------------------------------------------------------------------


def test_criterion_10_refinement_trace(run_a, samples, criterion):
    models = run_a.trainer.models
    res = OVERFIT.scale.contour_input_resolution
    batch = samples[:4]
    contour = torch.stack([resize(s.contour.image.unsqueeze(0), res)[0] for s in batch])
    identity = torch.stack([s.identity_image for s in batch])
    with torch.no_grad():
        trace = refine(models, contour, identity, 3)
    avg = resize(models.generator.average_image(), res)
    checks = [len(trace) == 3, all(torch.equal(fb, avg) for fb in trace.steps[0].feedback)]
    for prev, cur in zip(trace.steps, trace.steps[1:]):
        checks.append(torch.equal(cur.feedback, resize(prev.output, res)))
    ok = all(checks)
    criterion(10, "T=3 feedback chain", ok, f"checks {checks}")
    assert ok
