"""Acceptance criteria 1-8. Each test prints one CRITERION line at its stated tolerance.

The three end-to-end fits run once per session (about 12 min each on one core).
Set DYNFIELD_FIT_DIR to reuse fits written by an identical config.
"""

import copy
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from dynfield.consistency import icl_loss
from dynfield.diffcore import DENSE_GROUP, AdamState, ParamStore, adam_step, backward, finite_diff_check
from dynfield.enhancer import EnhancerConfig, cross_frame_attention
from dynfield.experiments import cached_fit, run_enhancer, run_fit, variant_config
from dynfield.guidance import (
    EchoNoiseProvider,
    GaussianOracleProvider,
    GuidanceContext,
    NoiseSchedule,
    sample_timestep,
    sds_grad,
    sds_surrogate,
)
from dynfield.renderfield import CameraPose, composite, generate_rays, render, sample_distances
from dynfield.trainer import (
    StageConfig,
    build_dataset,
    build_provider,
    build_scene,
    profile_config,
    train,
)
from gradcases import CASES
from helpers import ConstantField

pytestmark = pytest.mark.acceptance
D = torch.float64


# -- 1 -----------------------------------------------------------------------

def test_criterion_1_gradients(criterion):
    t0 = time.perf_counter()
    results = {}
    for name, make in CASES.items():
        fn, params = make()
        step = 1e-4 if name == "enhancer_unet" else 1e-5
        results[name] = finite_diff_check(fn, params, step=step, max_entries=200,
                                          degenerate_below=1e-6)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda k: results[k].max_rel_error)
    fewest = min(results, key=lambda k: results[k].n_checked)
    ok = (all(r.max_rel_error < 1e-4 and r.n_checked >= 100 for r in results.values())
          and elapsed < 300)
    criterion(1, ok, (
        f"{len(results)} ops; worst rel err {results[worst].max_rel_error:.2e} ({worst}) < 1e-4; "
        f"fewest checked {results[fewest].n_checked} ({fewest}) >= 100; "
        f"kinks excluded {sum(r.n_excluded for r in results.values())}, "
        f"degenerate (|g| < 1e-6) skipped {sum(r.n_degenerate for r in results.values())}; "
        f"{elapsed:.0f}s < 300s"
    ))
    assert ok


# -- 2 -----------------------------------------------------------------------

def _sds_descent(provider_kind: str, steps: int = 500, lr: float = 0.02, seed: int = 0):
    g = torch.Generator().manual_seed(seed)
    sched = NoiseSchedule()
    mu = torch.rand(32, 32, 3, generator=g, dtype=D)
    x = torch.rand(32, 32, 3, generator=g, dtype=D)
    x0 = x.clone()
    store = ParamStore()
    store.register("x", x, DENSE_GROUP)
    adam = AdamState(lr={DENSE_GROUP: lr})
    provider = GaussianOracleProvider(mu, sched) if provider_kind == "oracle" else EchoNoiseProvider()
    ctx = GuidanceContext(None, (0.0, 0.0, 0.0), 0.0)
    for _ in range(steps):
        tau = sample_timestep(g, 0.02, 0.98, sched)
        eps = torch.randn(32, 32, 3, generator=g, dtype=D)
        if provider_kind == "echo":
            provider.eps = eps
        grad = sds_grad(x, provider, ctx, tau, eps, sched)
        adam_step(store, adam, backward(sds_surrogate(x, grad), store))
    return x.detach(), x0, mu


def test_criterion_2_sds_fixed_point(criterion):
    t0 = time.perf_counter()
    x, _, mu = _sds_descent("oracle")
    err = (x - mu).abs().max().item()
    y, y0, _ = _sds_descent("echo")
    moved = (y - y0).abs().max().item()
    elapsed = time.perf_counter() - t0
    ok = err < 0.02 and moved == 0.0 and elapsed < 60
    criterion(2, ok, f"oracle ||x - mu||_inf = {err:.2e} < 0.02 after 500 Adam steps; "
                     f"echo provider max |dx| = {moved:g} (== 0); {elapsed:.1f}s < 60s")
    assert ok


# -- 3, 4, 5: the desk fits ----------------------------------------------------

def _fit(name: str, mode: str, icl: bool, tmp_root: Path):
    cfg = variant_config("desk1", mode, icl)
    base = os.environ.get("DYNFIELD_FIT_DIR")
    if base:
        hit = cached_fit(cfg, Path(base) / name)
        if hit is not None:
            return hit + (f"reused {Path(base) / name}",)
    metrics, fld = run_fit(cfg, tmp_root / name)
    return metrics, fld, "fresh run"


@pytest.fixture(scope="session")
def fit_root(tmp_path_factory):
    return tmp_path_factory.mktemp("fits")


@pytest.fixture(scope="session")
def fit_cascade_icl(fit_root):
    return _fit("cascade_icl", "cascade", True, fit_root)


@pytest.fixture(scope="session")
def fit_coarse_icl(fit_root):
    return _fit("coarse_icl", "coarse", True, fit_root)


@pytest.fixture(scope="session")
def fit_cascade_noicl(fit_root):
    return _fit("cascade_noicl", "cascade", False, fit_root)


def test_criterion_3_end_to_end_fit(criterion, fit_cascade_icl):
    m, _, how = fit_cascade_icl
    minutes = m["train_seconds"] / 60
    ok = m["psnr"] >= 22.0 and m["iou"] >= 0.9 and minutes <= 45
    criterion(3, ok, (
        f"desk1 cascade+ICL: PSNR {m['psnr']:.2f} dB (>= 22), IoU {m['iou']:.3f} (>= 0.9) over "
        f"4 views x 8 timestamps; train {minutes:.1f} min on {torch.get_num_threads()} thread(s) "
        f"(<= 45); {how}"
    ))
    assert ok


def _zero_residual_bitwise(fld) -> bool:
    o, d = generate_rays(CameraPose(45.0, 15.0), 16, 16)
    coarse = render(fld, o, d, 0.4, n_samples=32, scale=1)
    zeroed = copy.deepcopy(fld)
    zeroed.zero_fine_heads()
    full = render(zeroed, o, d, 0.4, n_samples=32, scale=zeroed.n_levels)
    return torch.equal(coarse.rgb, full.rgb) and torch.equal(coarse.opacity, full.opacity)


def test_criterion_4_cascade(criterion, fit_cascade_icl, fit_coarse_icl):
    a, fld, how_a = fit_cascade_icl
    b, _, how_b = fit_coarse_icl
    flicker_ok = a["flicker"] <= 1.1 * b["flicker"]
    psnr_ok = a["psnr"] >= b["psnr"] + 1.0
    bitwise = _zero_residual_bitwise(fld)
    ok = flicker_ok and psnr_ok and bitwise
    criterion(4, ok, (
        f"flicker cascade {a['flicker']:.4f} vs coarse-only {b['flicker']:.4f} "
        f"(<= +10%: {flicker_ok}); PSNR cascade {a['psnr']:.2f} vs coarse-only {b['psnr']:.2f} "
        f"(>= +1 dB: {psnr_ok}); zeroed fine heads bitwise equal to coarse render: {bitwise}; "
        f"({how_a}; {how_b})"
    ))
    assert ok


def _ramp_batch_zero() -> bool:
    g = torch.Generator().manual_seed(0)
    # dyadic endpoints and gammas keep the ramp exact in floating point
    a = torch.randint(0, 16, (8, 8, 3), generator=g).to(D) / 16
    b = torch.randint(0, 16, (8, 8, 3), generator=g).to(D) / 16
    frames = torch.stack([(1 - k / 4) * a + (k / 4) * b for k in range(5)])
    return all(float(icl_loss(frames, squared=s, reduction=r)) == 0.0
               for s in (False, True) for r in ("sum", "mean"))


def test_criterion_5_icl(criterion, fit_cascade_icl, fit_cascade_noicl):
    a, _, how_a = fit_cascade_icl
    c, _, how_c = fit_cascade_noicl
    drop = 1.0 - a["flicker"] / c["flicker"]
    gap = abs(a["psnr"] - c["psnr"])
    ramp = _ramp_batch_zero()
    ok = drop >= 0.10 and gap <= 0.5 and ramp
    criterion(5, ok, (
        f"flicker ICL {a['flicker']:.4f} vs no-ICL {c['flicker']:.4f}: {100 * drop:.1f}% lower "
        f"(>= 10%); PSNR gap {gap:.2f} dB (<= 0.5); icl_loss on linear ramps == 0: {ramp}; "
        f"ground-truth flicker {a['flicker_gt']:.4f}; ({how_a}; {how_c})"
    ))
    assert ok


# -- 6 -----------------------------------------------------------------------

def test_criterion_6_volume_oracle(criterion):
    rng = np.random.default_rng(6)
    worst_direct = 0.0
    for _ in range(100):
        sigma, length = rng.uniform(0.01, 20.0), rng.uniform(0.01, 2.0)
        near = torch.zeros(1, dtype=D)
        t_vals, deltas = sample_distances(near, near + length, 128)
        _, acc, _, _ = composite(torch.full_like(t_vals, sigma), torch.zeros(*t_vals.shape, 3, dtype=D),
                                 deltas, t_vals, 1.0)
        worst_direct = max(worst_direct, abs(acc.item() - (1 - math.exp(-sigma * length))))
    # second route: chords through the bounding sphere via ray generation and render
    worst_render = 0.0
    for _ in range(100):
        sigma, b = rng.uniform(0.01, 20.0), rng.uniform(0.0, 0.95)
        o = torch.tensor([[-3.0, b, 0.0]], dtype=D)
        d = torch.tensor([[1.0, 0.0, 0.0]], dtype=D)
        out = render(ConstantField(sigma), o, d, 0.0, n_samples=128, scale=1)
        length = 2 * math.sqrt(1 - b * b)
        worst_render = max(worst_render, abs(out.opacity.item() - (1 - math.exp(-sigma * length))))
    ok = worst_direct < 1e-3 and worst_render < 1e-3
    criterion(6, ok, f"max |opacity - (1 - exp(-sigma L))| = {worst_direct:.2e} (compositing), "
                     f"{worst_render:.2e} (sphere chords via render); 100 pairs each, 128 samples, < 1e-3")
    assert ok


# -- 7 -----------------------------------------------------------------------

def _attention_properties() -> tuple[bool, bool]:
    envelope = perm = True
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        p, c, n = (torch.randn(4, 5, 6, generator=g, dtype=D) for _ in range(3))
        out = cross_frame_attention(p, c, n)
        keys = torch.cat([p, n], dim=-2).reshape(-1, 6)
        envelope &= bool((out >= keys.min(0).values - 1e-12).all()
                         and (out <= keys.max(0).values + 1e-12).all())
        perm &= bool(torch.allclose(out, cross_frame_attention(n, c, p), atol=1e-12, rtol=0))
    return envelope, perm


def test_criterion_7_enhancer(criterion):
    cfg = EnhancerConfig.profile("desk")
    m, _ = run_enhancer(cfg)
    envelope, perm = _attention_properties()
    ok = m["gain"] >= 1.0 and envelope and perm and m["seconds"] < 1200
    criterion(7, ok, (
        f"held-out {m['n_heldout']} frames: PSNR {m['psnr_degraded']:.2f} -> "
        f"{m['psnr_enhanced']:.2f} dB, gain {m['gain']:.2f} (>= 1); attention envelope {envelope}, "
        f"neighbor permutation {perm}; {cfg.epochs} epochs on {cfg.n_pairs} pairs; "
        f"{m['seconds'] / 60:.1f} min < 20"
    ))
    assert ok


# -- 8 -----------------------------------------------------------------------

def test_criterion_8_determinism(criterion, tmp_path):
    cfg = profile_config("tiny", stages=[StageConfig(600, 1, 6, 6, icl=True, icl_resolution=4),
                                         StageConfig(400, 1, 6, 6)], checkpoint_every=500)
    scene = build_scene(cfg)
    ds = build_dataset(cfg, scene)

    def fit(seed_offset=0, **kw):
        fld = cfg.model.build(cfg.seed + seed_offset)
        rep = train(cfg, ds, fld, build_provider(cfg, scene, ds.camera), **kw)
        return fld, rep

    f1, r1 = fit(out_dir=tmp_path / "a")
    f2, r2 = fit()
    curves_equal = r1.loss_curve() == r2.loss_curve() and len(r1.rows) == 1000
    ck = tmp_path / "a" / "iter_000500.ckpt"
    # different init seed: everything must come from the checkpoint
    f3, r3 = fit(seed_offset=17, out_dir=tmp_path / "b", resume=ck)
    p1 = ParamStore.from_module(f1).params
    p3 = ParamStore.from_module(f3).params
    params_equal = all(torch.equal(p1[k], p3[k]) for k in p1)
    resumed_equal = r3.rows == r1.rows
    ok = curves_equal and params_equal and resumed_equal
    criterion(8, ok, (
        f"two seeded runs: 1000-iteration loss curves bitwise equal: {curves_equal}; "
        f"resume from iteration 500: parameters at 1000 bitwise equal: {params_equal}, "
        f"loss rows equal: {resumed_equal}"
    ))
    assert ok
