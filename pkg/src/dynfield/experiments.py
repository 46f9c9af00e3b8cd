"""Named fit variants used by the ablation scripts and the acceptance suite."""

from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .enhancer import (
    EnhancerConfig,
    EnhancerNet,
    PatchDiscriminator,
    degrade,
    degrade_triples,
    enhance,
    render_sequences,
    render_triples,
    save_enhancer,
    train_enhancer,
)
from .renderfield import CameraPose, CascadeField
from .scenedata import orbiter_scene
from .trainer import (
    TrainConfig,
    apply_env,
    build_dataset,
    build_provider,
    build_scene,
    evaluate_fit,
    load_field,
    profile_config,
    psnr,
    train,
)

MODES = ("cascade", "coarse", "concat")


def variant_config(profile: str = "desk1", mode: str = "cascade", icl: bool = True,
                   seed: int = 0) -> TrainConfig:
    """``coarse`` keeps only the first plane resolution; ``concat`` shares one head."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    cfg = profile_config(profile, seed=seed, use_icl=icl)
    if mode == "coarse":
        cfg = replace(cfg, model=replace(cfg.model, resolutions=cfg.model.resolutions[:1]))
    elif mode == "concat":
        cfg = replace(cfg, model=replace(cfg.model, mode="concat"))
    return cfg


def run_fit(cfg: TrainConfig, out: Path) -> tuple[dict, CascadeField]:
    """Train, evaluate on held-out views and write config.yaml plus metrics.json."""
    cfg = apply_env(cfg)
    out = Path(out)
    scene = build_scene(cfg)
    ds = build_dataset(cfg, scene)
    provider = build_provider(cfg, scene, ds.camera)
    fld = cfg.model.build(cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump_yaml(out / "config.yaml")
    t0 = time.perf_counter()
    report = train(cfg, ds, fld, provider, out_dir=out)
    metrics = evaluate_fit(fld, scene, cfg.eval)
    metrics["train_seconds"] = report.wall_clock
    metrics["total_seconds"] = time.perf_counter() - t0
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics, fld


def cached_fit(cfg: TrainConfig, out: Path) -> tuple[dict, CascadeField] | None:
    """Previous results in ``out`` if they were produced by exactly this config."""
    out = Path(out)
    try:
        same = TrainConfig.load_yaml(out / "config.yaml") == apply_env(cfg)
        metrics = json.loads((out / "metrics.json").read_text())
        fld = load_field(out / "final.ckpt")
    except (OSError, ValueError, KeyError):
        return None
    return (metrics, fld) if same else None


HELDOUT_CAMERAS = (CameraPose(30.0, 20.0), CameraPose(150.0, 0.0), CameraPose(270.0, 35.0))


def run_enhancer(cfg: EnhancerConfig, out: Path | None = None) -> tuple[dict, EnhancerNet]:
    """Train on random-orbit triples, then score held-out clips from unseen cameras."""
    t0 = time.perf_counter()
    scene = orbiter_scene()
    clean = render_triples(scene, cfg.n_pairs, cfg.frame_size, seed=cfg.seed + 1)
    deg = degrade_triples(clean, np.random.default_rng(cfg.seed), cfg.degrade)
    net = EnhancerNet(cfg.dims, seed=cfg.seed)
    disc = PatchDiscriminator(n_layers=cfg.disc_layers)
    report = train_enhancer(net, disc, deg, clean[:, 1], cfg)
    test_rng = np.random.default_rng(cfg.seed + 99)
    before, after = [], []
    for clip in render_sequences(scene, cfg.n_heldout, cfg.frame_size, list(HELDOUT_CAMERAS)):
        noisy = np.stack([degrade(f, test_rng, cfg.degrade) for f in clip])
        for gt, x, y in zip(clip, noisy, enhance(noisy, net)):
            before.append(psnr(x, gt))
            after.append(psnr(y, gt))
    metrics = {
        "n_heldout": len(before),
        "psnr_degraded": float(np.mean(before)),
        "psnr_enhanced": float(np.mean(after)),
        "gain": float(np.mean(after) - np.mean(before)),
        "final_g_loss": report.g_loss[-1] if report.g_loss else None,
        "seconds": time.perf_counter() - t0,
    }
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        save_enhancer(out / "enhancer.ckpt", net, cfg)
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics, net
