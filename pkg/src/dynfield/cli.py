"""Command-line entry point: ``dynfield <command> ...``."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from .enhancer import enhance, load_enhancer
from .imageio import read_rgb8, write_rgb8
from .renderfield import CameraPose
from .scenedata import SyntheticScene, load_dataset, make_dataset, orbiter_scene, save_dataset
from .trainer import (
    TrainConfig,
    apply_env,
    build_dataset,
    build_provider,
    build_scene,
    evaluate_dirs,
    profile_config,
    render_gt_views,
    render_sequence,
    train,
)


def _read_structured(path) -> dict:
    text = Path(path).read_text()
    return yaml.safe_load(text) or {}


def _camera_manifest(path) -> tuple[list[CameraPose], list[float]]:
    data = _read_structured(path)
    cams = [CameraPose.from_dict(c) for c in data["cameras"]]
    times = [float(t) for t in data["timestamps"]]
    return cams, times


def _scene_from_spec(spec: dict) -> SyntheticScene:
    scene = spec.get("scene", "orbiter")
    if scene == "orbiter":
        return orbiter_scene()
    return SyntheticScene.from_dict(scene)


def cmd_train(args) -> int:
    cfg = TrainConfig.load_yaml(args.config) if args.config else profile_config(args.profile)
    cfg = apply_env(cfg)
    scene = build_scene(cfg)
    ds = load_dataset(args.dataset) if args.dataset else build_dataset(cfg, scene)
    provider = build_provider(cfg, scene, ds.camera)
    fld = cfg.model.build(cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump_yaml(out / "config.yaml")
    report = train(cfg, ds, fld, provider, out_dir=out, resume=args.resume)
    print(json.dumps({"iterations": len(report.rows), "seconds": report.wall_clock,
                      "checkpoint": report.checkpoint}))
    return 0


def cmd_render(args) -> int:
    cams, times = _camera_manifest(args.cameras)
    paths = render_sequence(args.ckpt, cams, times, args.out, args.size, args.samples)
    print(f"wrote {len(paths)} frames to {args.out}")
    return 0


def cmd_render_gt(args) -> int:
    cams, times = _camera_manifest(args.cameras)
    scene = _scene_from_spec(_read_structured(args.spec))
    rgb, _ = render_gt_views(scene, cams, times, args.size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, cam in enumerate(cams):
        for j, t in enumerate(times):
            name = f"view_{i:02d}_t_{j:03d}.png"
            write_rgb8(out / name, rgb[i, j].numpy())
            entries.append({"file": name, "camera": cam.to_dict(), "t": t})
    (out / "manifest.json").write_text(json.dumps({"frames": entries}, indent=2))
    print(f"wrote {len(entries)} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    res = evaluate_dirs(args.pred, args.gt)
    text = json.dumps(res, indent=2)
    if args.json:
        Path(args.json).write_text(text)
    print(json.dumps({"psnr": res["psnr"], "ssim": res["ssim"], "n": len(res["files"])}))
    return 0


def cmd_enhance(args) -> int:
    net = load_enhancer(args.ckpt)
    src = Path(args.inp)
    names = sorted(p.name for p in src.glob("*.png"))
    if not names:
        print(f"no PNG frames in {src}", file=sys.stderr)
        return 2
    frames = np.stack([read_rgb8(src / n) for n in names])
    out_frames = enhance(frames, net)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, f in zip(names, out_frames):
        write_rgb8(out / n, f)
    print(f"enhanced {len(names)} frames into {out}")
    return 0


def cmd_gen_scene(args) -> int:
    spec = _read_structured(args.spec)
    scene = _scene_from_spec(spec)
    cam = CameraPose.from_dict(spec.get("camera", {"azimuth": 0.0, "elevation": 10.0}))
    n = int(spec.get("n_frames", 32))
    w = int(spec.get("width", 64))
    h = int(spec.get("height", w))
    ds = make_dataset(scene, cam, n, w, h, int(spec.get("n_samples", 256)))
    save_dataset(ds, args.out)
    print(f"wrote {n} frames to {args.out} (scene {ds.scene_hash[:12]})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynfield")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a cascade field")
    p.add_argument("--config", help="YAML config; may name a base `profile`")
    p.add_argument("--profile", default="desk1", help="used when --config is absent")
    p.add_argument("--dataset", help="dataset directory; default renders the configured scene")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint at manifest cameras")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cameras", required=True, help="YAML/JSON with `cameras` and `timestamps`")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--samples", type=int, default=64)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("render-gt", help="ground-truth renders of a scene spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(fn=cmd_render_gt)

    p = sub.add_parser("eval", help="PSNR/SSIM between two frame directories")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--json", help="write the full per-view report here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("enhance", help="run a trained enhancer over a frame directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_enhance)

    p = sub.add_parser("gen-scene", help="render a synthetic dataset from a scene spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_scene)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("DYNFIELD_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
