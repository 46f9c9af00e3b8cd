"""Two-stage fitting of a cascade field to a monocular clip, plus evaluation."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from skimage.metrics import structural_similarity
from torch import Tensor

from .consistency import icl_loss, make_interpolator, sample_spatial_batch, sample_temporal_batch
from .diffcore import (
    DENSE_GROUP,
    GRID_GROUP,
    AdamState,
    ContractViolation,
    NumericFailure,
    ParamStore,
    adam_step,
    backward,
    load_checkpoint,
    save_checkpoint,
)
from .guidance import (
    GuidanceContext,
    make_provider,
    NoiseSchedule,
    ScoreProvider,
    annealed_range,
    sample_timestep,
    sds_grad,
    sds_surrogate,
)
from .hexplane import PlaneResolution, TEST_PROFILE, FULL_PROFILE
from .imageio import read_rgb8, write_rgb8
from .losses import COMPONENTS, LossWeights, mask_loss, normal_smooth_loss, orientation_loss
from .losses import recon_loss, total_loss
from .renderfield import CameraPose, CascadeField, RenderOutput, compute_normals, generate_rays
from .renderfield import render
from .scenedata import Dataset, SyntheticScene, make_dataset, orbiter_scene, render_gt

PSNR_CAP = 99.0


@dataclass
class StageConfig:
    iterations: int
    batch: int
    resolution: int
    n_samples: int = 64
    icl: bool = False
    icl_resolution: int | None = None

    def __post_init__(self):
        if self.iterations < 0 or self.batch < 1 or self.resolution < 2:
            raise ContractViolation(f"bad stage {self}")


@dataclass
class FieldConfig:
    mode: str = "cascade"
    resolutions: list = field(default_factory=lambda: [[r.spatial, r.temporal] for r in TEST_PROFILE])
    features: int = 16
    hidden: int = 64
    n_hidden: int = 2
    density_bias: float = -1.0

    def planes(self) -> list[PlaneResolution]:
        return [PlaneResolution(int(s), int(t)) for s, t in self.resolutions]

    def build(self, seed: int, dtype=torch.float32) -> CascadeField:
        return CascadeField(
            self.planes(), self.features, self.mode, self.hidden, self.n_hidden,
            self.density_bias, seed=seed, dtype=dtype,
        )


@dataclass
class EvalConfig:
    cameras: list = field(default_factory=lambda: [
        {"azimuth": a, "elevation": 15.0} for a in (45.0, 135.0, 225.0, 315.0)
    ])
    n_timestamps: int = 8
    resolution: int = 96
    n_samples: int = 64
    flicker_camera: dict = field(default_factory=lambda: {"azimuth": 45.0, "elevation": 15.0})
    flicker_timestamps: int = 16

    def camera_poses(self) -> list[CameraPose]:
        return [CameraPose.from_dict(c) for c in self.cameras]

    def timestamps(self) -> list[float]:
        n = self.n_timestamps
        return [k / (n - 1) for k in range(n)] if n > 1 else [0.0]


@dataclass
class TrainConfig:
    stages: list = field(default_factory=lambda: [
        StageConfig(2000, 4, 48, 64, icl=True), StageConfig(1000, 1, 96, 64)
    ])
    model: FieldConfig = field(default_factory=FieldConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    use_icl: bool = True
    icl_prob: float = 0.25
    icl_frames: int = 4
    icl_interval: tuple = (5.0, 15.0)
    icl_squared: bool = False
    icl_reduction: str = "sum"
    provider: str = "oracle_view"
    provider_options: dict = field(default_factory=lambda: {"n_samples": 128, "dtype": "float32"})
    interpolator: str = "linear"
    interpolator_command: list | None = None
    weights: str = "standard"
    weight_overrides: dict = field(default_factory=dict)
    lr_grid: float = 0.1
    lr_dense: float = 1e-3
    azimuth_range: tuple = (0.0, 360.0)
    elevation_range: tuple = (-10.0, 45.0)
    tau_start: tuple = (0.02, 0.98)
    tau_end: tuple = (0.02, 0.5)
    background: str = "random"
    reg_points: int = 1024
    normal_h: float = 0.01
    checkpoint_every: int = 0
    scene: str = "orbiter"
    dataset_frames: int = 32
    dataset_resolution: int = 64
    input_camera: dict = field(default_factory=lambda: {"azimuth": 0.0, "elevation": 10.0})

    def __post_init__(self):
        self.stages = [s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.stages]
        if isinstance(self.model, dict):
            self.model = FieldConfig(**self.model)
        if isinstance(self.eval, dict):
            self.eval = EvalConfig(**self.eval)
        for name in ("icl_interval", "azimuth_range", "elevation_range", "tau_start", "tau_end"):
            setattr(self, name, tuple(getattr(self, name)))
        if not 0.0 <= self.icl_prob <= 1.0:
            raise ContractViolation("ICL probability must lie in [0, 1]")
        if self.icl_reduction not in ("sum", "mean"):
            raise ContractViolation(f"unknown ICL reduction {self.icl_reduction!r}")
        if self.background not in ("random", "white"):
            raise ContractViolation(f"unknown background policy {self.background!r}")

    @property
    def total_iterations(self) -> int:
        return sum(s.iterations for s in self.stages)

    def loss_weights(self) -> LossWeights:
        return replace(LossWeights.preset(self.weights), **self.weight_overrides)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def dump_yaml(self, path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def load_yaml(cls, path) -> "TrainConfig":
        data = yaml.safe_load(Path(path).read_text()) or {}
        profile = data.pop("profile", None)
        base = profile_config(profile).to_dict() if profile else {}
        for k, v in data.items():
            if isinstance(v, dict) and isinstance(base.get(k), dict):
                base[k] = {**base[k], **v}
            else:
                base[k] = v
        return cls.from_dict(base)


def profile_config(name: str, **overrides) -> TrainConfig:
    """Named configurations.

    ``full``: 5000 + 5000 iterations at 64 and 256 px with the large planes.
    ``desk``: 2000 + 1000 iterations at 48 and 96 px, batch 4 then 1, per-pixel MSE ICL.
    ``desk1``: the desk iteration counts with renders sized for a single CPU core.
    ``tiny``: a few-second configuration for tests.
    """
    if name == "full":
        cfg = TrainConfig(
            stages=[StageConfig(5000, 4, 64, 64, icl=True), StageConfig(5000, 1, 256, 64)],
            model=FieldConfig(resolutions=[[r.spatial, r.temporal] for r in FULL_PROFILE]),
            eval=EvalConfig(resolution=256),
        )
    elif name == "desk":
        cfg = TrainConfig(icl_squared=True, icl_reduction="mean")
    elif name == "desk1":
        cfg = TrainConfig(
            stages=[
                StageConfig(2000, 1, 24, 32, icl=True, icl_resolution=16),
                StageConfig(1000, 1, 32, 32),
            ],
            model=FieldConfig(hidden=32),
            eval=EvalConfig(resolution=32),
            reg_points=256,
            provider_options={"n_samples": 64, "dtype": "float32"},
            icl_squared=True,
            icl_reduction="mean",
        )
    elif name == "tiny":
        cfg = TrainConfig(
            stages=[StageConfig(6, 1, 8, 8, icl=True, icl_resolution=6), StageConfig(4, 1, 10, 8)],
            model=FieldConfig(resolutions=[[4, 3], [6, 4]], features=4, hidden=8, n_hidden=1),
            eval=EvalConfig(resolution=12, n_samples=16, n_timestamps=3, flicker_timestamps=4),
            reg_points=16,
            dataset_frames=6,
            dataset_resolution=16,
            provider_options={"n_samples": 32, "dtype": "float32"},
        )
    else:
        raise ContractViolation(f"unknown profile {name!r}")
    return replace(cfg, **overrides) if overrides else cfg


def apply_env(cfg: TrainConfig) -> TrainConfig:
    """DYNFIELD_SEED overrides the seed; DYNFIELD_THREADS sets torch threads."""
    threads = os.environ.get("DYNFIELD_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    seed = os.environ.get("DYNFIELD_SEED")
    return replace(cfg, seed=int(seed)) if seed else cfg


SCENES = {"orbiter": orbiter_scene}


def build_scene(cfg: TrainConfig) -> SyntheticScene:
    if cfg.scene in SCENES:
        return SCENES[cfg.scene]()
    path = Path(cfg.scene)
    if path.exists():
        return SyntheticScene.from_dict(json.loads(path.read_text()))
    raise ContractViolation(f"unknown scene {cfg.scene!r}")


def build_dataset(cfg: TrainConfig, scene: SyntheticScene) -> Dataset:
    cam = CameraPose.from_dict(cfg.input_camera)
    r = cfg.dataset_resolution
    return make_dataset(scene, cam, cfg.dataset_frames, r, r)


def build_provider(cfg: TrainConfig, scene: SyntheticScene, camera: CameraPose) -> ScoreProvider:
    opts = dict(cfg.provider_options)
    if isinstance(opts.get("dtype"), str):
        opts["dtype"] = getattr(torch, opts["dtype"])
    if cfg.provider == "oracle_view":
        return make_provider("oracle_view", scene=scene, input_camera=camera, options=opts)
    if cfg.provider == "external":
        return make_provider("external", command=opts["command"], timeout=opts.get("timeout", 60.0))
    raise ContractViolation(f"provider {cfg.provider!r} cannot be built from a config")


@dataclass
class TrainReport:
    rows: list = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None
    metrics: dict = field(default_factory=dict)

    def write_csv(self, path) -> Path:
        path = Path(path)
        cols = ["iteration", "stage", "kind", "icl_batch", *COMPONENTS, "total"]
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({c: r.get(c, "") for c in cols})
        return path

    def loss_curve(self) -> list[float]:
        return [r["total"] for r in self.rows]


def resize_frames(frames: Tensor, size: int) -> Tensor:
    """Area-resample (N, H, W, C) frames to size x size."""
    if frames.shape[1] == size and frames.shape[2] == size:
        return frames
    x = frames.permute(0, 3, 1, 2)
    return F.interpolate(x, size=(size, size), mode="area").permute(0, 2, 3, 1).contiguous()


def field_store(fld: CascadeField) -> ParamStore:
    return ParamStore.from_module(fld)


def _rand(gen: torch.Generator, lo: float = 0.0, hi: float = 1.0) -> float:
    return lo + (hi - lo) * float(torch.rand((), generator=gen, dtype=torch.float64))


def icl_fires(gen: torch.Generator, prob: float) -> bool:
    return _rand(gen) < prob


class _Run:
    """Mutable state of one training run."""

    def __init__(self, cfg, dataset, fld, provider, interpolator, out_dir):
        self.cfg = cfg
        self.fld = fld
        self.provider = provider
        self.interp = interpolator or make_interpolator(
            cfg.interpolator, command=cfg.interpolator_command
        )
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.store = field_store(fld)
        self.adam = AdamState(lr={GRID_GROUP: cfg.lr_grid, DENSE_GROUP: cfg.lr_dense})
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.schedule = NoiseSchedule()
        self.weights = cfg.loss_weights()
        self.dataset = dataset
        self.camera = dataset.camera
        self.times = [float(t) for t in dataset.timestamps]
        self.frames = torch.as_tensor(dataset.frames, dtype=torch.float32)
        self.masks = torch.as_tensor(dataset.masks, dtype=torch.float32)
        self._resized: dict[int, tuple[Tensor, Tensor]] = {}
        self.rows: list[dict] = []
        self.iteration = 0

    def targets(self, size: int) -> tuple[Tensor, Tensor]:
        if size not in self._resized:
            f = resize_frames(self.frames, size)
            m = resize_frames(self.masks[..., None], size)[..., 0]
            self._resized[size] = (f, m)
        return self._resized[size]

    def stage_of(self, it: int) -> tuple[int, StageConfig]:
        acc = 0
        for k, s in enumerate(self.cfg.stages):
            acc += s.iterations
            if it < acc:
                return k, s
        raise ContractViolation(f"iteration {it} past the end of training")

    def background(self) -> float:
        return _rand(self.gen) if self.cfg.background == "random" else 1.0

    def novel_camera(self) -> CameraPose:
        az = _rand(self.gen, *self.cfg.azimuth_range) % 360.0
        el = _rand(self.gen, *self.cfg.elevation_range)
        return replace(self.camera, azimuth=az, elevation=el)

    def random_time_index(self) -> int:
        return int(torch.randint(0, len(self.times), (1,), generator=self.gen).item())

    def render_view(self, cam: CameraPose, t, size: int, n_samples: int, bg) -> list[RenderOutput]:
        o, d = generate_rays(cam, size, size)
        return render(self.fld, o, d, t, n_samples=n_samples, background=bg, generator=self.gen)

    def regularizers(self, outs: list[RenderOutput], cam: CameraPose, t: float, size: int):
        """Normal-smooth and orientation terms on weight-sampled points of the finest level."""
        out = outs[-1]
        w = out.weights.reshape(-1)
        total_w = float(w.detach().sum())
        k = self.cfg.reg_points
        if not math.isfinite(total_w):
            raise NumericFailure(f"render weights are not finite at iteration {self.iteration}")
        if k <= 0 or total_w <= 1e-6:
            return None, None
        idx = torch.multinomial(w.detach() / total_w, k, replacement=True, generator=self.gen)
        o, d = generate_rays(cam, size, size)
        n_s = out.t_vals.shape[-1]
        dirs = d.reshape(-1, 3).repeat_interleave(n_s, dim=0)[idx]
        pts = (o.reshape(-1, 3).repeat_interleave(n_s, dim=0)[idx]
               + dirs * out.t_vals.reshape(-1)[idx, None].detach())
        tt = torch.full((k,), float(t))
        normals, valid = compute_normals(self.fld, pts, tt)
        # importance-sampled estimate of the sum over all samples, per ray
        ws = w[idx]
        scale = total_w / (k * ws.detach().clamp_min(1e-12))
        orient = orientation_loss(ws * scale, normals, dirs, valid) / (size * size)
        smooth = normal_smooth_loss(self.fld, pts, tt, h=self.cfg.normal_h, generator=self.gen)
        return orient, smooth

    def sds_terms(self, stage: StageConfig, it: int, bg: float):
        lo, hi = annealed_range(it, self.cfg.total_iterations, self.cfg.tau_start, self.cfg.tau_end)
        total = None
        reg_view = None
        for _ in range(stage.batch):
            cam = self.novel_camera()
            t = self.times[self.random_time_index()]
            outs = self.render_view(cam, t, stage.resolution, stage.n_samples, bg)
            tau = sample_timestep(self.gen, lo, hi, self.schedule)
            eps = torch.randn(outs[0].rgb.shape, generator=self.gen)
            ctx = GuidanceContext(None, cam.relative_to(self.camera), t, bg)
            for out in outs:
                g = sds_grad(out.rgb, self.provider, ctx, tau, eps, self.schedule)
                s = sds_surrogate(out.rgb, g)
                total = s if total is None else total + s
            reg_view = reg_view or (outs, cam, t)
        return {"sds": total / stage.batch}, reg_view

    def recon_terms(self, stage: StageConfig, bg: float):
        frames, masks = self.targets(stage.resolution)
        rec = msk = None
        reg_view = None
        for _ in range(stage.batch):
            k = self.random_time_index()
            t = self.times[k]
            outs = self.render_view(self.camera, t, stage.resolution, stage.n_samples, bg)
            for out in outs:
                r = recon_loss(out.rgb, frames[k], masks[k], bg)
                m = mask_loss(out.opacity, masks[k])
                rec = r if rec is None else rec + r
                msk = m if msk is None else msk + m
            reg_view = reg_view or (outs, self.camera, t)
        return {"rec": rec / stage.batch, "mask": msk / stage.batch}, reg_view

    def icl_terms(self, stage: StageConfig, bg: float):
        size = stage.icl_resolution or stage.resolution
        spatial = _rand(self.gen) < 0.5
        base = self.novel_camera()
        if spatial:
            cams = sample_spatial_batch(self.gen, base, self.cfg.icl_frames, self.cfg.icl_interval)
            t = self.times[self.random_time_index()]
            views = [(c, t) for c in cams]
        else:
            idx = sample_temporal_batch(self.gen, self.cfg.icl_frames, len(self.times))
            views = [(base, self.times[i]) for i in idx]
        per_level = None
        for cam, t in views:
            outs = self.render_view(cam, t, size, stage.n_samples, bg)
            rgbs = [o.rgb for o in outs]
            per_level = [[r] for r in rgbs] if per_level is None else [
                acc + [r] for acc, r in zip(per_level, rgbs)
            ]
        total = None
        for frames in per_level:
            v = icl_loss(torch.stack(frames), self.interp, squared=self.cfg.icl_squared,
                         reduction=self.cfg.icl_reduction)
            total = v if total is None else total + v
        return total, "spatial" if spatial else "temporal"

    def step(self) -> dict:
        it = self.iteration
        k, stage = self.stage_of(it)
        bg = self.background()
        if it % 2 == 0:
            kind = "sds"
            comps, reg_view = self.sds_terms(stage, it, bg)
        else:
            kind = "recon"
            comps, reg_view = self.recon_terms(stage, bg)
        icl_kind = ""
        if self.cfg.use_icl and stage.icl and icl_fires(self.gen, self.cfg.icl_prob):
            comps["icl"], icl_kind = self.icl_terms(stage, bg)
        orient, smooth = self.regularizers(*reg_view, stage.resolution)
        if orient is not None:
            comps["orient"] = orient
            comps["normal"] = smooth
        for name, v in comps.items():
            if not torch.isfinite(v.detach()).all():
                raise NumericFailure(f"loss component {name!r} is not finite at iteration {it}")
        loss = total_loss(comps, self.weights, it)
        grads = backward(loss, self.store)
        adam_step(self.store, self.adam, grads)
        row = {"iteration": it, "stage": k, "kind": kind, "icl_batch": icl_kind}
        for c in COMPONENTS:
            row[c] = float(comps[c].detach()) if c in comps else 0.0
        row["total"] = float(loss.detach())
        self.iteration += 1
        return row

    def extra(self) -> dict:
        return {
            "iteration": self.iteration,
            "config": self.cfg.to_dict(),
            "field": self.fld.config(),
            "rows": self.rows,
        }

    def save(self, path) -> Path:
        return save_checkpoint(path, self.store, self.adam, self.gen, self.extra())

    def restore(self, path) -> None:
        ck = load_checkpoint(path)
        self.store.load_state_dict(ck["params"])
        self.adam = ck["adam"]
        self.gen.set_state(ck["generator"])
        self.iteration = int(ck["extra"]["iteration"])
        self.rows = list(ck["extra"]["rows"])

    def snapshot(self, err: Exception) -> Path | None:
        if self.out_dir is None:
            return None
        snap = self.out_dir / "nan_snapshot"
        snap.mkdir(parents=True, exist_ok=True)
        self.save(snap / "state.ckpt")
        (snap / "error.json").write_text(json.dumps(
            {"iteration": self.iteration, "error": str(err), "last_rows": self.rows[-5:]}, indent=2
        ))
        return snap


def train(
    config: TrainConfig,
    dataset: Dataset,
    fld: CascadeField,
    provider: ScoreProvider,
    interpolator=None,
    out_dir=None,
    resume=None,
    stop_at: int | None = None,
) -> TrainReport:
    """Run the configured stages on ``fld`` in place.

    ``resume`` continues from a checkpoint written by this function.
    ``stop_at`` ends early after that many total iterations (and checkpoints).
    """
    run = _Run(config, dataset, fld, provider, interpolator, out_dir)
    if resume is not None:
        run.restore(resume)
    if run.out_dir is not None:
        run.out_dir.mkdir(parents=True, exist_ok=True)
    end = config.total_iterations if stop_at is None else min(stop_at, config.total_iterations)
    start = time.perf_counter()
    ckpt_path = None
    while run.iteration < end:
        try:
            row = run.step()
        except NumericFailure as err:
            snap = run.snapshot(err)
            raise NumericFailure(f"{err} (diagnostic snapshot: {snap})") from err
        run.rows.append(row)
        every = config.checkpoint_every
        if run.out_dir is not None and every and run.iteration % every == 0:
            ckpt_path = _write_ckpt(run, run.out_dir / f"iter_{run.iteration:06d}.ckpt")
    report = TrainReport(rows=run.rows, wall_clock=time.perf_counter() - start)
    if run.out_dir is not None:
        ckpt_path = _write_ckpt(run, run.out_dir / "final.ckpt")
        report.write_csv(run.out_dir / "train_log.csv")
    report.checkpoint = str(ckpt_path) if ckpt_path else None
    return report


def _write_ckpt(run: _Run, path: Path) -> Path:
    try:
        return run.save(path)
    except OSError as err:
        raise OSError(f"checkpoint write failed at iteration {run.iteration}: {err}") from err


def load_field(checkpoint) -> CascadeField:
    ck = load_checkpoint(checkpoint)
    fld = CascadeField.from_config(ck["extra"]["field"])
    ParamStore.from_module(fld).load_state_dict(ck["params"])
    return fld


@torch.no_grad()
def render_views(
    fld: CascadeField,
    cameras: Sequence[CameraPose],
    timestamps: Sequence[float],
    size: int,
    n_samples: int = 64,
    scale: int | None = None,
    background: float = 1.0,
) -> tuple[Tensor, Tensor]:
    """Deterministic midpoint renders; returns rgb (C, T, H, W, 3) and opacity (C, T, H, W)."""
    for t in timestamps:
        if not 0.0 <= float(t) <= 1.0:
            raise ContractViolation(f"timestamp {t} outside [0, 1]")
    scale = scale or fld.n_levels
    rgbs, alphas = [], []
    for cam in cameras:
        o, d = generate_rays(cam, size, size)
        row_rgb, row_a = [], []
        for t in timestamps:
            out = render(fld, o, d, float(t), n_samples=n_samples, scale=scale, background=background)
            row_rgb.append(out.rgb)
            row_a.append(out.opacity)
        rgbs.append(torch.stack(row_rgb))
        alphas.append(torch.stack(row_a))
    return torch.stack(rgbs), torch.stack(alphas)


def render_sequence(
    checkpoint,
    cameras: Sequence[CameraPose],
    timestamps: Sequence[float],
    out_dir,
    size: int = 64,
    n_samples: int = 64,
) -> list[Path]:
    """One PNG per (camera, timestamp) plus a manifest.json describing them."""
    fld = load_field(checkpoint)
    rgb, _ = render_views(fld, cameras, timestamps, size, n_samples)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths, entries = [], []
    for i, cam in enumerate(cameras):
        for j, t in enumerate(timestamps):
            name = f"view_{i:02d}_t_{j:03d}.png"
            paths.append(write_rgb8(out_dir / name, rgb[i, j].numpy()))
            entries.append({"file": name, "camera": cam.to_dict(), "t": float(t)})
    (out_dir / "manifest.json").write_text(json.dumps({"frames": entries}, indent=2))
    return paths


def render_gt_views(
    scene: SyntheticScene, cameras, timestamps, size: int, n_samples: int = 256
) -> tuple[Tensor, Tensor]:
    rgbs, alphas = [], []
    for cam in cameras:
        outs = [render_gt(scene, cam, float(t), size, size, n_samples) for t in timestamps]
        rgbs.append(torch.stack([o.rgb.float() for o in outs]))
        alphas.append(torch.stack([o.opacity.float() for o in outs]))
    return torch.stack(rgbs), torch.stack(alphas)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(gt, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """SSIM with an 11-tap Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    return float(structural_similarity(
        pred, gt, data_range=1.0, channel_axis=-1 if pred.ndim == 3 else None,
        gaussian_weights=True, sigma=1.5, use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


def evaluate(pred: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> dict:
    """Per-view PSNR/SSIM and their averages for aligned frame lists."""
    if len(pred) != len(gt):
        raise ContractViolation(f"{len(pred)} predicted frames vs {len(gt)} ground-truth frames")
    per_view = []
    for p, g in zip(pred, gt):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise ContractViolation(f"frame shapes differ: {p.shape} vs {g.shape}")
        per_view.append({"psnr": psnr(p, g), "ssim": ssim(p, g)})
    return {
        "per_view": per_view,
        "psnr": float(np.mean([v["psnr"] for v in per_view])) if per_view else float("nan"),
        "ssim": float(np.mean([v["ssim"] for v in per_view])) if per_view else float("nan"),
    }


def evaluate_dirs(pred_dir, gt_dir) -> dict:
    """Evaluate two directories of PNGs aligned by file name via pred_dir/manifest.json."""
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    manifest = pred_dir / "manifest.json"
    if manifest.exists():
        names = [e["file"] for e in json.loads(manifest.read_text())["frames"]]
    else:
        names = sorted(p.name for p in pred_dir.glob("*.png"))
    missing = [n for n in names if not (gt_dir / n).exists()]
    if missing:
        raise ContractViolation(f"ground truth lacks {missing}")
    res = evaluate([read_rgb8(pred_dir / n) for n in names], [read_rgb8(gt_dir / n) for n in names])
    res["files"] = names
    return res


def flicker(frames: Tensor, masks: Tensor) -> float:
    """Mean |x_{k+1} - x_k| over pixels inside either frame's mask, averaged over pairs."""
    if frames.shape[0] < 2:
        raise ContractViolation("flicker needs at least two frames")
    vals = []
    for k in range(frames.shape[0] - 1):
        m = (masks[k] > 0.5) | (masks[k + 1] > 0.5)
        if not m.any():
            continue
        diff = (frames[k + 1] - frames[k]).abs().mean(-1)
        vals.append(float(diff[m].mean()))
    return float(np.mean(vals)) if vals else 0.0


def mask_iou(pred_alpha: Tensor, gt_alpha: Tensor) -> float:
    """IoU of opacity > 0.5 masks, pooled over every pixel of every view."""
    p = pred_alpha > 0.5
    g = gt_alpha > 0.5
    union = int((p | g).sum())
    return 1.0 if union == 0 else int((p & g).sum()) / union


def evaluate_fit(
    fld: CascadeField, scene: SyntheticScene, cfg: EvalConfig, scale: int | None = None
) -> dict:
    """Held-out PSNR/SSIM/IoU over the eval grid and flicker along the fixed camera."""
    cams = cfg.camera_poses()
    ts = cfg.timestamps()
    pred_rgb, pred_a = render_views(fld, cams, ts, cfg.resolution, cfg.n_samples, scale)
    gt_rgb, gt_a = render_gt_views(scene, cams, ts, cfg.resolution)
    flat = lambda x: [v.numpy() for v in x.reshape(-1, *x.shape[2:])]
    res = evaluate(flat(pred_rgb), flat(gt_rgb))
    res["iou"] = mask_iou(pred_a, gt_a)
    fcam = [CameraPose.from_dict(cfg.flicker_camera)]
    n = cfg.flicker_timestamps
    fts = [k / (n - 1) for k in range(n)]
    f_rgb, _ = render_views(fld, fcam, fts, cfg.resolution, cfg.n_samples, scale)
    g_rgb, g_a = render_gt_views(scene, fcam, fts, cfg.resolution)
    res["flicker"] = flicker(f_rgb[0], g_a[0])
    res["flicker_gt"] = flicker(g_rgb[0], g_a[0])
    res.pop("per_view")
    return res


__all__ = [
    "build_dataset",
    "build_provider",
    "build_scene",
    "EvalConfig",
    "FieldConfig",
    "StageConfig",
    "TrainConfig",
    "TrainReport",
    "apply_env",
    "evaluate",
    "evaluate_dirs",
    "evaluate_fit",
    "field_store",
    "flicker",
    "icl_fires",
    "load_field",
    "mask_iou",
    "profile_config",
    "psnr",
    "render_gt_views",
    "render_sequence",
    "render_views",
    "resize_frames",
    "ssim",
    "train",
]
