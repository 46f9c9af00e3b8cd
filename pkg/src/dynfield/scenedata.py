"""Procedural animated scenes with analytic density/color, and frame datasets.

Scenes are lists of primitives whose centers move along simple paths and whose
size can pulse over the clip. The analytic field renders through the same
volume renderer as the learned field.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .diffcore import ContractViolation
from .imageio import ImageIOError, quantize8, read_gray8, read_rgb8, write_gray8, write_rgb8
from .renderfield import BOUND_RADIUS, CameraPose, RenderOutput, generate_rays, render

MANIFEST = "manifest.json"


class DatasetError(IOError):
    pass


@dataclass
class Primitive:
    """One animated shape.

    ``path`` is ``static``, ``linear`` (center + t * velocity) or ``arc``
    (circle of ``arc_radius`` around ``center`` in the xy-plane, angle swept
    from ``arc_start`` to ``arc_start + arc_sweep`` degrees, optional z bob).
    With ``color2`` set, color blends linearly along ``gradient_axis`` across
    the primitive.
    """

    kind: str = "sphere"
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    size: tuple[float, float, float] = (0.3, 0.3, 0.3)
    path: str = "static"
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    arc_radius: float = 0.0
    arc_start: float = 0.0
    arc_sweep: float = 0.0
    z_bob: float = 0.0
    pulse: float = 0.0
    pulse_cycles: float = 1.0
    color: tuple[float, float, float] = (0.8, 0.3, 0.2)
    color2: tuple[float, float, float] | None = None
    gradient_axis: tuple[float, float, float] = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "ellipsoid"):
            raise ContractViolation(f"unknown primitive kind {self.kind!r}")
        if self.path not in ("static", "linear", "arc"):
            raise ContractViolation(f"unknown path {self.path!r}")
        if isinstance(self.size, (int, float)):
            self.size = (float(self.size),) * 3
        for c in (self.color, self.color2 or self.color):
            if min(c) < 0 or max(c) > 1:
                raise ContractViolation(f"color {c} outside [0, 1]")

    def center_at(self, t: Tensor) -> Tensor:
        c = torch.tensor(self.center, dtype=t.dtype)
        if self.path == "static":
            return c.expand(t.shape + (3,))
        if self.path == "linear":
            return c + t[..., None] * torch.tensor(self.velocity, dtype=t.dtype)
        ang = torch.deg2rad(torch.as_tensor(self.arc_start, dtype=t.dtype) + self.arc_sweep * t)
        off = torch.stack(
            [self.arc_radius * torch.cos(ang), self.arc_radius * torch.sin(ang),
             self.z_bob * torch.sin(2 * math.pi * t)], dim=-1)
        return c + off

    def scale_at(self, t: Tensor) -> Tensor:
        return 1.0 + self.pulse * torch.sin(2 * math.pi * self.pulse_cycles * t)

    def extent(self) -> float:
        """Upper bound of |point| over the primitive for all t."""
        ts = torch.linspace(0, 1, 257, dtype=torch.float64)
        c = self.center_at(ts).norm(dim=-1).max().item()
        r = max(self.size) * (1.0 + abs(self.pulse))
        if self.kind == "box":
            r *= math.sqrt(3.0)
        return c + r


@dataclass
class SyntheticScene:
    primitives: list[Primitive] = field(default_factory=list)
    max_density: float = 60.0
    edge_width: float = 0.05

    n_levels = 1

    def __post_init__(self):
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives]
        for p in self.primitives:
            if p.extent() + self.edge_width / 2 > BOUND_RADIUS:
                raise ContractViolation("primitive leaves the unit bounding sphere")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        d = dict(d)
        d["primitives"] = [Primitive(**_tuplify(p)) for p in d.get("primitives", [])]
        return cls(**d)

    def spec_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def rotated(self, degrees: float) -> "SyntheticScene":
        """The same scene rotated about the world z axis."""
        a = math.radians(degrees)
        ca, sa = math.cos(a), math.sin(a)

        def rot(v):
            return (ca * v[0] - sa * v[1], sa * v[0] + ca * v[1], v[2])

        prims = []
        for p in self.primitives:
            d = asdict(p)
            d["center"] = rot(p.center)
            d["velocity"] = rot(p.velocity)
            d["gradient_axis"] = rot(p.gradient_axis)
            d["arc_start"] = p.arc_start + degrees
            if p.kind != "sphere":
                if degrees % 90.0 != 0:
                    raise ContractViolation("boxes and ellipsoids rotate only in 90 degree steps")
                if (degrees // 90) % 2 == 1:
                    d["size"] = (p.size[1], p.size[0], p.size[2])
            prims.append(Primitive(**_tuplify(d)))
        return SyntheticScene(prims, self.max_density, self.edge_width)

    def _indicators(self, points: Tensor, t: Tensor) -> list[tuple[Tensor, Tensor]]:
        out = []
        w = self.edge_width
        for p in self.primitives:
            c = p.center_at(t)
            size = torch.tensor(p.size, dtype=points.dtype) * p.scale_at(t)[..., None]
            local = points - c
            if p.kind == "sphere":
                sd = local.norm(dim=-1) - size[..., 0]
            elif p.kind == "ellipsoid":
                k = (local / size).norm(dim=-1)
                sd = (k - 1.0) * size.min(dim=-1).values
            else:
                q = local.abs() - size
                sd = q.clamp_min(0).norm(dim=-1) + q.max(dim=-1).values.clamp_max(0)
            u = ((w / 2 - sd) / w).clamp(0.0, 1.0)
            ind = u * u * (3.0 - 2.0 * u)
            col = torch.tensor(p.color, dtype=points.dtype).expand(points.shape)
            if p.color2 is not None:
                axis = torch.tensor(p.gradient_axis, dtype=points.dtype)
                axis = axis / axis.norm()
                s = ((local * axis).sum(-1) / size.max(dim=-1).values).clamp(-1, 1) * 0.5 + 0.5
                col2 = torch.tensor(p.color2, dtype=points.dtype)
                col = col + s[..., None] * (col2 - col)
            out.append((ind, col))
        return out

    def query(self, points: Tensor, t: Tensor) -> tuple[Tensor, Tensor]:
        """Color (P, 3) and density (P,) at points (P, 3), times (P,)."""
        t = torch.as_tensor(t, dtype=points.dtype).expand(points.shape[:-1])
        parts = self._indicators(points, t)
        if not parts:
            return torch.zeros_like(points), torch.zeros(points.shape[:-1], dtype=points.dtype)
        empty = torch.ones(points.shape[:-1], dtype=points.dtype)
        wsum = torch.zeros_like(empty)
        csum = torch.zeros_like(points)
        for ind, col in parts:
            empty = empty * (1.0 - ind)
            wsum = wsum + ind
            csum = csum + ind[..., None] * col
        density = self.max_density * (1.0 - empty)
        color = csum / wsum.clamp_min(1e-12)[..., None]
        return color, density

    def levels(self, points: Tensor, t: Tensor) -> list[tuple[Tensor, Tensor]]:
        c, d = self.query(points, t)
        return [(c, d)]

    def density(self, points: Tensor, t: Tensor) -> Tensor:
        return self.query(points, t)[1]


def _tuplify(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        out[k] = tuple(v) if isinstance(v, list) else v
    return out


def orbiter_scene() -> SyntheticScene:
    """A red-to-blue sphere sweeping an arc while its radius pulses by 20%."""
    return SyntheticScene(
        [
            Primitive(
                kind="sphere",
                center=(0.0, 0.0, 0.0),
                size=(0.42, 0.42, 0.42),
                path="arc",
                arc_radius=0.25,
                arc_start=-60.0,
                arc_sweep=120.0,
                z_bob=0.08,
                pulse=0.2,
                pulse_cycles=1.0,
                color=(0.9, 0.35, 0.1),
                color2=(0.1, 0.3, 0.9),
                gradient_axis=(1.0, 1.0, 0.5),
            )
        ]
    )


def empty_scene() -> SyntheticScene:
    return SyntheticScene([])


def scene_field(scene: SyntheticScene, p4: Tensor) -> tuple[Tensor, Tensor]:
    """Color and density at (..., 4) points (x, y, z, t)."""
    return scene.query(p4[..., :3], p4[..., 3])


def render_gt(
    scene: SyntheticScene,
    camera: CameraPose,
    t: float,
    width: int,
    height: int,
    n_samples: int = 256,
    background=1.0,
    dtype: torch.dtype = torch.float64,
) -> RenderOutput:
    o, d = generate_rays(camera, width, height, dtype=dtype)
    with torch.no_grad():
        return render(scene, o, d, t, n_samples=n_samples, scale=1, background=background)


@dataclass
class Dataset:
    frames: np.ndarray  # (N, H, W, 3) float32, 8-bit quantized
    masks: np.ndarray  # (N, H, W) float32 in {0, 1}
    camera: CameraPose
    timestamps: np.ndarray  # (N,)
    scene_hash: str = ""

    def __post_init__(self):
        if len(self.frames) < 2:
            raise ContractViolation("a dataset needs at least 2 frames")
        if self.frames.shape[:3] != self.masks.shape:
            raise ContractViolation("masks do not align with frames")

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[2], self.frames.shape[1]


def frame_times(n: int) -> np.ndarray:
    """Frame index normalized over [0, 1]."""
    return np.arange(n, dtype=np.float64) / (n - 1)


def make_dataset(
    scene: SyntheticScene,
    camera: CameraPose,
    n_frames: int = 32,
    width: int = 64,
    height: int = 64,
    n_samples: int = 256,
) -> Dataset:
    if n_frames < 2:
        raise ContractViolation("need at least 2 frames")
    times = frame_times(n_frames)
    frames, masks = [], []
    for t in times:
        out = render_gt(scene, camera, float(t), width, height, n_samples)
        frames.append(quantize8(out.rgb.numpy()))
        masks.append((out.opacity.numpy() > 0.5).astype(np.float32))
    return Dataset(np.stack(frames), np.stack(masks), camera, times, scene.spec_hash())


def save_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(ds.n_frames):
        write_rgb8(directory / f"frame_{k:04d}.png", ds.frames[k])
        write_gray8(directory / f"mask_{k:04d}.png", ds.masks[k])
    w, h = ds.resolution
    manifest = {
        "camera": ds.camera.to_dict(),
        "n_frames": ds.n_frames,
        "width": w,
        "height": h,
        "timestamps": [float(t) for t in ds.timestamps],
        "scene_hash": ds.scene_hash,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2))
    return directory


def _indices(directory: Path, prefix: str) -> dict[int, Path]:
    pat = re.compile(rf"^{prefix}_(\d{{4}})\.png$")
    found = {}
    for p in directory.iterdir():
        m = pat.match(p.name)
        if m:
            found[int(m.group(1))] = p
    return found


def load_dataset(directory) -> Dataset:
    """Load ``frame_%04d.png`` / ``mask_%04d.png`` plus the manifest, validating everything."""
    directory = Path(directory)
    mpath = directory / MANIFEST
    if not mpath.exists():
        raise DatasetError(f"no {MANIFEST} in {directory}")
    manifest = json.loads(mpath.read_text())
    n = int(manifest["n_frames"])
    frames_idx = _indices(directory, "frame")
    masks_idx = _indices(directory, "mask")
    expected = set(range(n))
    problems = []
    for label, found in (("frame", frames_idx), ("mask", masks_idx)):
        missing = sorted(expected - set(found))
        extra = sorted(set(found) - expected)
        if missing:
            problems.append(f"missing {label} indices {missing}")
        if extra:
            problems.append(f"unexpected {label} indices {extra}")
    if problems:
        raise DatasetError(f"{directory}: " + "; ".join(problems))
    frames, masks = [], []
    for k in range(n):
        try:
            f = read_rgb8(frames_idx[k])
            m = read_gray8(masks_idx[k])
        except ImageIOError as exc:
            raise DatasetError(str(exc)) from exc
        if f.shape[:2] != m.shape:
            raise DatasetError(f"mask {k} is {m.shape}, frame is {f.shape[:2]}")
        if frames and f.shape != frames[0].shape:
            raise DatasetError(f"frame {k} has size {f.shape[:2]}, expected {frames[0].shape[:2]}")
        frames.append(f)
        masks.append((m > 0.5).astype(np.float32))
    times = np.asarray(manifest.get("timestamps") or frame_times(n), dtype=np.float64)
    return Dataset(
        np.stack(frames), np.stack(masks), CameraPose.from_dict(manifest["camera"]), times,
        manifest.get("scene_hash", ""),
    )
