"""Cascade field evaluation, orbit cameras and emission-absorption rendering."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .diffcore import ContractViolation
from .hexplane import HexPlaneSet, PlaneResolution, concat_scales

BOUND_RADIUS = 1.0


class Field(Protocol):
    n_levels: int

    def levels(self, points: Tensor, t: Tensor) -> list[tuple[Tensor, Tensor]]:
        """Activated (rgb, sigma) at every level for points (P, 3) and times (P,)."""


class MLPHead(nn.Module):
    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        hidden: int = 64,
        n_hidden: int = 2,
        zero_last: bool = False,
        last_bias: float = 0.0,
    ):
        super().__init__()
        dims = [in_dim] + [hidden] * n_hidden
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1], out_dim)
        with torch.no_grad():
            if zero_last:
                self.out.weight.zero_()
            self.out.bias.fill_(last_bias)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.hidden:
            x = torch.relu(layer(x))
        return self.out(x)


def activate(raw_rgb: Tensor, raw_sigma: Tensor) -> tuple[Tensor, Tensor]:
    return torch.sigmoid(raw_rgb), F.softplus(raw_sigma)


class CascadeField(nn.Module):
    """Multi-scale hex-plane field.

    In ``cascade`` mode every scale has its own color/density heads and the
    raw head outputs are summed over scales 1..s before activation. In
    ``concat`` mode the per-scale features are concatenated and decoded by
    one shared head pair, so there is a single output level.
    """

    def __init__(
        self,
        resolutions: Sequence[PlaneResolution],
        features: int = 16,
        mode: str = "cascade",
        hidden: int = 64,
        n_hidden: int = 2,
        density_bias: float = -1.0,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if len(resolutions) < 1:
            raise ContractViolation("a field needs at least one scale")
        if mode not in ("cascade", "concat"):
            raise ContractViolation(f"unknown field mode {mode!r}")
        self.resolutions = [PlaneResolution(r.spatial, r.temporal) for r in resolutions]
        self.features = features
        self.mode = mode
        self.hidden_width = hidden
        self.n_hidden = n_hidden
        self.density_bias = density_bias
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        self.scales = nn.ModuleList(
            HexPlaneSet(r, features, generator=gen, dtype=dtype) for r in self.resolutions
        )
        n = len(self.resolutions)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            if mode == "cascade":
                # scales above the coarsest start as exact zero residuals
                self.color_heads = nn.ModuleList(
                    MLPHead(features, 3, hidden, n_hidden, zero_last=s > 0) for s in range(n)
                )
                self.density_heads = nn.ModuleList(
                    MLPHead(features, 1, hidden, n_hidden, zero_last=s > 0,
                            last_bias=density_bias if s == 0 else 0.0)
                    for s in range(n)
                )
            else:
                width = features * n
                self.color_heads = nn.ModuleList([MLPHead(width, 3, hidden, n_hidden)])
                self.density_heads = nn.ModuleList(
                    [MLPHead(width, 1, hidden, n_hidden, last_bias=density_bias)]
                )
        self.to(dtype)

    @property
    def n_levels(self) -> int:
        return len(self.scales) if self.mode == "cascade" else 1

    def config(self) -> dict:
        return {
            "resolutions": [asdict(r) for r in self.resolutions],
            "features": self.features,
            "mode": self.mode,
            "hidden": self.hidden_width,
            "n_hidden": self.n_hidden,
            "density_bias": self.density_bias,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict, dtype: torch.dtype = torch.float32) -> "CascadeField":
        cfg = dict(cfg)
        cfg["resolutions"] = [PlaneResolution(**r) for r in cfg["resolutions"]]
        return cls(**cfg, dtype=dtype)

    def raw_levels(self, points4: Tensor) -> list[tuple[Tensor, Tensor]]:
        """Pre-activation (rgb, sigma) after each scale, for (..., 4) points."""
        if self.mode == "concat":
            feats = concat_scales([hp(points4) for hp in self.scales])
            return [(self.color_heads[0](feats), self.density_heads[0](feats)[..., 0])]
        out = []
        acc_rgb = acc_sigma = None
        for hp, ch, dh in zip(self.scales, self.color_heads, self.density_heads):
            f = hp(points4)
            rgb, sigma = ch(f), dh(f)[..., 0]
            acc_rgb = rgb if acc_rgb is None else acc_rgb + rgb
            acc_sigma = sigma if acc_sigma is None else acc_sigma + sigma
            out.append((acc_rgb, acc_sigma))
        return out

    def eval_field(self, points4: Tensor, s: int | None = None) -> tuple[Tensor, Tensor]:
        """Activated color and density after scale ``s`` (1-based, default finest)."""
        s = self.n_levels if s is None else s
        if not 1 <= s <= self.n_levels:
            raise ContractViolation(f"scale {s} outside 1..{self.n_levels}")
        if self.mode == "concat":
            return activate(*self.raw_levels(points4)[0])
        acc_rgb = acc_sigma = None
        for k in range(s):
            f = self.scales[k](points4)
            rgb, sigma = self.color_heads[k](f), self.density_heads[k](f)[..., 0]
            acc_rgb = rgb if acc_rgb is None else acc_rgb + rgb
            acc_sigma = sigma if acc_sigma is None else acc_sigma + sigma
        return activate(acc_rgb, acc_sigma)

    def raw_density(self, points4: Tensor) -> Tensor:
        """Pre-activation density at the finest level, skipping the color heads."""
        if self.mode == "concat":
            feats = concat_scales([hp(points4) for hp in self.scales])
            return self.density_heads[0](feats)[..., 0]
        acc = None
        for hp, dh in zip(self.scales, self.density_heads):
            d = dh(hp(points4))[..., 0]
            acc = d if acc is None else acc + d
        return acc

    def levels(self, points: Tensor, t: Tensor) -> list[tuple[Tensor, Tensor]]:
        p4 = torch.cat([points, t[..., None].to(points.dtype)], dim=-1)
        return [activate(r, s) for r, s in self.raw_levels(p4)]

    def density(self, points: Tensor, t: Tensor) -> Tensor:
        p4 = torch.cat([points, t[..., None].to(points.dtype)], dim=-1)
        return F.softplus(self.raw_density(p4))

    def zero_fine_heads(self) -> None:
        """Make every scale above the coarsest contribute exactly nothing."""
        if self.mode != "cascade":
            return
        with torch.no_grad():
            for head in list(self.color_heads[1:]) + list(self.density_heads[1:]):
                head.out.weight.zero_()
                head.out.bias.zero_()


@dataclass(frozen=True)
class CameraPose:
    azimuth: float = 0.0
    elevation: float = 0.0
    radius: float = 2.5
    fov: float = 40.0
    target: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > BOUND_RADIUS:
            raise ContractViolation(f"camera radius {self.radius} inside the bounding sphere")
        if not 0.0 < self.fov < 120.0:
            raise ContractViolation(f"field of view {self.fov} outside (0, 120)")
        if not -90.0 < self.elevation < 90.0:
            raise ContractViolation(f"elevation {self.elevation} must lie strictly inside (-90, 90)")

    def position(self) -> tuple[float, float, float]:
        az, el = math.radians(self.azimuth), math.radians(self.elevation)
        tx, ty, tz = self.target
        return (
            tx + self.radius * math.cos(el) * math.cos(az),
            ty + self.radius * math.cos(el) * math.sin(az),
            tz + self.radius * math.sin(el),
        )

    def offset(self, d_azimuth=0.0, d_elevation=0.0, d_radius=0.0) -> "CameraPose":
        return replace(
            self,
            azimuth=(self.azimuth + d_azimuth) % 360.0,
            elevation=self.elevation + d_elevation,
            radius=self.radius + d_radius,
        )

    def relative_to(self, base: "CameraPose") -> tuple[float, float, float]:
        d_az = (self.azimuth - base.azimuth + 180.0) % 360.0 - 180.0
        return d_az, self.elevation - base.elevation, self.radius - base.radius

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target"] = list(self.target)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        d = dict(d)
        if "target" in d:
            d["target"] = tuple(d["target"])
        return cls(**d)


def camera_basis(camera: CameraPose, dtype=torch.float64) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Camera position plus right/up/forward unit vectors (world is z-up)."""
    pos = torch.tensor(camera.position(), dtype=torch.float64)
    fwd = torch.tensor(camera.target, dtype=torch.float64) - pos
    fwd = fwd / fwd.norm()
    world_up = torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)
    right = torch.linalg.cross(fwd, world_up)
    right = right / right.norm()
    up = torch.linalg.cross(right, fwd)
    return pos.to(dtype), right.to(dtype), up.to(dtype), fwd.to(dtype)


def generate_rays(
    camera: CameraPose, width: int, height: int, dtype: torch.dtype = torch.float32
) -> tuple[Tensor, Tensor]:
    """Pinhole rays through pixel centers; returns (H, W, 3) origins and unit directions."""
    pos, right, up, fwd = camera_basis(camera)
    tan_half = math.tan(math.radians(camera.fov) / 2.0)
    aspect = width / height
    j = (torch.arange(width, dtype=torch.float64) + 0.5) / width * 2.0 - 1.0
    i = 1.0 - (torch.arange(height, dtype=torch.float64) + 0.5) / height * 2.0
    x = (j * tan_half * aspect)[None, :, None]
    y = (i * tan_half)[:, None, None]
    d = fwd + x * right + y * up
    d = d / d.norm(dim=-1, keepdim=True)
    o = pos.expand(height, width, 3)
    return o.to(dtype).contiguous(), d.to(dtype).contiguous()


@dataclass
class RenderOutput:
    rgb: Tensor
    opacity: Tensor
    depth: Tensor
    normal: Tensor | None = None
    weights: Tensor | None = None
    t_vals: Tensor | None = None

    def detach(self) -> "RenderOutput":
        return RenderOutput(
            *(None if v is None else v.detach() for v in (
                self.rgb, self.opacity, self.depth, self.normal, self.weights, self.t_vals
            ))
        )


def ray_sphere(origins: Tensor, dirs: Tensor, radius: float = BOUND_RADIUS) -> tuple[Tensor, Tensor]:
    """Entry/exit distances of unit-direction rays with a centered sphere.

    Rays that miss get near == far == 0.
    """
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc > 0
    root = torch.sqrt(disc.clamp_min(0.0))
    near = (-b - root).clamp_min(0.0)
    far = (-b + root).clamp_min(0.0)
    near = torch.where(hit, near, torch.zeros_like(near))
    far = torch.where(hit, far, torch.zeros_like(far))
    return near, far


def composite(
    sigma: Tensor, rgb: Tensor, deltas: Tensor, t_vals: Tensor, background
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Emission-absorption compositing along the last sample axis.

    Args:
        sigma: (..., n) densities.
        rgb: (..., n, 3) colors.
        deltas: (..., n) quadrature lengths.
        t_vals: (..., n) sample distances.
        background: scalar or tensor broadcastable to (..., 3).

    Returns:
        rgb (..., 3), opacity (...), depth (...), weights (..., n).
    """
    tau = sigma * deltas
    alpha = 1.0 - torch.exp(-tau)
    # exclusive cumulative optical depth
    cum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-(cum - tau))
    weights = alpha * trans
    acc = weights.sum(-1)
    color = (weights[..., None] * rgb).sum(-2)
    if not isinstance(background, Tensor):
        background = torch.as_tensor(background, dtype=color.dtype)
    color = color + (1.0 - acc)[..., None] * background
    depth = (weights * t_vals).sum(-1) / acc.clamp_min(1e-10)
    return color, acc, depth, weights


def sample_distances(
    near: Tensor, far: Tensor, n_samples: int, generator: torch.Generator | None = None
) -> tuple[Tensor, Tensor]:
    """Stratified distances: one sample per equal-width bin between near and far.

    With no generator the bin midpoints are used. Returns (t_vals, deltas).
    """
    if n_samples < 2:
        raise ContractViolation("need at least 2 samples per ray")
    shape = near.shape + (n_samples,)
    if generator is None:
        jitter = torch.full(shape, 0.5, dtype=near.dtype)
    else:
        jitter = torch.rand(shape, generator=generator, dtype=near.dtype)
    bins = torch.arange(n_samples, dtype=near.dtype)
    span = (far - near)[..., None]
    t_vals = near[..., None] + (bins + jitter) / n_samples * span
    deltas = (span / n_samples).expand(shape)
    return t_vals, deltas


def render(
    field: Field,
    origins: Tensor,
    dirs: Tensor,
    t,
    n_samples: int = 64,
    scale: int | None = None,
    background=1.0,
    generator: torch.Generator | None = None,
    bound_radius: float = BOUND_RADIUS,
    with_normals: bool = False,
):
    """Volume-render rays through a field.

    Args:
        field: anything with ``levels(points, t)`` and ``n_levels``.
        origins, dirs: (..., 3) rays; dirs must be unit length.
        t: clip time, a float or a tensor broadcastable to the ray shape.
        scale: 1-based level to return; ``None`` returns a list of every level.
        background: scalar or tensor broadcastable to (..., 3).
        generator: drives stratified jitter; ``None`` uses bin midpoints.

    Returns:
        RenderOutput, or a list of them (one per level) when ``scale`` is None.
    """
    lead = origins.shape[:-1]
    near, far = ray_sphere(origins, dirs, bound_radius)
    t_vals, deltas = sample_distances(near, far, n_samples, generator)
    pts = origins[..., None, :] + dirs[..., None, :] * t_vals[..., None]
    tt = torch.as_tensor(t, dtype=origins.dtype)
    if tt.numel() > 1 and tt.dim() >= 1:
        tt = tt.expand(lead).reshape(lead)
    times = tt.reshape(tt.shape + (1,) * (len(lead) + 1 - tt.dim())).expand(pts.shape[:-1])
    if not torch.isfinite(times).all() or times.min() < 0 or times.max() > 1:
        raise ContractViolation("render time must lie in [0, 1]")
    flat_pts = pts.reshape(-1, 3)
    flat_t = times.reshape(-1)
    levels = field.levels(flat_pts, flat_t)
    if scale is not None:
        if not 1 <= scale <= len(levels):
            raise ContractViolation(f"scale {scale} outside 1..{len(levels)}")
        levels = [levels[scale - 1]]
    outs = []
    for rgb, sigma in levels:
        sigma = sigma.reshape(lead + (n_samples,))
        rgb = rgb.reshape(lead + (n_samples, 3))
        color, acc, depth, weights = composite(sigma, rgb, deltas, t_vals, background)
        outs.append(RenderOutput(color, acc, depth, weights=weights, t_vals=t_vals))
    if with_normals:
        for out in outs:
            hit = origins + dirs * out.depth[..., None]
            n, valid = compute_normals(field, hit.reshape(-1, 3), times[..., 0].reshape(-1))
            n = n.reshape(lead + (3,))
            out.normal = torch.where((valid.reshape(lead) & (out.opacity > 0.5))[..., None], n,
                                     torch.zeros_like(n))
    return outs[0] if scale is not None else outs


def _density_of(field) -> callable:
    if hasattr(field, "density"):
        return field.density
    return field


def compute_normals(
    field, points: Tensor, t, h: float = 1e-2, eps: float = 1e-6
) -> tuple[Tensor, Tensor]:
    """Outward normals n = -grad(sigma)/|grad(sigma)| by central differences.

    ``field`` is an object with ``density(points, t)`` or a bare callable of the
    same signature. Returns (normals, valid); invalid normals are zero.
    """
    density = _density_of(field)
    t = torch.as_tensor(t, dtype=points.dtype).expand(points.shape[:-1])
    eye = torch.eye(3, dtype=points.dtype) * h
    offs = torch.cat([eye, -eye])  # (6, 3)
    probe = (points[..., None, :] + offs).reshape(-1, 3)
    tp = t[..., None].expand(points.shape[:-1] + (6,)).reshape(-1)
    s = density(probe, tp).reshape(points.shape[:-1] + (6,))
    grad = (s[..., :3] - s[..., 3:]) / (2 * h)
    norm = grad.norm(dim=-1, keepdim=True)
    valid = norm[..., 0] > eps
    n = -grad / norm.clamp_min(eps)
    n = torch.where(valid[..., None], n, torch.zeros_like(n))
    return n, valid
