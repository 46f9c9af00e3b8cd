"""Six-plane factorization of a 4D (x, y, z, t) volume.

Each plane stores an ``F x M_v x M_u`` feature grid over one axis pair. A
point is projected onto every plane, sampled bilinearly, and the six samples
are multiplied element-wise.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .diffcore import ContractViolation

PLANE_IDS = ("xy", "yz", "xz", "xt", "yt", "zt")
AXIS_INDEX = {"x": 0, "y": 1, "z": 2, "t": 3}
SPATIAL_PLANES = PLANE_IDS[:3]
TEMPORAL_PLANES = PLANE_IDS[3:]


@dataclass(frozen=True)
class PlaneResolution:
    spatial: int
    temporal: int

    def __post_init__(self):
        if self.spatial < 2 or self.temporal < 2:
            raise ContractViolation(f"plane resolutions must be >= 2, got {self}")


# coarse/fine resolutions per profile
FULL_PROFILE = (PlaneResolution(50, 8), PlaneResolution(100, 16))
TEST_PROFILE = (PlaneResolution(16, 4), PlaneResolution(32, 8))


class ClampCounter:
    """Counts coordinates that fell outside their domain and were clamped."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


def axis_extent(axis: str, res: PlaneResolution) -> int:
    return res.temporal if axis == "t" else res.spatial


def _to_grid(coord: Tensor, axis: str, m: int) -> Tensor:
    if axis == "t":
        return coord * (m - 1)
    return (coord + 1.0) * 0.5 * (m - 1)


def project(
    points: Tensor,
    plane_id: str,
    res: PlaneResolution,
    counter: ClampCounter | None = None,
) -> tuple[Tensor, Tensor]:
    """Map (..., 4) points to continuous (u, v) texel coordinates on one plane.

    Spatial axes map [-1, 1] onto [0, M-1]; time maps [0, 1] onto [0, M_t-1].
    Points outside the domain clamp to the border.
    """
    if plane_id not in PLANE_IDS:
        raise ContractViolation(f"unknown plane {plane_id!r}")
    out = []
    for axis in plane_id:
        m = axis_extent(axis, res)
        g = _to_grid(points[..., AXIS_INDEX[axis]], axis, m)
        if counter is not None:
            counter.count += int(((g < 0) | (g > m - 1)).sum())
        out.append(g.clamp(0.0, m - 1))
    return out[0], out[1]


def sample_plane(grid: Tensor, u: Tensor, v: Tensor) -> Tensor:
    """Bilinear lookup of an ``(F, M_v, M_u)`` grid at texel coordinates (u, v).

    Returns features of shape ``u.shape + (F,)``.
    """
    return _sample_stack(grid[None], u[None], v[None])[0]


def _sample_stack(grids: Tensor, u: Tensor, v: Tensor) -> Tensor:
    # grids (N, F, Mv, Mu); u, v (N, ...) texel coords -> (N, ..., F)
    n, f, mv, mu = grids.shape
    lead = u.shape[1:]
    gx = u.reshape(n, -1, 1) * (2.0 / (mu - 1)) - 1.0
    gy = v.reshape(n, -1, 1) * (2.0 / (mv - 1)) - 1.0
    g = torch.stack([gx, gy], dim=-1)
    out = F.grid_sample(grids, g, mode="bilinear", padding_mode="border", align_corners=True)
    return out[..., 0].transpose(1, 2).reshape(n, *lead, f)


def fuse(features: list[Tensor] | tuple[Tensor, ...]) -> Tensor:
    """Hadamard product of the six per-plane features."""
    if len(features) == 0:
        raise ContractViolation("fuse needs at least one feature vector")
    shape = features[0].shape
    for f in features[1:]:
        if f.shape != shape:
            raise ContractViolation(f"feature shapes differ: {tuple(shape)} vs {tuple(f.shape)}")
    out = features[0]
    for f in features[1:]:
        out = out * f
    return out


def concat_scales(features: list[Tensor]) -> Tensor:
    """Concatenate per-scale fused features along the channel axis, coarse first."""
    if not features:
        raise ContractViolation("concat_scales needs at least one scale")
    return torch.cat(list(features), dim=-1)


class HexPlaneSet(nn.Module):
    """The six feature planes of one scale."""

    def __init__(
        self,
        res: PlaneResolution,
        features: int = 16,
        init_range: tuple[float, float] = (0.9, 1.1),
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.res = res
        self.features = features
        self.counter = ClampCounter()
        lo, hi = init_range
        planes = {}
        for pid in PLANE_IDS:
            mu = axis_extent(pid[0], res)
            mv = axis_extent(pid[1], res)
            init = torch.rand(features, mv, mu, generator=generator, dtype=dtype)
            planes[pid] = nn.Parameter(lo + (hi - lo) * init)
        self.planes = nn.ParameterDict(planes)

    def plane_features(self, points: Tensor) -> list[Tensor]:
        """Per-plane bilinear features at (..., 4) points, in PLANE_IDS order."""
        out = {}
        for group in (SPATIAL_PLANES, TEMPORAL_PLANES):
            uv = [project(points, pid, self.res, self.counter) for pid in group]
            u = torch.stack([a for a, _ in uv])
            v = torch.stack([b for _, b in uv])
            grids = torch.stack([self.planes[pid] for pid in group])
            feats = _sample_stack(grids, u, v)
            for i, pid in enumerate(group):
                out[pid] = feats[i]
        return [out[pid] for pid in PLANE_IDS]

    def forward(self, points: Tensor) -> Tensor:
        return fuse(self.plane_features(points))


def export_planes(hexplanes: HexPlaneSet, out_dir) -> list:
    """Write every plane as one grayscale PNG per feature channel.

    Each channel is min-max normalized independently; files are named
    ``<plane>_c<channel>.png``.
    """
    from pathlib import Path

    from .imageio import write_gray8

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for pid in PLANE_IDS:
        grid = hexplanes.planes[pid].detach().cpu().double()
        for c in range(grid.shape[0]):
            ch = grid[c]
            lo, hi = ch.min(), ch.max()
            img = (ch - lo) / (hi - lo) if hi > lo else torch.zeros_like(ch)
            path = out_dir / f"{pid}_c{c:02d}.png"
            write_gray8(path, img.numpy())
            written.append(path)
    return written
