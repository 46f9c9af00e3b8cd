"""Reconstruction, mask and normal regularizers, and the weighted total loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
from torch import Tensor

from .diffcore import ContractViolation, NumericFailure
from .renderfield import compute_normals

COMPONENTS = ("sds", "icl", "rec", "mask", "normal", "orient")


@dataclass
class LossWeights:
    sds: float = 0.1
    icl: float = 2500.0
    rec: float = 500.0
    mask: float = 50.0
    normal: float = 2.0
    orient_start: float = 1.0
    orient_end: float = 20.0
    orient_ramp_iters: int = 5000

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ContractViolation(f"loss weight {k} must be >= 0")
        if self.orient_end < self.orient_start:
            raise ContractViolation("orientation weight must not decrease")

    def orient(self, iteration: int) -> float:
        if self.orient_ramp_iters <= 0:
            return self.orient_end
        f = min(max(iteration / self.orient_ramp_iters, 0.0), 1.0)
        return self.orient_start + (self.orient_end - self.orient_start) * f

    def at(self, iteration: int) -> dict[str, float]:
        return {
            "sds": self.sds,
            "icl": self.icl,
            "rec": self.rec,
            "mask": self.mask,
            "normal": self.normal,
            "orient": self.orient(iteration),
        }

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        if name == "standard":
            return cls()
        if name == "low_sds":
            return cls(sds=0.01)
        raise ContractViolation(f"unknown weights preset {name!r}")


def _check_shapes(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def recon_loss(
    rgb: Tensor, frame: Tensor, mask: Tensor, background=1.0, norm: str = "l2"
) -> Tensor:
    """Error between a render and the frame composited over the render's background.

    Inside the mask the target is the frame, outside it is the background.
    """
    _check_shapes(rgb, frame, "recon_loss")
    bg = torch.as_tensor(background, dtype=frame.dtype)
    m = mask[..., None].to(frame.dtype)
    target = m * frame + (1.0 - m) * bg
    d = rgb - target
    return (d * d).mean() if norm == "l2" else d.abs().mean()


def mask_loss(opacity: Tensor, mask: Tensor, norm: str = "l2") -> Tensor:
    _check_shapes(opacity, mask, "mask_loss")
    d = opacity - mask.to(opacity.dtype)
    return (d * d).mean() if norm == "l2" else d.abs().mean()


def orientation_loss(
    weights: Tensor, normals: Tensor, view_dirs: Tensor, valid: Tensor | None = None
) -> Tensor:
    """sum_i w_i * max(0, n_i . d)^2 over samples; invalid normals drop out."""
    cos = (normals * view_dirs).sum(-1)
    pen = weights * cos.clamp_min(0.0) ** 2
    if valid is not None:
        pen = torch.where(valid, pen, torch.zeros_like(pen))
    return pen.sum()


def random_unit(n: int, generator: torch.Generator | None, dtype=torch.float32) -> Tensor:
    v = torch.randn(n, 3, generator=generator, dtype=dtype)
    return v / v.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def normal_smooth_loss(
    field,
    points: Tensor,
    t,
    h: float = 0.01,
    generator: torch.Generator | None = None,
    offsets: Tensor | None = None,
    fd_step: float = 1e-2,
) -> Tensor:
    """Mean ||n(p) - n(p + delta)||^2 with |delta| = h in random directions.

    Pairs where either normal is invalid are skipped.
    """
    if h <= 0:
        raise ContractViolation("perturbation length must be positive")
    if offsets is None:
        offsets = random_unit(points.shape[0], generator, points.dtype)
    t = torch.as_tensor(t, dtype=points.dtype).expand(points.shape[:-1])
    both = torch.cat([points, points + h * offsets])
    n, valid = compute_normals(field, both, torch.cat([t, t]), h=fd_step)
    k = points.shape[0]
    ok = valid[:k] & valid[k:]
    d = ((n[:k] - n[k:]) ** 2).sum(-1)
    d = torch.where(ok, d, torch.zeros_like(d))
    return d.sum() / ok.sum().clamp_min(1)


def total_loss(
    components: Mapping[str, Tensor | float], weights: LossWeights, iteration: int
) -> Tensor:
    """Weighted sum of whichever components are present."""
    lam = weights.at(iteration)
    total = None
    for name, value in components.items():
        if name not in lam:
            raise ContractViolation(f"unknown loss component {name!r}")
        v = value if isinstance(value, Tensor) else torch.tensor(float(value), dtype=torch.float64)
        if not torch.isfinite(v.detach()).all():
            raise NumericFailure(f"loss component {name!r} is not finite")
        term = lam[name] * v
        total = term if total is None else total + term
    if total is None:
        return torch.zeros((), dtype=torch.float64)
    return total


__all__ = [
    "COMPONENTS",
    "LossWeights",
    "mask_loss",
    "normal_smooth_loss",
    "orientation_loss",
    "recon_loss",
    "total_loss",
]
