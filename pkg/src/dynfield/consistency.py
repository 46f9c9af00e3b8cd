"""Interpolation-driven consistency loss and its frame-batch samplers."""

from __future__ import annotations

import math

import json
import subprocess
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
from torch import Tensor

from .diffcore import ContractViolation
from .imageio import decode_png, encode_png, to_uint8
from .renderfield import CameraPose


class Interpolator(Protocol):
    differentiable: bool

    def __call__(self, first: Tensor, last: Tensor, gamma: float) -> Tensor:
        ...


@dataclass
class FrameBatch:
    frames: Tensor  # (J, H, W, 3), ordered
    axis: str  # "spatial" or "temporal"
    cameras: list[CameraPose] | None = None
    timestamps: list[float] | None = None

    def __post_init__(self):
        if self.axis not in ("spatial", "temporal"):
            raise ContractViolation(f"unknown batch axis {self.axis!r}")
        if self.frames.shape[0] < 3:
            raise ContractViolation("a consistency batch needs at least 3 frames")


class LinearInterpolator:
    differentiable = True

    def __call__(self, first: Tensor, last: Tensor, gamma: float) -> Tensor:
        return linear_interpolator(first, last, gamma)


def linear_interpolator(first: Tensor, last: Tensor, gamma: float) -> Tensor:
    if not 0.0 < gamma < 1.0:
        raise ContractViolation(f"gamma {gamma} outside (0, 1)")
    return (1.0 - gamma) * first + gamma * last


def interior_gammas(n_frames: int) -> list[float]:
    """gamma_j = (j - 1) / (J - 1) for j = 2..J-1."""
    return [(j - 1) / (n_frames - 1) for j in range(2, n_frames)]


def _l2(x: Tensor) -> Tensor:
    # unsquared norm with a zero subgradient at the origin
    sq = (x * x).sum()
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, torch.sqrt(safe), torch.zeros_like(sq))


def icl_loss(
    frames: Tensor | FrameBatch,
    interp: Interpolator | None = None,
    squared: bool = False,
    reduction: str = "sum",
) -> Tensor:
    """Sum over interior frames of ||x_j - psi(x_1, x_J, gamma_j)||_2.

    ``reduction="mean"`` normalizes each frame term per element (RMS, or MSE when
    ``squared``) so the weight does not scale with resolution.
    Endpoints receive gradients only when the interpolator is differentiable.
    """
    if reduction not in ("sum", "mean"):
        raise ContractViolation(f"unknown reduction {reduction!r}")
    if isinstance(frames, FrameBatch):
        frames = frames.frames
    interp = interp or LinearInterpolator()
    n = frames.shape[0]
    if n < 3:
        raise ContractViolation("icl_loss needs J >= 3 frames")
    first, last = frames[0], frames[-1]
    if not getattr(interp, "differentiable", False):
        first, last = first.detach(), last.detach()
    total = frames.new_zeros(())
    for j, gamma in zip(range(1, n - 1), interior_gammas(n)):
        target = interp(first, last, gamma)
        diff = frames[j] - target.to(frames.dtype)
        if reduction == "mean":
            diff = diff / math.sqrt(diff.numel()) if not squared else diff
            term = (diff * diff).mean() if squared else _l2(diff)
        else:
            term = (diff * diff).sum() if squared else _l2(diff)
        total = total + term
    return total


def sample_spatial_batch(
    generator: torch.Generator,
    base: CameraPose,
    n_frames: int = 4,
    interval=(5.0, 15.0),
) -> list[CameraPose]:
    """Cameras at the base elevation with azimuths ``base + k * d``, one ``d`` per batch."""
    if n_frames < 3:
        raise ContractViolation("need at least 3 frames")
    lo, hi = interval
    d = lo + (hi - lo) * float(torch.rand((), generator=generator, dtype=torch.float64))
    return [base.offset(d_azimuth=k * d) for k in range(n_frames)]


def sample_temporal_batch(generator: torch.Generator, n_frames: int, total: int) -> list[int]:
    """J consecutive frame indices with a uniformly drawn start."""
    if total < n_frames:
        raise ContractViolation(f"{total} frames cannot hold a run of {n_frames}")
    start = int(torch.randint(0, total - n_frames + 1, (1,), generator=generator).item())
    return list(range(start, start + n_frames))


class ExternalInterpolator:
    """Frame interpolation backend run as a subprocess (e.g. a RIFE wrapper).

    Request on stdin: a JSON header line ``{"gamma": "<decimal>", "first_bytes": n1,
    "last_bytes": n2}`` followed by the two 8-bit RGB PNGs. Response on stdout:
    the interpolated frame as an 8-bit RGB PNG. Not differentiable.
    """

    differentiable = False

    def __init__(self, command: Sequence[str], timeout: float = 60.0):
        self.command = list(command)
        self.timeout = timeout

    def __call__(self, first: Tensor, last: Tensor, gamma: float) -> Tensor:
        if not 0.0 < gamma < 1.0:
            raise ContractViolation(f"gamma {gamma} outside (0, 1)")
        a = encode_png(to_uint8(first.detach().cpu().numpy()))
        b = encode_png(to_uint8(last.detach().cpu().numpy()))
        header = {"gamma": repr(float(gamma)), "first_bytes": len(a), "last_bytes": len(b)}
        payload = json.dumps(header).encode() + b"\n" + a + b
        proc = subprocess.run(
            self.command, input=payload, capture_output=True, timeout=self.timeout, check=False
        )
        if proc.returncode != 0:
            raise RuntimeError(
                f"interpolator exited with {proc.returncode}: {proc.stderr.decode(errors='replace')}"
            )
        out = decode_png(proc.stdout).astype(np.float32) / 255.0
        return torch.as_tensor(out[..., :3], dtype=first.dtype)


def read_interp_request(stream) -> tuple[float, np.ndarray, np.ndarray]:
    """Backend-side parser for one interpolation request."""
    header = json.loads(stream.readline().decode())
    a = decode_png(stream.read(header["first_bytes"]))
    b = decode_png(stream.read(header["last_bytes"]))
    return float(header["gamma"]), a, b


def make_interpolator(kind: str, **kw) -> Interpolator:
    if kind == "linear":
        return LinearInterpolator()
    if kind == "external":
        return ExternalInterpolator(kw["command"], kw.get("timeout", 60.0))
    raise ContractViolation(f"unknown interpolator {kind!r}")
