"""Score-distillation gradients over a DDPM noise schedule.

Images live in [0, 1] outside this module and are mapped to [-1, 1] (the
"model space" of the noise predictor) before noising. A score provider
predicts the injected noise from a noised image; the SDS gradient with
respect to the model-space image is ``w(tau) * (eps_hat - eps)`` and is never
propagated through the provider.
"""

from __future__ import annotations

import json
import math
import subprocess
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np
import torch
from torch import Tensor

from .diffcore import ContractViolation
from .imageio import decode_signed16, encode_signed16
from .renderfield import CameraPose
from .scenedata import SyntheticScene, render_gt


@dataclass
class NoiseSchedule:
    n_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    weighting: str = "one_minus_alpha_bar"
    alphas_cumprod: Tensor = field(init=False, repr=False)

    def __post_init__(self):
        betas = torch.linspace(self.beta_start, self.beta_end, self.n_steps, dtype=torch.float64)
        self.alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)

    def alpha_bar(self, tau: int) -> float:
        """Cumulative signal fraction at integer timestep tau in [1, T]."""
        if not 1 <= int(tau) <= self.n_steps:
            raise ContractViolation(f"timestep {tau} outside [1, {self.n_steps}]")
        return float(self.alphas_cumprod[int(tau) - 1])

    def weight(self, tau: int) -> float:
        if self.weighting == "one_minus_alpha_bar":
            return 1.0 - self.alpha_bar(tau)
        if self.weighting == "uniform":
            return 1.0
        raise ContractViolation(f"unknown weighting {self.weighting!r}")


@dataclass
class GuidanceContext:
    """Conditioning for one guided view.

    ``relative_pose`` is (d_azimuth, d_elevation, d_radius) of the target view
    with respect to the input view. ``background`` is the color the render was
    composited over, so that analytic providers can match it.
    """

    input_image: Tensor | None
    relative_pose: tuple[float, float, float]
    t: float
    background: float | Tensor = 1.0


class ScoreProvider(Protocol):
    def __call__(self, z: Tensor, tau: int, ctx: GuidanceContext) -> Tensor:
        """Predicted noise, same shape as ``z``."""


def to_model_space(x: Tensor) -> Tensor:
    return 2.0 * x - 1.0


def noise_image(x: Tensor, tau: int, eps: Tensor, schedule: NoiseSchedule) -> Tensor:
    """z = sqrt(a) * x' + sqrt(1 - a) * eps with x' = 2x - 1 and a = alpha_bar(tau)."""
    a = schedule.alpha_bar(tau)
    return math.sqrt(a) * to_model_space(x) + math.sqrt(1.0 - a) * eps


def gaussian_oracle(z: Tensor, tau: int, mu: Tensor, schedule: NoiseSchedule) -> Tensor:
    """Exact noise under the hypothesis that the clean model-space image is ``mu``."""
    a = schedule.alpha_bar(tau)
    if a >= 1.0:
        raise ContractViolation("alpha_bar == 1 leaves no noise to predict")
    return (z - math.sqrt(a) * mu) / math.sqrt(1.0 - a)


def sds_grad(
    x: Tensor,
    provider: ScoreProvider,
    ctx: GuidanceContext,
    tau: int,
    eps: Tensor,
    schedule: NoiseSchedule,
) -> Tensor:
    """SDS gradient with respect to the model-space image of render ``x``."""
    with torch.no_grad():
        z = noise_image(x.detach(), tau, eps, schedule)
        eps_hat = provider(z, tau, ctx)
        if eps_hat.shape != z.shape:
            raise ContractViolation(
                f"provider returned shape {tuple(eps_hat.shape)}, expected {tuple(z.shape)}"
            )
        return schedule.weight(tau) * (eps_hat.to(z.dtype) - eps)


def sds_surrogate(x: Tensor, grad: Tensor) -> Tensor:
    """Scalar whose gradient w.r.t. the model-space image of ``x`` is ``grad``."""
    return (grad.detach() * to_model_space(x)).sum()


def sample_timestep(
    generator: torch.Generator, lo: float, hi: float, schedule: NoiseSchedule
) -> int:
    """Uniform integer timestep in [ceil(lo T), floor(hi T)]."""
    if not 0.0 <= lo < hi <= 1.0:
        raise ContractViolation(f"bad timestep range [{lo}, {hi}]")
    n = schedule.n_steps
    first = max(1, math.ceil(lo * n - 1e-9))
    last = min(n, math.floor(hi * n + 1e-9))
    if last < first:
        raise ContractViolation(f"timestep range [{lo}, {hi}] holds no integer step")
    return int(torch.randint(first, last + 1, (1,), generator=generator).item())


def annealed_range(
    iteration: int, total: int, start=(0.02, 0.98), end=(0.02, 0.5)
) -> tuple[float, float]:
    f = 0.0 if total <= 1 else min(max(iteration / (total - 1), 0.0), 1.0)
    return start[0] + f * (end[0] - start[0]), start[1] + f * (end[1] - start[1])


class GaussianOracleProvider:
    """Provider that pulls every noised image toward one fixed target image."""

    def __init__(self, target: Tensor, schedule: NoiseSchedule):
        self.mu = to_model_space(target)
        self.schedule = schedule

    def __call__(self, z: Tensor, tau: int, ctx: GuidanceContext) -> Tensor:
        return gaussian_oracle(z, tau, self.mu.to(z.dtype), self.schedule)


class EchoNoiseProvider:
    """Returns the noise it is told about; a perfect-denoiser fixed point for tests."""

    def __init__(self):
        self.eps: Tensor | None = None

    def __call__(self, z: Tensor, tau: int, ctx: GuidanceContext) -> Tensor:
        return self.eps.clone()


class OracleViewProvider:
    """Gaussian oracle whose target is the true novel view of a synthetic scene.

    The target for (relative pose, t, resolution) is rendered from the scene
    once and cached on white; other backgrounds are composited from the cached
    opacity. Safe to call from several threads.
    """

    def __init__(
        self,
        scene: SyntheticScene,
        input_camera: CameraPose,
        schedule: NoiseSchedule,
        n_samples: int = 256,
        dtype: torch.dtype = torch.float64,
        elevation_range: tuple[float, float] = (-80.0, 80.0),
        radius_range: tuple[float, float] = (1.2, 10.0),
        cache_size: int = 4096,
        quantize: bool = True,
    ):
        self.scene = scene
        self.input_camera = input_camera
        self.schedule = schedule
        self.n_samples = n_samples
        self.dtype = dtype
        self.elevation_range = elevation_range
        self.radius_range = radius_range
        self.cache_size = cache_size
        self.quantize = quantize
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def camera_for(self, relative_pose) -> CameraPose:
        cam = self.input_camera.offset(*relative_pose)
        lo, hi = self.elevation_range
        rlo, rhi = self.radius_range
        if not (lo <= cam.elevation <= hi and rlo <= cam.radius <= rhi):
            raise ContractViolation(f"pose {relative_pose} outside the configured orbit")
        return cam

    def target(self, relative_pose, t: float, width: int, height: int) -> tuple[Tensor, Tensor]:
        """Cached (rgb on white, opacity) of the true view."""
        key = (tuple(round(float(v), 9) for v in relative_pose), round(float(t), 9), width, height)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                self.hits += 1
                return self._cache[key]
        cam = self.camera_for(relative_pose)
        out = render_gt(self.scene, cam, float(t), width, height, self.n_samples, 1.0, self.dtype)
        rgb = out.rgb
        if self.quantize:
            rgb = torch.round(rgb * 255.0) / 255.0
        val = (rgb, out.opacity)
        with self._lock:
            self.misses += 1
            self._cache[key] = val
            while len(self._cache) > self.cache_size:
                self._cache.popitem(last=False)
        return val

    def target_image(self, ctx: GuidanceContext, width: int, height: int) -> Tensor:
        rgb, alpha = self.target(ctx.relative_pose, ctx.t, width, height)
        bg = torch.as_tensor(ctx.background, dtype=rgb.dtype)
        if torch.all(bg == 1.0):
            return rgb
        return rgb - (1.0 - alpha)[..., None] * (1.0 - bg)

    def __call__(self, z: Tensor, tau: int, ctx: GuidanceContext) -> Tensor:
        h, w = z.shape[-3], z.shape[-2]
        mu = to_model_space(self.target_image(ctx, w, h)).to(z.dtype)
        return gaussian_oracle(z, tau, mu, self.schedule)


def oracle_view_provider(
    scene: SyntheticScene, input_camera: CameraPose, schedule: NoiseSchedule | None = None, **kw
) -> OracleViewProvider:
    return OracleViewProvider(scene, input_camera, schedule or NoiseSchedule(), **kw)


# Values of z and eps_hat on the wire are clipped to +/- this limit.
WIRE_LIMIT = 8.0


class ExternalProvider:
    """Runs a score backend as a subprocess, one process per request.

    Request on stdin: one JSON header line, then the PNG bytes of z.
    Header keys: ``tau``, ``relative_pose``, ``t``, ``png_bytes``,
    ``encoding`` ("signed16"), ``limit``. The PNG is 16-bit RGB with value
    ``v`` stored as ``round((v + limit) / (2 limit) * 65535)``. The response on
    stdout is a PNG in the same encoding holding eps_hat.
    """

    def __init__(self, command: list[str], timeout: float = 60.0, limit: float = WIRE_LIMIT):
        self.command = list(command)
        self.timeout = timeout
        self.limit = limit

    def __call__(self, z: Tensor, tau: int, ctx: GuidanceContext) -> Tensor:
        png = encode_signed16(z.detach().cpu().numpy(), self.limit)
        header = {
            "tau": int(tau),
            "relative_pose": [float(v) for v in ctx.relative_pose],
            "t": float(ctx.t),
            "png_bytes": len(png),
            "encoding": "signed16",
            "limit": self.limit,
        }
        payload = json.dumps(header).encode() + b"\n" + png
        proc = subprocess.run(
            self.command, input=payload, capture_output=True, timeout=self.timeout, check=False
        )
        if proc.returncode != 0:
            raise RuntimeError(
                f"score backend exited with {proc.returncode}: {proc.stderr.decode(errors='replace')}"
            )
        eps_hat = decode_signed16(proc.stdout, self.limit)
        return torch.as_tensor(np.ascontiguousarray(eps_hat), dtype=z.dtype)


def read_request(stream) -> tuple[dict, np.ndarray]:
    """Parse one provider request from a binary stream (backend side helper)."""
    header = json.loads(stream.readline().decode())
    data = stream.read(header["png_bytes"])
    return header, decode_signed16(data, header["limit"])


def make_provider(kind: str, **kw) -> ScoreProvider:
    """Provider selection by config key."""
    if kind == "gaussian_oracle":
        return GaussianOracleProvider(kw["target"], kw.get("schedule") or NoiseSchedule())
    if kind == "oracle_view":
        return oracle_view_provider(kw["scene"], kw["input_camera"], kw.get("schedule"),
                                    **kw.get("options", {}))
    if kind == "external":
        return ExternalProvider(kw["command"], kw.get("timeout", 60.0))
    raise ContractViolation(f"unknown provider {kind!r}")
