"""Cross-frame UNet video enhancer trained adversarially against a degradation oracle."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .diffcore import (
    DENSE_GROUP,
    AdamState,
    ContractViolation,
    ParamStore,
    adam_step,
    backward,
    load_checkpoint,
    save_checkpoint,
)
from .renderfield import CameraPose
from .scenedata import SyntheticScene, render_gt


class EnhancerDivergence(RuntimeError):
    def __init__(self, message: str, history: list):
        super().__init__(message)
        self.history = history


def cross_frame_attention(
    prev: Tensor, cur: Tensor, nxt: Tensor, return_weights: bool = False
):
    """Single-head attention of ``cur`` over both neighbors.

    Inputs are (..., h, w, c) maps. Queries are the flattened ``cur``; keys and
    values are the width-wise concatenation of ``prev`` and ``nxt``, flattened.
    """
    if not (prev.shape == cur.shape == nxt.shape):
        raise ContractViolation(
            f"feature maps differ: {tuple(prev.shape)}, {tuple(cur.shape)}, {tuple(nxt.shape)}"
        )
    if cur.dim() < 3:
        raise ContractViolation("feature maps must be (..., h, w, c)")
    *lead, h, w, c = cur.shape
    q = cur.reshape(*lead, h * w, c)
    kv = torch.cat([prev, nxt], dim=-2).reshape(*lead, 2 * h * w, c)
    logits = q @ kv.transpose(-1, -2) / math.sqrt(c)
    attn = torch.softmax(logits, dim=-1)
    out = (attn @ kv).reshape(*lead, h, w, c)
    return (out, attn) if return_weights else out


class CrossFrameAttention(nn.Module):
    """Projected cross-frame attention with a zero-initialized residual branch."""

    def __init__(self, channels: int):
        super().__init__()
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, prev: Tensor, cur: Tensor, nxt: Tensor) -> Tensor:
        # NCHW in and out
        p, c, n = (x.permute(0, 2, 3, 1) for x in (prev, cur, nxt))
        q = self.q(c)
        kv = torch.cat([p, n], dim=-2)
        k, v = self.k(kv), self.v(kv)
        b, h, w, ch = q.shape
        logits = q.reshape(b, h * w, ch) @ k.reshape(b, 2 * h * w, ch).transpose(1, 2)
        attn = torch.softmax(logits / math.sqrt(ch), dim=-1)
        mixed = (attn @ v.reshape(b, 2 * h * w, ch)).reshape(b, h, w, ch)
        return cur + self.out(mixed).permute(0, 3, 1, 2)


def _conv(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride, 1),
        nn.GroupNorm(8, cout),
        nn.LeakyReLU(0.2),
    )


class EnhancerNet(nn.Module):
    """Three-level UNet; the encoder is shared across the frame triple.

    Attention sits once at the innermost level. The output head starts at zero
    so the untrained network is the identity on its input frame.
    """

    def __init__(self, dims: Sequence[int] = (64, 128, 256), seed: int = 0):
        super().__init__()
        if len(dims) != 3:
            raise ContractViolation("the enhancer has exactly three levels")
        self.dims = tuple(int(d) for d in dims)
        self.seed = seed
        d1, d2, d3 = self.dims
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.stem = _conv(3, d1)
            self.down = nn.ModuleList([_conv(d1, d1, 2), _conv(d1, d2, 2), _conv(d2, d3, 2)])
            self.mid = _conv(d3, d3)
            self.attn = CrossFrameAttention(d3)
            self.up = nn.ModuleList([_conv(d3 + d2, d2), _conv(d2 + d1, d1), _conv(d1 + d1, d1)])
            self.head = nn.Conv2d(d1, 3, 3, 1, 1)
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def encode(self, x: Tensor) -> list[Tensor]:
        f0 = self.stem(x)
        f1 = self.down[0](f0)
        f2 = self.down[1](f1)
        f3 = self.mid(self.down[2](f2))
        return [f0, f1, f2, f3]

    def forward(self, prev: Tensor, cur: Tensor, nxt: Tensor) -> Tensor:
        """(B, 3, H, W) frames in [0, 1]; H and W divisible by 8."""
        if cur.shape[-1] % 8 or cur.shape[-2] % 8:
            raise ContractViolation("frame size must be divisible by 8")
        b = cur.shape[0]
        feats = self.encode(torch.cat([prev, cur, nxt]))
        f0, f1, f2, f3 = (f[b:2 * b] for f in feats)
        x = self.attn(feats[3][:b], f3, feats[3][2 * b:])
        for up, skip in zip(self.up, (f2, f1, f0)):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = up(torch.cat([x, skip], dim=1))
        return (cur + self.head(x)).clamp(0.0, 1.0)


class PatchDiscriminator(nn.Module):
    """Conditional PatchGAN over (condition, candidate) pairs; one logit per patch."""

    def __init__(self, base: int = 64, n_layers: int = 1, in_ch: int = 6, seed: int = 1):
        super().__init__()
        self.n_layers = n_layers
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            layers: list[nn.Module] = [nn.Conv2d(in_ch, base, 4, 2, 1), nn.LeakyReLU(0.2)]
            ch = base
            for _ in range(n_layers - 1):
                layers += [nn.Conv2d(ch, ch * 2, 4, 2, 1), nn.GroupNorm(8, ch * 2), nn.LeakyReLU(0.2)]
                ch *= 2
            layers += [nn.Conv2d(ch, ch * 2, 4, 1, 1), nn.GroupNorm(8, ch * 2), nn.LeakyReLU(0.2)]
            layers += [nn.Conv2d(ch * 2, 1, 4, 1, 1)]
            self.net = nn.Sequential(*layers)

    def receptive_field(self) -> int:
        rf = 1
        for m in reversed([m for m in self.net if isinstance(m, nn.Conv2d)]):
            rf = (rf - 1) * m.stride[0] + m.kernel_size[0]
        return rf

    def forward(self, cond: Tensor, x: Tensor) -> Tensor:
        return self.net(torch.cat([cond, x], dim=1))


@dataclass
class DegradeConfig:
    factor: int = 4
    sigma: float = 0.02
    blob_probs: tuple = (0.25, 0.25, 0.25, 0.25)  # P(0), P(1), P(2), P(3) floaters
    blob_radius: tuple = (0.6, 1.6)  # pixels
    blob_value: tuple = (0.7, 1.0)

    def __post_init__(self):
        self.blob_probs = tuple(self.blob_probs)
        if abs(sum(self.blob_probs) - 1.0) > 1e-9 or min(self.blob_probs) < 0:
            raise ContractViolation("blob probabilities must form a distribution")


def degrade(frame: np.ndarray, rng: np.random.Generator, cfg: DegradeConfig | None = None,
            return_info: bool = False):
    """Down/up-resample blur, additive Gaussian noise and small bright floaters."""
    cfg = cfg or DegradeConfig()
    img = np.asarray(frame, dtype=np.float32)
    h, w = img.shape[:2]
    if cfg.factor and cfg.factor > 1:
        small = cv2.resize(img, (max(1, w // cfg.factor), max(1, h // cfg.factor)),
                           interpolation=cv2.INTER_AREA)
        img = cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)
        if img.ndim == 2 and frame.ndim == 3:
            img = img[..., None]
    n_blobs = int(rng.choice(len(cfg.blob_probs), p=cfg.blob_probs))
    if n_blobs:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
        for _ in range(n_blobs):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(*cfg.blob_radius)
            v = rng.uniform(*cfg.blob_value)
            a = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
            img = img * (1 - a) + v * a
    if cfg.sigma > 0:
        img = img + rng.normal(0.0, cfg.sigma, img.shape).astype(np.float32)
    if cfg.sigma > 0 or n_blobs or cfg.factor > 1:
        img = np.clip(img, 0.0, 1.0)
    out = img.astype(np.float32)
    return (out, {"n_blobs": n_blobs}) if return_info else out


def _to_nchw(frames) -> Tensor:
    x = torch.as_tensor(np.asarray(frames, dtype=np.float32))
    return x.permute(0, 3, 1, 2).contiguous()


def neighbors(n: int, j: int) -> tuple[int, int]:
    """Neighbor indices; a boundary frame reuses its single neighbor, a lone frame itself."""
    if n == 1:
        return 0, 0
    prev = j - 1 if j > 0 else j + 1
    nxt = j + 1 if j < n - 1 else j - 1
    return prev, nxt


@torch.no_grad()
def enhance(frames, net: EnhancerNet, batch: int = 16) -> np.ndarray:
    """Enhance a (N, H, W, 3) sequence in [0, 1]; returns the same shape."""
    x = _to_nchw(frames)
    n = x.shape[0]
    if n < 1:
        raise ContractViolation("enhance needs at least one frame")
    was_training = net.training
    net.eval()
    outs = []
    for s in range(0, n, batch):
        idx = list(range(s, min(n, s + batch)))
        pi = [neighbors(n, j)[0] for j in idx]
        ni = [neighbors(n, j)[1] for j in idx]
        outs.append(net(x[pi], x[idx], x[ni]))
    net.train(was_training)
    return torch.cat(outs).permute(0, 2, 3, 1).numpy()


@dataclass
class EnhancerConfig:
    dims: tuple = (64, 128, 256)
    frame_size: int = 32
    n_pairs: int = 200
    n_heldout: int = 50
    epochs: int = 20
    batch: int = 16
    lr: float = 2e-3
    beta1: float = 0.5
    adv_weight: float = 1.0
    l1_weight: float = 100.0
    disc_layers: int = 1
    seed: int = 0
    degrade: DegradeConfig = field(default_factory=DegradeConfig)

    @classmethod
    def profile(cls, name: str) -> "EnhancerConfig":
        if name == "full":
            return cls(frame_size=256, epochs=200, disc_layers=3)
        if name == "desk":
            return cls()
        if name == "tiny":
            return cls(dims=(8, 16, 16), frame_size=16, n_pairs=8, n_heldout=4, epochs=1, batch=4)
        raise ContractViolation(f"unknown enhancer profile {name!r}")


@dataclass
class EnhancerReport:
    g_loss: list = field(default_factory=list)
    d_loss: list = field(default_factory=list)
    d_accuracy: list = field(default_factory=list)
    epoch_psnr: list = field(default_factory=list)


def _bce(logits: Tensor, real: bool) -> Tensor:
    target = torch.ones_like(logits) if real else torch.zeros_like(logits)
    return F.binary_cross_entropy_with_logits(logits, target)


def _psnr_batch(a: Tensor, b: Tensor) -> float:
    mse = ((a - b) ** 2).mean(dim=(1, 2, 3)).clamp_min(1e-12)
    return float((10 * torch.log10(1.0 / mse)).mean())


def train_enhancer(
    net: EnhancerNet,
    disc: PatchDiscriminator,
    triples: np.ndarray,
    targets: np.ndarray,
    cfg: EnhancerConfig,
    freeze_generator: bool = False,
    eval_every_epoch: bool = False,
) -> EnhancerReport:
    """pix2pix-style training on (N, 3, H, W, 3) degraded triples and (N, H, W, 3) targets.

    Generator and discriminator take strictly alternating Adam steps. Aborts
    with :class:`EnhancerDivergence` if the generator loss stays above 10x its
    first value for 100 consecutive steps.
    """
    report = EnhancerReport()
    if cfg.epochs <= 0:
        return report
    tri = torch.as_tensor(np.asarray(triples, np.float32)).permute(0, 1, 4, 2, 3).contiguous()
    tgt = _to_nchw(targets)
    n = tri.shape[0]
    g_store = ParamStore.from_module(net, group_of=lambda _: DENSE_GROUP)
    d_store = ParamStore.from_module(disc, group_of=lambda _: DENSE_GROUP)
    g_adam = AdamState(lr={DENSE_GROUP: cfg.lr}, beta1=cfg.beta1, eps=1e-8)
    d_adam = AdamState(lr={DENSE_GROUP: cfg.lr}, beta1=cfg.beta1, eps=1e-8)
    gen = torch.Generator().manual_seed(cfg.seed)
    first = None
    bad = 0
    for _ in range(cfg.epochs):
        order = torch.randperm(n, generator=gen)
        for s in range(0, n, cfg.batch):
            idx = order[s:s + cfg.batch]
            prev, cur, nxt = tri[idx, 0], tri[idx, 1], tri[idx, 2]
            real = tgt[idx]
            fake = net(prev, cur, nxt)
            # discriminator step
            d_real = disc(cur, real)
            d_fake = disc(cur, fake.detach())
            d_loss = 0.5 * (_bce(d_real, True) + _bce(d_fake, False))
            adam_step(d_store, d_adam, backward(d_loss, d_store))
            acc = 0.5 * (float((d_real > 0).float().mean()) + float((d_fake < 0).float().mean()))
            report.d_loss.append(float(d_loss.detach()))
            report.d_accuracy.append(acc)
            if freeze_generator:
                continue
            # generator step
            g_loss = cfg.l1_weight * (fake - real).abs().mean()
            if cfg.adv_weight:
                g_loss = g_loss + cfg.adv_weight * _bce(disc(cur, fake), True)
            adam_step(g_store, g_adam, backward(g_loss, g_store))
            v = float(g_loss.detach())
            report.g_loss.append(v)
            first = v if first is None else first
            bad = bad + 1 if v > 10 * first else 0
            if bad >= 100:
                raise EnhancerDivergence(
                    f"generator loss above 10x its initial {first:.4g} for 100 steps", report.g_loss
                )
        if eval_every_epoch:
            with torch.no_grad():
                out = net(tri[:, 0], tri[:, 1], tri[:, 2])
            report.epoch_psnr.append(_psnr_batch(out, tgt))
    return report


def render_triples(
    scene: SyntheticScene,
    n: int,
    size: int,
    seed: int,
    dt: float = 1.0 / 31.0,
    elevation=(-10.0, 45.0),
) -> np.ndarray:
    """(n, 3, H, W, 3) clean frame triples at t - dt, t, t + dt from random orbit cameras."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, 3, size, size, 3), np.float32)
    for i in range(n):
        cam = CameraPose(float(rng.uniform(0, 360)), float(rng.uniform(*elevation)))
        t = float(rng.uniform(dt, 1 - dt))
        for k, tt in enumerate((t - dt, t, t + dt)):
            r = render_gt(scene, cam, tt, size, size, n_samples=128, dtype=torch.float32)
            out[i, k] = r.rgb.numpy()
    return out


def render_sequences(
    scene: SyntheticScene, n_frames: int, size: int, cameras: Sequence[CameraPose], n_steps: int = 32
) -> list[np.ndarray]:
    """Clean held-out clips: ``n_frames`` split evenly across ``cameras``, consecutive timestamps."""
    per = math.ceil(n_frames / len(cameras))
    clips, left = [], n_frames
    for cam in cameras:
        k = min(per, left)
        left -= k
        frames = [render_gt(scene, cam, j / (n_steps - 1), size, size, n_samples=128,
                            dtype=torch.float32).rgb.numpy() for j in range(k)]
        clips.append(np.stack(frames).astype(np.float32))
        if left == 0:
            break
    return clips


def degrade_triples(clean: np.ndarray, rng: np.random.Generator, cfg: DegradeConfig) -> np.ndarray:
    out = np.empty_like(clean)
    for i in range(clean.shape[0]):
        for k in range(clean.shape[1]):
            out[i, k] = degrade(clean[i, k], rng, cfg)
    return out


def save_enhancer(path, net: EnhancerNet, cfg: EnhancerConfig | None = None) -> Path:
    extra = {"dims": list(net.dims), "seed": net.seed}
    if cfg is not None:
        extra["config"] = asdict(cfg)
    return save_checkpoint(path, ParamStore.from_module(net, group_of=lambda _: DENSE_GROUP),
                           extra=extra)


def load_enhancer(path) -> EnhancerNet:
    ck = load_checkpoint(path)
    net = EnhancerNet(ck["extra"]["dims"], ck["extra"].get("seed", 0))
    ParamStore.from_module(net, group_of=lambda _: DENSE_GROUP).load_state_dict(ck["params"])
    net.eval()
    return net


__all__ = [
    "CrossFrameAttention",
    "DegradeConfig",
    "EnhancerConfig",
    "EnhancerDivergence",
    "EnhancerNet",
    "EnhancerReport",
    "PatchDiscriminator",
    "cross_frame_attention",
    "degrade",
    "degrade_triples",
    "enhance",
    "load_enhancer",
    "neighbors",
    "render_sequences",
    "render_triples",
    "save_enhancer",
    "train_enhancer",
]
