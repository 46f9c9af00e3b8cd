"""Parameter storage, gradients, Adam, finite-difference checks and checkpoints.

Gradients come from ``torch.autograd`` over the fixed computation graph of the
engine. The finite-difference checker is deliberately independent of autograd
so that it can serve as the oracle for it.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import torch
from torch import Tensor, nn

CHECKPOINT_VERSION = 1

GRID_GROUP = "grid"
DENSE_GROUP = "dense"


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class NumericFailure(FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


class CheckpointError(RuntimeError):
    pass


@dataclass
class ParamStore:
    """Named learnable tensors, each tagged with a learning-rate group."""

    params: dict[str, Tensor] = field(default_factory=dict)
    groups: dict[str, str] = field(default_factory=dict)

    def register(self, name: str, tensor: Tensor, group: str = DENSE_GROUP) -> Tensor:
        if name in self.params:
            raise ContractViolation(f"parameter {name!r} already registered")
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self.params[name] = tensor
        self.groups[name] = group
        return tensor

    @classmethod
    def from_module(
        cls,
        module: nn.Module,
        group_of: Callable[[str], str] | None = None,
        prefix: str = "",
    ) -> "ParamStore":
        store = cls()
        store.add_module(module, group_of, prefix)
        return store

    def add_module(
        self,
        module: nn.Module,
        group_of: Callable[[str], str] | None = None,
        prefix: str = "",
    ) -> None:
        group_of = group_of or default_group
        for name, p in module.named_parameters():
            self.register(prefix + name, p, group_of(name))

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self):
        return iter(self.params.items())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, Tensor]:
        return {
            k: (p.grad if p.grad is not None else torch.zeros_like(p))
            for k, p in self.params.items()
        }

    def state_dict(self) -> dict[str, Tensor]:
        return {k: p.detach().clone() for k, p in self.params.items()}

    def load_state_dict(self, state: Mapping[str, Tensor]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(
                f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}"
            )
        with torch.no_grad():
            for k, p in self.params.items():
                if state[k].shape != p.shape:
                    raise CheckpointError(
                        f"shape of {k!r} is {tuple(state[k].shape)}, expected {tuple(p.shape)}"
                    )
                p.copy_(state[k])


def default_group(name: str) -> str:
    """Plane grids train in the grid group, everything else in the dense group."""
    return GRID_GROUP if "planes" in name.split(".") else DENSE_GROUP


@dataclass
class AdamState:
    lr: dict[str, float] = field(default_factory=lambda: {GRID_GROUP: 0.1, DENSE_GROUP: 1e-3})
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    exp_avg: dict[str, Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, Tensor] = field(default_factory=dict)

    def state_dict(self) -> dict:
        return {
            "lr": dict(self.lr),
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "exp_avg": {k: v.clone() for k, v in self.exp_avg.items()},
            "exp_avg_sq": {k: v.clone() for k, v in self.exp_avg_sq.items()},
        }

    @classmethod
    def from_state_dict(cls, state: Mapping) -> "AdamState":
        return cls(
            lr=dict(state["lr"]),
            beta1=state["beta1"],
            beta2=state["beta2"],
            eps=state["eps"],
            step=state["step"],
            exp_avg={k: v.clone() for k, v in state["exp_avg"].items()},
            exp_avg_sq={k: v.clone() for k, v in state["exp_avg_sq"].items()},
        )


def backward(loss: Tensor, store: ParamStore) -> dict[str, Tensor]:
    """Reverse-mode gradients of a scalar loss for every parameter in ``store``.

    Parameters the loss does not depend on receive an exact zero gradient.
    The gradients are also left in ``param.grad``.
    """
    if loss.numel() != 1:
        raise ContractViolation(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not torch.isfinite(loss).all():
        raise NumericFailure(f"non-finite loss value {loss.item()}")
    names = list(store.params)
    tensors = [store.params[n] for n in names]
    if loss.requires_grad:
        raw = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    else:
        raw = [None] * len(tensors)
    out = {}
    for name, p, g in zip(names, tensors, raw):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericFailure(f"non-finite gradient for {name!r}")
        p.grad = g
        out[name] = g
    return out


def adam_step(
    store: ParamStore, state: AdamState, grads: Mapping[str, Tensor] | None = None
) -> None:
    """Bias-corrected Adam update, in place, with one learning rate per group."""
    grads = store.grads() if grads is None else grads
    for name, p in store.params.items():
        if name not in grads:
            raise ContractViolation(f"no gradient supplied for {name!r}")
        if grads[name].shape != p.shape:
            raise ContractViolation(
                f"gradient for {name!r} has shape {tuple(grads[name].shape)}, "
                f"parameter has {tuple(p.shape)}"
            )
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    with torch.no_grad():
        for name, p in store.params.items():
            g = grads[name]
            if name not in state.exp_avg:
                state.exp_avg[name] = torch.zeros_like(p)
                state.exp_avg_sq[name] = torch.zeros_like(p)
            m = state.exp_avg[name]
            v = state.exp_avg_sq[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            lr = state.lr[store.groups[name]]
            denom = (v / bc2).sqrt_().add_(state.eps)
            p.addcdiv_(m, denom, value=-lr / bc1)


@dataclass
class FDResult:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    per_param: dict[str, float]
    n_degenerate: int = 0

    @property
    def ok(self) -> bool:
        return self.n_checked > 0


def finite_diff_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    eps_floor: float = 1e-8,
    max_entries: int | None = None,
    kink_tol: float = 1e-2,
    seed: int = 0,
    degenerate_below: float = 0.0,
) -> FDResult:
    """Compare autograd gradients of ``fn()`` against central differences.

    ``fn`` must close over the tensors in ``params`` and be deterministic. An
    entry whose one-sided differences disagree (a kink, e.g. a sample sitting on
    a grid line) is excluded rather than counted as a failure. Entries whose
    analytic and numeric slopes are both below ``degenerate_below`` are skipped
    as degenerate and counted separately.

    Returns:
        FDResult with the max of |analytic - numeric| / max(|analytic|, |numeric|, eps_floor).
    """
    tensors = list(params.values())
    with torch.no_grad():
        f0 = fn().detach().clone()
        if not torch.equal(f0, fn().detach()):
            raise ContractViolation("operation is not deterministic under pinned inputs")
    if f0.numel() != 1:
        raise ContractViolation("finite_diff_check needs a scalar-valued operation")
    saved = [t.detach().clone() for t in tensors]
    flags = [t.requires_grad for t in tensors]
    for t in tensors:
        t.requires_grad_(True)
    grads = torch.autograd.grad(fn(), tensors, allow_unused=True)
    analytic = [
        torch.zeros_like(t) if g is None else g.detach().clone() for t, g in zip(tensors, grads)
    ]
    rng = np.random.default_rng(seed)
    worst = 0.0
    n_checked = 0
    n_excluded = 0
    n_degenerate = 0
    per_param: dict[str, float] = {}
    f0v = f0.item()
    with torch.no_grad():
        for name, t, g, orig in zip(params.keys(), tensors, analytic, saved):
            flat = t.view(-1)
            gflat = g.view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            pworst = 0.0
            for i in idx:
                v = flat[i].item()
                flat[i] = v + step
                fp = fn().item()
                flat[i] = v - step
                fm = fn().item()
                flat[i] = v
                fwd = (fp - f0v) / step
                bwd = (f0v - fm) / step
                if abs(fwd - bwd) > kink_tol * max(abs(fwd), abs(bwd)) + 1e3 * step * eps_floor:
                    n_excluded += 1
                    continue
                numeric = (fp - fm) / (2 * step)
                a = gflat[i].item()
                if max(abs(a), abs(numeric)) < degenerate_below:
                    n_degenerate += 1
                    continue
                err = abs(a - numeric) / max(abs(a), abs(numeric), eps_floor)
                pworst = max(pworst, err)
                n_checked += 1
            t.copy_(orig)
            per_param[name] = pworst
            worst = max(worst, pworst)
    for t, flag in zip(tensors, flags):
        t.requires_grad_(flag)
    return FDResult(worst, n_checked, n_excluded, per_param, n_degenerate)


def save_checkpoint(
    path: str | Path,
    store: ParamStore,
    state: AdamState | None = None,
    generator: torch.Generator | None = None,
    extra: Mapping | None = None,
) -> Path:
    """Write a versioned checkpoint; reloading it reproduces every tensor bitwise."""
    path = Path(path)
    payload = {
        "version": CHECKPOINT_VERSION,
        "params": store.state_dict(),
        "groups": dict(store.groups),
        "adam": state.state_dict() if state is not None else None,
        "generator": generator.get_state() if generator is not None else None,
        "extra": json.dumps(extra or {}),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> dict:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns a dict with ``params``, ``groups``, ``adam`` (AdamState or None),
    ``generator`` (ByteTensor state or None) and ``extra``.
    """
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types on corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    adam = payload["adam"]
    return {
        "params": payload["params"],
        "groups": payload["groups"],
        "adam": AdamState.from_state_dict(adam) if adam is not None else None,
        "generator": payload["generator"],
        "extra": json.loads(payload["extra"]),
    }


def check_finite(name: str, value: Tensor | float) -> None:
    v = value.detach() if isinstance(value, Tensor) else torch.tensor(value)
    if not torch.isfinite(v).all():
        raise NumericFailure(f"loss component {name!r} is not finite")


__all__ = [
    "AdamState",
    "CheckpointError",
    "ContractViolation",
    "DENSE_GROUP",
    "FDResult",
    "GRID_GROUP",
    "NumericFailure",
    "ParamStore",
    "adam_step",
    "backward",
    "check_finite",
    "finite_diff_check",
    "load_checkpoint",
    "save_checkpoint",
]
