"""Numeric substrate shared by every trainable component.

Layers are plain ``torch.nn`` modules run in double precision. Gradients come
from autograd; :func:`finite_difference_check` is the independent oracle used
to verify them. The optimizer is a small functional Adam/AdamW so that a step
is a pure function of ``(params, grads, state, config, step)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import torch
from torch import nn

DTYPE = torch.float64


class ShapeError(ValueError):
    """Input width or tensor shape does not match the declared layer."""


class ExhaustedActionError(RuntimeError):
    """Every entry of a masked distribution is masked out."""


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite."""


def init_linear(in_features: int, out_features: int, generator: torch.Generator) -> nn.Linear:
    """Dense layer with weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) and zero bias."""
    layer = nn.Linear(in_features, out_features, dtype=DTYPE)
    bound = 1.0 / math.sqrt(in_features)
    with torch.no_grad():
        w = torch.rand(out_features, in_features, generator=generator, dtype=DTYPE)
        layer.weight.copy_((2.0 * w - 1.0) * bound)
        layer.bias.zero_()
    return layer


class GatedAttention(nn.Module):
    """``score(sigmoid(proj_a(x)) * tanh(proj_b(x)))`` applied row-wise.

    Returns raw (pre-softmax) scores of shape ``(..., n, heads)``.
    """

    def __init__(self, d: int, hidden: int = 128, heads: int = 1, *, generator: torch.Generator):
        super().__init__()
        if heads < 1:
            raise ValueError(f"heads must be >= 1, got {heads}")
        self.d = d
        self.proj_a = init_linear(d, hidden, generator)
        self.proj_b = init_linear(d, hidden, generator)
        self.score = init_linear(hidden, heads, generator)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d:
            raise ShapeError(f"expected feature width {self.d}, got {x.shape[-1]}")
        gate = torch.sigmoid(self.proj_a(x)) * torch.tanh(self.proj_b(x))
        return self.score(gate)


def masked_softmax(scores: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    """Softmax along ``dim`` where ``mask`` is True for excluded entries.

    Excluded entries get probability exactly 0.
    """
    if mask is None:
        return torch.softmax(scores, dim=dim)
    if bool(mask.all(dim=dim).any()):
        raise ExhaustedActionError("all entries are masked")
    return torch.softmax(scores.masked_fill(mask, -math.inf), dim=dim)


def masked_log_softmax(scores: torch.Tensor, mask: torch.Tensor | None = None, dim: int = -1) -> torch.Tensor:
    if mask is None:
        return torch.log_softmax(scores, dim=dim)
    if bool(mask.all(dim=dim).any()):
        raise ExhaustedActionError("all entries are masked")
    return torch.log_softmax(scores.masked_fill(mask, -math.inf), dim=dim)


ParamSet = dict[str, torch.Tensor]


def param_set(module: nn.Module) -> ParamSet:
    return dict(module.named_parameters())


def grad(loss_fn: Callable[[], torch.Tensor], params: Mapping[str, torch.Tensor]) -> ParamSet:
    """Gradient of the scalar ``loss_fn()`` with respect to every tensor in ``params``."""
    names = list(params)
    tensors = [params[n] for n in names]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss {float(loss.detach())}; parameters: {names}")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return {
        n: torch.zeros_like(t) if g is None else g
        for n, t, g in zip(names, tensors, grads)
    }


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    step: float = 1e-5,
    max_entries: int | None = None,
    generator: torch.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central differences.

    Perturbs parameters in place (restoring them afterwards). With ``max_entries``
    only a random subset of entries per tensor is probed. The denominator is
    floored at ``floor`` so parameters with an exactly zero gradient (a bias under
    a shift-invariant softmax) are judged by the ~1e-11 rounding noise of the
    difference quotient in absolute terms.
    """
    analytic = grad(loss_fn, params)
    worst = 0.0
    with torch.no_grad():
        for name, p in params.items():
            flat = p.view(-1)
            idx = torch.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_entries]
            a_flat = analytic[name].reshape(-1)
            for j in idx.tolist():
                orig = flat[j].item()
                flat[j] = orig + step
                up = loss_fn().item()
                flat[j] = orig - step
                down = loss_fn().item()
                flat[j] = orig
                numeric = (up - down) / (2.0 * step)
                a = a_flat[j].item()
                denom = max(abs(a), abs(numeric), floor)
                worst = max(worst, abs(a - numeric) / denom)
    return worst


def clip_grad_norm(grads: Mapping[str, torch.Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / total
        for g in grads.values():
            g.mul_(scale)
    return total


@dataclass
class OptimizerConfig:
    algorithm: str = "adamw"          # "adam" couples weight decay into the gradient, "adamw" decouples it
    lr0: float = 4e-4
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)   # not stated in the source recipe; standard Adam constants
    eps: float = 1e-8
    schedule: str = "cosine"          # "constant" | "cosine"
    total_steps: int = 1000
    lr_floor: float = 0.0

    def __post_init__(self):
        if self.algorithm not in ("adam", "adamw"):
            raise ValueError(f"algorithm must be adam or adamw, got {self.algorithm!r}")
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        self.betas = tuple(self.betas)


def scheduled_lr(config: OptimizerConfig, step: int) -> float:
    if config.schedule == "constant":
        return config.lr0
    frac = min(max(step, 0), config.total_steps) / max(config.total_steps, 1)
    return config.lr_floor + 0.5 * (config.lr0 - config.lr_floor) * (1.0 + math.cos(math.pi * frac))


def init_optimizer_state(params: Mapping[str, torch.Tensor]) -> dict:
    return {
        "m": {n: torch.zeros_like(p) for n, p in params.items()},
        "v": {n: torch.zeros_like(p) for n, p in params.items()},
        "count": 0,
    }


def optimizer_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: dict,
    config: OptimizerConfig,
    step: int,
) -> tuple[Mapping[str, torch.Tensor], dict]:
    """One Adam/AdamW update at the scheduled learning rate for ``step``.

    Parameters are updated in place; the returned state is a new dict.
    """
    for n, g in grads.items():
        if g.shape != params[n].shape:
            raise ShapeError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(params[n].shape)} for {n}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {n}; step refused")
    lr = scheduled_lr(config, step)
    b1, b2 = config.betas
    count = state["count"] + 1
    m_new, v_new = {}, {}
    with torch.no_grad():
        for n, p in params.items():
            g = grads[n]
            if config.algorithm == "adam" and config.weight_decay:
                g = g + config.weight_decay * p
            m = b1 * state["m"][n] + (1 - b1) * g
            v = b2 * state["v"][n] + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** count)
            v_hat = v / (1 - b2 ** count)
            if config.algorithm == "adamw" and config.weight_decay:
                p.mul_(1 - lr * config.weight_decay)
            p.sub_(lr * m_hat / (v_hat.sqrt() + config.eps))
            m_new[n], v_new[n] = m, v
    return params, {"m": m_new, "v": v_new, "count": count}


class Optimizer:
    """Stateful convenience wrapper around :func:`optimizer_step` for a module or parameter subset."""

    def __init__(self, params: nn.Module | Mapping[str, torch.Tensor], config: OptimizerConfig):
        self.params = param_set(params) if isinstance(params, nn.Module) else dict(params)
        self.config = config
        self.state = init_optimizer_state(self.params)
        self.step_count = 0

    def step(self, grads: Mapping[str, torch.Tensor]) -> float:
        lr = scheduled_lr(self.config, self.step_count)
        _, self.state = optimizer_step(self.params, grads, self.state, self.config, self.step_count)
        self.step_count += 1
        return lr


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed) & 0xFFFF_FFFF_FFFF_FFFF)
    return g
