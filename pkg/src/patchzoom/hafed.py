"""Hierarchical attention feature distiller.

Stage 1 pools the ``k`` sub-patch features of each patch into one ``d``-vector
``V_i``; stage 2 pools the ``N`` patch vectors with ``M`` attention branches and
classifies the slide with a shared linear head. Both stages are trained jointly
on fully zoomed-in bags.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_module_tensors, module_tensors
from .core import (
    DTYPE,
    GatedAttention,
    NumericError,
    Optimizer,
    OptimizerConfig,
    grad,
    init_linear,
    masked_softmax,
    param_set,
    seeded_generator,
)
from .datagen import FeatureBag

log = logging.getLogger(__name__)

COMPONENT = "hafed"


class StateError(RuntimeError):
    """Model used before its parameters were trained or loaded."""


class TrainingError(RuntimeError):
    pass


@dataclass
class HafedConfig:
    d: int = 32
    k: int = 16
    hidden: int = 64                # attention width; 128 at d=384, scaled down for d=32
    M: int = 5                      # stage-2 attention branches
    mask_top_n_stage1: int = 4
    mask_top_n_stage2: int = 8
    mask_prob: float = 0.4
    w_final: float = 1.0
    w_branch: float = 1.0
    w_div: float = 0.0              # the diversity term stalls training when tumor witnesses are sparse

    def __post_init__(self):
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ValueError(f"mask_prob must lie in [0, 1], got {self.mask_prob}")


@dataclass
class HafedTrainConfig:
    epochs: int = 30
    seed: int = 0
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(algorithm="adamw", lr0=1e-3, weight_decay=1e-4, schedule="cosine")
    )


@dataclass
class HafedOutput:
    alpha2: torch.Tensor          # (..., N, M), columns sum to 1
    alpha: torch.Tensor           # (..., N), branch mean
    h: torch.Tensor               # (..., d)
    branch_logits: torch.Tensor   # (..., M, 2)
    final_logits: torch.Tensor    # (..., 2)
    alpha1: torch.Tensor | None = None   # (N, k) when produced from U
    V: torch.Tensor | None = None        # (N, d) when produced from U

    @property
    def y_hat(self) -> torch.Tensor:
        return torch.softmax(self.final_logits, dim=-1)[..., 1]


def stochastic_top_mask(
    scores: torch.Tensor,
    top_n: int,
    prob: float,
    rng: torch.Generator,
    excluded: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mask (True = drop) the ``top_n`` highest scores of each vector along the last axis.

    Each vector flips its own coin with probability ``prob``; vectors with no
    more than ``top_n`` eligible entries are never masked.
    """
    s = scores.detach()
    if excluded is not None:
        s = s.masked_fill(excluded, -float("inf"))
        n_valid = (~excluded).sum(-1)
    else:
        n_valid = torch.full(s.shape[:-1], s.shape[-1])
    mask = torch.zeros_like(s, dtype=torch.bool)
    if top_n < 1 or prob <= 0 or s.shape[-1] <= top_n:
        return mask
    coin = torch.rand(s.shape[:-1], generator=rng, dtype=DTYPE) < prob
    apply = coin & (n_valid > top_n)
    top = torch.topk(s, top_n, dim=-1).indices
    mask.scatter_(-1, top, True)
    return mask & apply.unsqueeze(-1)


class Hafed(nn.Module):
    def __init__(self, config: HafedConfig, seed: int = 0):
        super().__init__()
        self.config = config
        gen = seeded_generator(seed)
        self.stage1 = GatedAttention(config.d, config.hidden, 1, generator=gen)
        self.stage2 = GatedAttention(config.d, config.hidden, config.M, generator=gen)
        self.head = init_linear(config.d, 2, gen)
        # A zero head gives no attention gradient until it has picked up the
        # class direction; a random head can lock attention onto the wrong sign.
        with torch.no_grad():
            self.head.weight.zero_()
        self.ready = False

    # stage 1 ---------------------------------------------------------------
    def fa_forward(self, U: torch.Tensor, mask_rng: torch.Generator | None = None):
        """Sub-patch attention and pooled feature for each patch.

        ``U`` is ``(..., k, d)``; returns ``alpha1 (..., k)`` and ``V (..., d)``.
        """
        if U.shape[-2] == 0:
            raise ValueError("patch has no sub-patches (k = 0)")
        scores = self.stage1(U).squeeze(-1)
        mask = None
        if mask_rng is not None:
            mask = stochastic_top_mask(scores, self.config.mask_top_n_stage1, self.config.mask_prob, mask_rng)
        alpha1 = masked_softmax(scores, mask)
        V = (alpha1.unsqueeze(-2) @ U).squeeze(-2)
        return alpha1, V

    def distill(self, U_a: torch.Tensor) -> torch.Tensor:
        """High-resolution feature of one zoomed patch (``(k, d)`` -> ``(d,)``), no masking."""
        if not self.ready:
            raise StateError("HAFED parameters are not trained or loaded")
        with torch.no_grad():
            return self.fa_forward(_as_tensor(U_a))[1]

    def distill_bag(self, U) -> torch.Tensor:
        """Distilled features for every patch of a bag, ``(N, k, d)`` -> ``(N, d)``."""
        if not self.ready:
            raise StateError("HAFED parameters are not trained or loaded")
        with torch.no_grad():
            return self.fa_forward(_as_tensor(U))[1]

    # stage 2 ---------------------------------------------------------------
    def classifier_forward(
        self,
        V: torch.Tensor,
        pad_mask: torch.Tensor | None = None,
        mask_rng: torch.Generator | None = None,
    ) -> HafedOutput:
        """Multi-branch attention pooling over patches and slide classification.

        ``V`` is ``(..., N, d)``; ``pad_mask (..., N)`` marks padding rows of a
        batched input.
        """
        if V.shape[-2] < 1:
            raise ValueError("slide has no patches")
        scores = self.stage2(V).transpose(-1, -2)          # (..., M, N)
        excluded = None if pad_mask is None else pad_mask.unsqueeze(-2).expand_as(scores)
        mask = excluded
        if mask_rng is not None:
            drop = stochastic_top_mask(scores, self.config.mask_top_n_stage2, self.config.mask_prob, mask_rng, excluded)
            mask = drop if excluded is None else drop | excluded
        alpha2_t = masked_softmax(scores, mask)             # (..., M, N)
        branch_h = alpha2_t @ V                              # (..., M, d)
        alpha = alpha2_t.mean(dim=-2)                        # (..., N)
        h = (alpha.unsqueeze(-2) @ V).squeeze(-2)
        return HafedOutput(
            alpha2=alpha2_t.transpose(-1, -2),
            alpha=alpha,
            h=h,
            branch_logits=self.head(branch_h),
            final_logits=self.head(h),
        )

    def forward(self, U: torch.Tensor, mask_rng: torch.Generator | None = None) -> HafedOutput:
        alpha1, V = self.fa_forward(U, mask_rng)
        out = self.classifier_forward(V, mask_rng=mask_rng)
        out.alpha1, out.V = alpha1, V
        return out

    def predict(self, V, pad_mask=None) -> torch.Tensor:
        with torch.no_grad():
            return self.classifier_forward(_as_tensor(V), pad_mask).y_hat


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x), dtype=DTYPE)


def attention_diversity(alpha2: torch.Tensor) -> torch.Tensor:
    """Mean pairwise cosine similarity between branch attention columns (0 for one branch)."""
    M = alpha2.shape[-1]
    if M < 2:
        return alpha2.sum() * 0.0
    cols = alpha2 / alpha2.norm(dim=-2, keepdim=True).clamp_min(1e-12)
    sim = cols.transpose(-1, -2) @ cols                 # (M, M)
    iu = torch.triu_indices(M, M, offset=1)
    return sim[..., iu[0], iu[1]].mean(-1)


def hafed_loss(out: HafedOutput, y: int, config: HafedConfig) -> tuple[torch.Tensor, dict[str, float]]:
    target = torch.tensor([int(y)])
    final_ce = F.cross_entropy(out.final_logits.reshape(1, 2), target)
    M = out.branch_logits.shape[-2]
    branch_ce = F.cross_entropy(out.branch_logits.reshape(M, 2), target.expand(M))
    div = attention_diversity(out.alpha2)
    total = config.w_final * final_ce + config.w_branch * branch_ce + config.w_div * div
    parts = {name: float(v.detach()) for name, v in (("final", final_ce), ("branch", branch_ce), ("div", div), ("total", total))}
    return total, parts


def bag_tensors(bag: FeatureBag) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.as_tensor(bag.Z, dtype=DTYPE), torch.as_tensor(bag.U, dtype=DTYPE)


def evaluate_hafed(model: Hafed, bags: list[FeatureBag]) -> dict[str, float]:
    losses, correct, probs = [], 0, []
    with torch.no_grad():
        for bag in bags:
            out = model(torch.as_tensor(bag.U, dtype=DTYPE))
            loss, _ = hafed_loss(out, bag.y, model.config)
            losses.append(float(loss))
            p = float(out.y_hat)
            probs.append(p)
            correct += int((p >= 0.5) == bool(bag.y))
    return {"loss": float(np.mean(losses)), "accuracy": correct / max(len(bags), 1), "probs": probs}


def train_hafed(
    train_bags: list[FeatureBag],
    val_bags: list[FeatureBag],
    config: HafedConfig,
    train_config: HafedTrainConfig | None = None,
) -> tuple[Hafed, Checkpoint]:
    """Joint training of both stages on full bags; keeps the best epoch by validation loss."""
    tc = train_config or HafedTrainConfig()
    if not train_bags or not val_bags:
        raise ValueError("train and validation splits must be nonempty")
    model = Hafed(config, seed=tc.seed)
    opt_cfg = OptimizerConfig(**{**asdict(tc.optimizer), "total_steps": tc.epochs * len(train_bags)})
    opt = Optimizer(model, opt_cfg)
    params = param_set(model)
    order_gen = seeded_generator(tc.seed + 1)
    mask_gen = seeded_generator(tc.seed + 2)
    data = [(torch.as_tensor(b.U, dtype=DTYPE), b.y) for b in train_bags]

    best = (float("inf"), None, -1)
    history = []
    for epoch in range(tc.epochs):
        model.train()
        total = 0.0
        for j in torch.randperm(len(data), generator=order_gen).tolist():
            U, y = data[j]

            def loss_fn():
                return hafed_loss(model(U, mask_rng=mask_gen), y, config)[0]

            try:
                grads = grad(loss_fn, params)
            except NumericError as exc:
                raise TrainingError(f"non-finite HAFED loss at step {opt.step_count}") from exc
            opt.step(grads)
        model.eval()
        val = evaluate_hafed(model, val_bags)
        history.append({"epoch": epoch, "val_loss": val["loss"], "val_accuracy": val["accuracy"]})
        log.debug("hafed epoch %d val_loss %.4f val_acc %.3f", epoch, val["loss"], val["accuracy"])
        if val["loss"] < best[0]:
            best = (val["loss"], module_tensors(model), epoch)
    load_module_tensors(model, best[1])
    model.ready = True
    ckpt = Checkpoint(
        COMPONENT,
        asdict(config),
        best[1],
        {"seed": tc.seed, "epoch": best[2], "val_loss": best[0], "epochs": tc.epochs},
    )
    return model, ckpt


def hafed_from_checkpoint(source) -> Hafed:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source, COMPONENT)
    if ckpt.component != COMPONENT:
        raise CheckpointError(f"component: expected {COMPONENT!r}, found {ckpt.component!r}")
    model = Hafed(HafedConfig(**ckpt.config))
    load_module_tensors(model, ckpt.tensors)
    model.ready = True
    model.eval()
    return model
