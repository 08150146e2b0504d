"""Targeted state updater.

The agent's state starts as the low-resolution features ``Z``. Visiting patch
``a`` writes its distilled feature ``V(a)`` into row ``a``; every unvisited row
whose cosine similarity with the (pre-update) row ``a`` reaches ``tau`` is
rewritten by a small MLP from ``[S(i), S(a), V(a)]``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_module_tensors, module_tensors
from .core import DTYPE, NumericError, Optimizer, OptimizerConfig, ShapeError, grad, init_linear, param_set, seeded_generator

log = logging.getLogger(__name__)

COMPONENT = "tsu"
UPDATE_MODES = ("targeted", "global", "local")


class RepeatActionError(RuntimeError):
    """A patch was visited twice in one episode."""


class DegenerateTauError(RuntimeError):
    """No similar pairs exist at the configured threshold, so there is nothing to learn."""


@dataclass
class TsuConfig:
    d: int = 32
    tau: float = 0.9
    epochs: int = 20
    batch_slides: int = 1
    train_budget: float = 0.2          # fraction of patches visited per random training episode
    mask_similar_during_training: bool = True
    seed: int = 0
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(algorithm="adam", lr0=1e-3, weight_decay=0.0, schedule="cosine")
    )

    def __post_init__(self):
        if not -1.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (-1, 1], got {self.tau}")
        if not 0.0 < self.train_budget <= 1.0:
            raise ValueError(f"train_budget must lie in (0, 1], got {self.train_budget}")
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)


@dataclass
class SlideState:
    S: torch.Tensor                   # (N, d)
    visited: list[int]
    t: int
    T: int

    @classmethod
    def initial(cls, Z, T: int) -> "SlideState":
        Z = torch.as_tensor(np.asarray(Z) if not isinstance(Z, torch.Tensor) else Z, dtype=DTYPE).clone()
        if not 1 <= T <= Z.shape[0]:
            raise ValueError(f"budget T={T} outside [1, N={Z.shape[0]}]")
        return cls(Z, [], 0, T)

    @property
    def visited_mask(self) -> torch.Tensor:
        m = torch.zeros(self.S.shape[0], dtype=torch.bool)
        m[self.visited] = True
        return m


class Tsu(nn.Module):
    """``LayerNorm(fc2(relu(fc1([s_i, s_a, v_a]))))`` with a gain-only norm."""

    def __init__(self, d: int, seed: int = 0):
        super().__init__()
        gen = seeded_generator(seed)
        self.d = d
        self.fc1 = init_linear(3 * d, 2 * d, gen)
        self.fc2 = init_linear(2 * d, d, gen)
        self.norm = nn.LayerNorm(d, elementwise_affine=True, bias=False, dtype=DTYPE)

    def forward(self, s_i: torch.Tensor, s_a: torch.Tensor, v_a: torch.Tensor) -> torch.Tensor:
        for name, x in (("s_i", s_i), ("s_a", s_a), ("v_a", v_a)):
            if x.shape[-1] != self.d:
                raise ShapeError(f"{name}: expected width {self.d}, got {x.shape[-1]}")
        x = torch.cat([s_i, s_a, v_a], dim=-1)
        return self.norm(self.fc2(F.relu(self.fc1(x))))


def cosine_to(S: torch.Tensor, a: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Cosine similarity of every row of ``S (..., N, d)`` with row ``a (...)``.

    Returns ``(cos, defined)``; ``defined`` is False where either row has zero norm.
    """
    idx = a.reshape(*a.shape, 1, 1).expand(*a.shape, 1, S.shape[-1])
    s_a = torch.gather(S, -2, idx)                                   # (..., 1, d)
    norms = S.norm(dim=-1)
    norm_a = s_a.norm(dim=-1)                                        # (..., 1)
    defined = (norms > 0) & (norm_a > 0)
    cos = (S @ s_a.transpose(-1, -2)).squeeze(-1) / (norms * norm_a).clamp_min(1e-300)
    return cos, defined


def similar_mask(
    S: torch.Tensor,
    a: torch.Tensor,
    tau: float,
    excluded: torch.Tensor,
) -> torch.Tensor:
    """Batched ``C \\ I``: rows with ``cos(S[i], S[a]) >= tau``, ``i != a``, not ``excluded``."""
    cos, defined = cosine_to(S, a)
    mask = (cos >= tau) & defined & ~excluded
    mask.scatter_(-1, a.unsqueeze(-1), False)
    return mask


def similar_set(S, a_t: int, tau: float, visited=()) -> list[int]:
    """Indices ``i != a_t`` with ``cos(S[i], S[a_t]) >= tau`` that are not in ``visited``."""
    S = torch.as_tensor(np.asarray(S) if not isinstance(S, torch.Tensor) else S, dtype=DTYPE)
    N = S.shape[0]
    if not 0 <= a_t < N:
        raise IndexError(f"a_t={a_t} outside [0, {N})")
    zero = S.norm(dim=-1) == 0
    if bool(zero.any()):
        log.warning("similar_set: %d zero-norm rows excluded", int(zero.sum()))
    excluded = torch.zeros(N, dtype=torch.bool)
    excluded[list(visited)] = True
    return torch.nonzero(similar_mask(S, torch.tensor(a_t), tau, excluded)).flatten().tolist()


def update_rows(
    S: torch.Tensor,
    a: torch.Tensor,
    v_a: torch.Tensor,
    C: torch.Tensor,
    tsu: Tsu | None,
) -> torch.Tensor:
    """New state: rows in ``C`` from the TSU (against the old state), row ``a`` set to ``v_a``.

    ``S (B, N, d)``, ``a (B,)``, ``v_a (B, d)``, ``C (B, N)``. Returns a fresh tensor.
    """
    out = S.clone()
    b_idx, i_idx = torch.nonzero(C, as_tuple=True)
    if b_idx.numel():
        if tsu is None:
            raise ValueError("a TSU model is required when the similar set is nonempty")
        s_a = S[torch.arange(S.shape[0]), a]
        out[b_idx, i_idx] = tsu(S[b_idx, i_idx], s_a[b_idx], v_a[b_idx])
    out[torch.arange(S.shape[0]), a] = v_a
    return out


def update_set(S, a, tau, visited, mode: str, pad: torch.Tensor | None = None) -> torch.Tensor:
    """The rows rewritten by the learned update for each update mode."""
    excluded = visited if pad is None else visited | pad
    if mode == "targeted":
        return similar_mask(S, a, tau, excluded)
    if mode == "global":
        C = ~excluded
        C.scatter_(-1, a.unsqueeze(-1), False)
        return C
    if mode == "local":
        return torch.zeros_like(visited)
    raise ValueError(f"unknown update mode {mode!r}; expected one of {UPDATE_MODES}")


def apply_update(
    state: SlideState,
    a_t: int,
    v_a,
    tsu: Tsu | None,
    tau: float,
    mode: str = "targeted",
) -> SlideState:
    """One environment transition; returns a new state and leaves ``state`` untouched."""
    if a_t in state.visited:
        raise RepeatActionError(f"patch {a_t} already visited at t={state.t}")
    if not 0 <= a_t < state.S.shape[0]:
        raise IndexError(f"a_t={a_t} outside [0, {state.S.shape[0]})")
    v_a = torch.as_tensor(v_a, dtype=DTYPE).reshape(1, -1)
    a = torch.tensor([a_t])
    S = state.S.unsqueeze(0)
    with torch.no_grad():
        C = update_set(S, a, tau, state.visited_mask.unsqueeze(0), mode)
        S_new = update_rows(S, a, v_a, C, tsu)[0]
    return SlideState(S_new, state.visited + [a_t], state.t + 1, state.T)


# --- training --------------------------------------------------------------

def _episode_pairs(
    Z: torch.Tensor,
    V: torch.Tensor,
    tsu: Tsu | None,
    config: TsuConfig,
    rng: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Roll one random-visit episode with the current TSU and collect its supervision.

    With ``tsu=None`` only visited rows change, which gives model-independent
    validation pairs.

    Returns stacked inputs ``(s_i, s_a, v_a)`` and targets ``V[i]``.
    """
    N = Z.shape[0]
    T = max(1, math.ceil(config.train_budget * N - 1e-9))
    S = Z.unsqueeze(0).clone()
    visited = torch.zeros(1, N, dtype=torch.bool)
    blocked = torch.zeros(1, N, dtype=torch.bool)
    inputs, targets = [], []
    for _ in range(T):
        allowed = ~(blocked if config.mask_similar_during_training else visited)
        if not bool(allowed.any()):
            break
        choices = torch.nonzero(allowed[0]).flatten()
        a = choices[torch.randint(len(choices), (1,), generator=rng)]
        C = similar_mask(S, a, config.tau, visited)
        idx = torch.nonzero(C[0]).flatten()
        if idx.numel():
            inputs.append((S[0, idx], S[0, a].expand(len(idx), -1), V[a].expand(len(idx), -1)))
            targets.append(V[idx])
        with torch.no_grad():
            S = update_rows(S, a, V[a], C if tsu is not None else torch.zeros_like(C), tsu)
        visited[0, a] = True
        blocked |= visited | C
    if not inputs:
        empty = Z.new_zeros(0, Z.shape[1])
        return empty, empty, empty, empty
    return (
        torch.cat([x[0] for x in inputs]),
        torch.cat([x[1] for x in inputs]),
        torch.cat([x[2] for x in inputs]),
        torch.cat(targets),
    )


def _collect(slides, tsu, config, rng):
    parts = [_episode_pairs(Z, V, tsu, config, rng) for Z, V in slides]
    return tuple(torch.cat([p[j] for p in parts]) for j in range(4))


def tsu_mse(tsu: Tsu, pairs) -> tuple[float, float]:
    """(model MSE, identity-baseline MSE) over collected pairs."""
    s_i, s_a, v_a, target = pairs
    if target.shape[0] == 0:
        return float("nan"), float("nan")
    with torch.no_grad():
        pred = tsu(s_i, s_a, v_a)
    return float(((pred - target) ** 2).mean()), float(((s_i - target) ** 2).mean())


def train_tsu(
    train_slides: list[tuple[torch.Tensor, torch.Tensor]],
    val_slides: list[tuple[torch.Tensor, torch.Tensor]],
    config: TsuConfig,
    hafed_sha256: str | None = None,
) -> tuple[Tsu, Checkpoint]:
    """Fit the TSU to predict distilled features of similar patches.

    ``*_slides`` are ``(Z, V)`` pairs, ``V`` being the frozen HAFED distillation
    of every patch. Keeps the epoch with the lowest validation MSE.
    """
    if not train_slides or not val_slides:
        raise ValueError("train and validation splits must be nonempty")
    tsu = Tsu(config.d, seed=config.seed)
    steps_per_epoch = math.ceil(len(train_slides) / config.batch_slides)
    opt_cfg = OptimizerConfig(**{**asdict(config.optimizer), "total_steps": config.epochs * steps_per_epoch})
    opt = Optimizer(tsu, opt_cfg)
    params = param_set(tsu)
    rng = seeded_generator(config.seed + 1)
    val_pairs = _collect(val_slides, None, config, seeded_generator(config.seed + 2))
    if val_pairs[3].shape[0] == 0:
        raise DegenerateTauError(f"tau={config.tau}: no similar pairs on the validation split")

    best = (float("inf"), None, -1)
    history = []
    for epoch in range(config.epochs):
        n_pairs = 0
        order = torch.randperm(len(train_slides), generator=rng).tolist()
        for start in range(0, len(order), config.batch_slides):
            batch = [train_slides[j] for j in order[start : start + config.batch_slides]]
            s_i, s_a, v_a, target = _collect(batch, tsu, config, rng)
            if target.shape[0] == 0:
                continue
            n_pairs += target.shape[0]

            def loss_fn():
                return F.mse_loss(tsu(s_i, s_a, v_a), target)

            try:
                g = grad(loss_fn, params)
            except NumericError as exc:
                raise NumericError(f"non-finite TSU loss at step {opt.step_count}") from exc
            opt.step(g)
        if n_pairs == 0:
            log.warning("tsu: no similar pairs in epoch %d at tau=%.3f", epoch, config.tau)
            raise DegenerateTauError(f"tau={config.tau}: no similar pairs in training epoch {epoch}")
        val_mse, identity_mse = tsu_mse(tsu, val_pairs)
        history.append(val_mse)
        log.debug("tsu epoch %d pairs %d val_mse %.4f identity %.4f", epoch, n_pairs, val_mse, identity_mse)
        if val_mse < best[0]:
            best = (val_mse, module_tensors(tsu), epoch)
    load_module_tensors(tsu, best[1])
    _, identity_mse = tsu_mse(tsu, val_pairs)
    meta = {
        "seed": config.seed,
        "epoch": best[2],
        "val_mse": best[0],
        "identity_mse": identity_mse,
        "n_val_pairs": int(val_pairs[3].shape[0]),
        "hafed_sha256": hafed_sha256,
    }
    return tsu, Checkpoint(COMPONENT, asdict(config), best[1], meta)


def tsu_from_checkpoint(source) -> tuple[Tsu, TsuConfig]:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source, COMPONENT)
    if ckpt.component != COMPONENT:
        raise CheckpointError(f"component: expected {COMPONENT!r}, found {ckpt.component!r}")
    config = TsuConfig(**ckpt.config)
    tsu = Tsu(config.d)
    load_module_tensors(tsu, ckpt.tensors)
    tsu.eval()
    return tsu, config
