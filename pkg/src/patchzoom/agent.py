"""Patch-selection agent.

An actor scores every patch row of the current state; a critic pools the state
with its own attention and predicts the return. Episodes follow the
scan-then-zoom loop: pick an unvisited patch, write its distilled feature into
the state, propagate to similar rows, classify, collect ``log p(y)``. Training
is PPO with GAE.

Rollouts run a whole batch of slides in lockstep; slides with a shorter budget
simply stop acting. The frozen HAFED and TSU only ever run under ``no_grad``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, load_module_tensors, module_tensors
from .core import (
    DTYPE,
    GatedAttention,
    NumericError,
    Optimizer,
    OptimizerConfig,
    clip_grad_norm,
    init_linear,
    masked_log_softmax,
    masked_softmax,
    param_set,
    seeded_generator,
)
from .datagen import FeatureBag
from .hafed import Hafed
from .metrics import bce, classification_metrics
from .tsu import RepeatActionError, Tsu, update_rows, update_set

log = logging.getLogger(__name__)

COMPONENT = "agent"
ACTION_MODES = ("deterministic", "full", "top-k", "top-p", "random")
REWARD_EPS = 1e-7


class PolicyConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    clip_eps: float = 0.1
    entropy_coef: float = 0.001
    grad_clip: float = 0.5
    gamma: float = 1.0
    lam: float = 0.95
    epochs: int = 20
    budget: float = 0.2
    rollout_episodes: int = 20           # episodes per rollout wave; one PPO update per wave
    ppo_epochs: int = 3
    minibatch_episodes: int = 1
    hidden: int = 32                     # the policy only needs a coarse per-row score at d=32
    reward_schedule: str = "step"        # "step" | "terminal"
    update_mode: str = "targeted"        # "targeted" | "global" | "local"
    seed: int = 0
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(algorithm="adamw", lr0=1e-3, weight_decay=1e-3, schedule="cosine")
    )

    def __post_init__(self):
        if not self.clip_eps > 0:
            raise ValueError(f"clip_eps must be positive, got {self.clip_eps}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if not 0.0 < self.budget <= 1.0:
            raise ValueError(f"budget must lie in (0, 1], got {self.budget}")
        if self.reward_schedule not in ("step", "terminal"):
            raise ValueError(f"reward_schedule must be step or terminal, got {self.reward_schedule!r}")
        if self.update_mode not in ("targeted", "global", "local"):
            raise ValueError(f"unknown update_mode {self.update_mode!r}")
        if self.minibatch_episodes < 1 or self.ppo_epochs < 1 or self.rollout_episodes < 1:
            raise ValueError("rollout_episodes, minibatch_episodes and ppo_epochs must be >= 1")
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)


def episode_length(budget: float, N: int) -> int:
    """``T = ceil(f * N)``, robust to float noise such as ``0.2 * 60``."""
    return max(1, min(N, math.ceil(round(budget * N, 9))))


# --- networks --------------------------------------------------------------

class ActorCritic(nn.Module):
    def __init__(self, d: int, hidden: int = 128, seed: int = 0):
        super().__init__()
        gen = seeded_generator(seed)
        self.actor = GatedAttention(d, hidden, 1, generator=gen)
        self.critic_attn = GatedAttention(d, hidden, 1, generator=gen)
        self.critic_head = init_linear(d, 1, gen)

    def actor_params(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if n.startswith("actor.")}

    def critic_params(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not n.startswith("actor.")}

    def logits(self, S: torch.Tensor) -> torch.Tensor:
        return self.actor(S).squeeze(-1)

    def value(self, S: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        """Critic estimate from the attention-pooled state ``alpha . S``."""
        alpha = masked_softmax(self.critic_attn(S).squeeze(-1), pad)
        pooled = (alpha.unsqueeze(-2) @ S).squeeze(-2)
        return self.critic_head(pooled).squeeze(-1)


def policy_forward(S: torch.Tensor, visited: torch.Tensor, ac: ActorCritic) -> torch.Tensor:
    """Action probabilities over patches with visited ones at exactly 0."""
    return masked_softmax(ac.logits(S), visited)


def reward(y_hat, y) -> torch.Tensor:
    """``y ln y_hat + (1 - y) ln(1 - y_hat)`` with ``y_hat`` clamped to ``[1e-7, 1 - 1e-7]``."""
    p = torch.as_tensor(y_hat, dtype=DTYPE).clamp(REWARD_EPS, 1 - REWARD_EPS)
    t = torch.as_tensor(y, dtype=DTYPE)
    return t * torch.log(p) + (1 - t) * torch.log1p(-p)


# --- action selection ------------------------------------------------------

def _check_mode(mode: str, k, p) -> None:
    if mode not in ACTION_MODES:
        raise PolicyConfigError(f"unknown action mode {mode!r}")
    if mode == "top-k" and (k is None or int(k) < 1):
        raise PolicyConfigError(f"top-k needs k >= 1, got {k}")
    if mode == "top-p" and (p is None or not 0.0 < float(p) <= 1.0):
        raise PolicyConfigError(f"top-p needs p in (0, 1], got {p}")


def restrict_distribution(probs: torch.Tensor, mode: str, k: int | None = None, p: float | None = None) -> torch.Tensor:
    """Renormalized distribution for top-k / top-p sampling (unchanged otherwise).

    Ties are ordered by index, so the lower index wins a place in the support.
    """
    _check_mode(mode, k, p)
    if mode not in ("top-k", "top-p"):
        return probs
    order = torch.sort(probs, dim=-1, descending=True, stable=True).indices
    sorted_p = torch.gather(probs, -1, order)
    if mode == "top-k":
        keep_sorted = torch.arange(probs.shape[-1]) < int(k)
        keep_sorted = keep_sorted.expand_as(sorted_p) & (sorted_p > 0)
    else:
        before = torch.cumsum(sorted_p, dim=-1) - sorted_p
        keep_sorted = (before < float(p) - 1e-12) & (sorted_p > 0)
    keep = torch.zeros_like(keep_sorted).scatter(-1, order, keep_sorted)
    out = torch.where(keep, probs, torch.zeros_like(probs))
    return out / out.sum(dim=-1, keepdim=True)


def sample_actions(
    probs: torch.Tensor,
    mode: str,
    rng: torch.Generator | None = None,
    k: int | None = None,
    p: float | None = None,
) -> torch.Tensor:
    """Batched action choice; ``probs`` is ``(B, N)``."""
    _check_mode(mode, k, p)
    if mode == "deterministic":
        return torch.argmax(probs, dim=-1)      # first maximal index on ties
    q = restrict_distribution(probs, mode, k, p)
    if rng is None:
        raise PolicyConfigError(f"mode {mode!r} needs a random generator")
    return torch.multinomial(q, 1, generator=rng).squeeze(-1)


def sample_action(probs, mode: str = "deterministic", rng: torch.Generator | None = None, k=None, p=None) -> int:
    probs = torch.as_tensor(probs, dtype=DTYPE)
    return int(sample_actions(probs.unsqueeze(0), mode, rng, k, p)[0])


# --- environment -----------------------------------------------------------

@dataclass
class PreparedSlide:
    """Everything a rollout needs from one bag: ``Z`` and the frozen distillation ``V``."""
    slide_id: str
    Z: torch.Tensor
    V: torch.Tensor
    y: int
    tumor_mask: np.ndarray

    @property
    def N(self) -> int:
        return self.Z.shape[0]


def prepare_slides(bags: Sequence[FeatureBag], hafed: Hafed) -> list[PreparedSlide]:
    return [
        PreparedSlide(b.slide_id, torch.as_tensor(b.Z, dtype=DTYPE), hafed.distill_bag(b.U), int(b.y), b.tumor_mask)
        for b in bags
    ]


@dataclass
class SlideBatch:
    slides: list[PreparedSlide]
    Z: torch.Tensor         # (B, N_max, d)
    V: torch.Tensor
    pad: torch.Tensor       # (B, N_max) True on padding rows
    y: torch.Tensor         # (B,)

    @classmethod
    def collate(cls, slides: Sequence[PreparedSlide]) -> "SlideBatch":
        if not slides:
            raise ValueError("empty slide batch")
        B, n_max, d = len(slides), max(s.N for s in slides), slides[0].Z.shape[1]
        Z = torch.zeros(B, n_max, d, dtype=DTYPE)
        V = torch.zeros(B, n_max, d, dtype=DTYPE)
        pad = torch.ones(B, n_max, dtype=torch.bool)
        for b, s in enumerate(slides):
            Z[b, : s.N], V[b, : s.N], pad[b, : s.N] = s.Z, s.V, False
        y = torch.tensor([s.y for s in slides], dtype=DTYPE)
        return cls(list(slides), Z, V, pad, y)


@dataclass
class Environment:
    hafed: Hafed
    tsu: Tsu | None
    tau: float
    update_mode: str = "targeted"

    def classify(self, S: torch.Tensor, pad: torch.Tensor | None = None) -> torch.Tensor:
        with torch.no_grad():
            return self.hafed.classifier_forward(S, pad).y_hat


@dataclass
class StepRecord:
    step: int
    action: int
    log_prob: float
    value: float
    reward: float
    y_hat: float
    state_sha: str


@dataclass
class EpisodeTrace:
    slide_id: str
    y: int
    mode: str
    steps: list[StepRecord]
    y_hat: float

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]

    def to_lines(self) -> list[str]:
        return [
            json.dumps({"slide_id": self.slide_id, "mode": self.mode, **asdict(s)}, sort_keys=True)
            for s in self.steps
        ]


@dataclass
class Rollout:
    batch: SlideBatch
    T: torch.Tensor             # (B,) episode lengths
    actions: torch.Tensor       # (B, T_max), -1 after an episode ends
    log_probs: torch.Tensor     # (B, T_max)
    values: torch.Tensor
    rewards: torch.Tensor
    y_hats: torch.Tensor        # classifier output after each step
    valid: torch.Tensor         # (B, T_max) bool
    final_state: torch.Tensor   # (B, N_max, d)
    traces: list[EpisodeTrace]
    states: torch.Tensor | None = None     # (B, T_max, N_max, d) state before each action
    visited: torch.Tensor | None = None    # (B, T_max, N_max) visited mask before each action

    @property
    def final_y_hat(self) -> torch.Tensor:
        idx = (self.T - 1).unsqueeze(-1)
        return torch.gather(self.y_hats, 1, idx).squeeze(-1)


def _sha(x: torch.Tensor) -> str:
    return hashlib.sha256(x.contiguous().numpy().tobytes()).hexdigest()[:16]


def rollout(
    env: Environment,
    batch: SlideBatch,
    ac: ActorCritic | None,
    budget: float,
    mode: str = "deterministic",
    rng: torch.Generator | None = None,
    k: int | None = None,
    p: float | None = None,
    reward_schedule: str = "step",
    record_states: bool = False,
    trace_mode: str = "eval",
) -> Rollout:
    """Run one episode per slide of ``batch`` in lockstep.

    ``mode='random'`` ignores ``ac`` and picks uniformly among unvisited patches
    (values are reported as 0).
    """
    _check_mode(mode, k, p)
    if mode == "random" and rng is None:
        raise PolicyConfigError("random policy needs a generator")
    B, n_max, _ = batch.Z.shape
    N = (~batch.pad).sum(-1)
    T = torch.tensor([episode_length(budget, int(n)) for n in N])
    t_max = int(T.max())
    S = batch.Z.clone()
    visited = torch.zeros(B, n_max, dtype=torch.bool)
    ar = torch.arange(B)
    out = {name: torch.zeros(B, t_max, dtype=DTYPE) for name in ("log_probs", "values", "rewards", "y_hats")}
    actions = torch.full((B, t_max), -1, dtype=torch.long)
    valid = torch.arange(t_max).unsqueeze(0) < T.unsqueeze(1)
    states = torch.zeros(B, t_max, n_max, S.shape[-1], dtype=DTYPE) if record_states else None
    visited_hist = torch.zeros(B, t_max, n_max, dtype=torch.bool) if record_states else None
    shas: list[list[str]] = [[] for _ in range(B)]

    with torch.no_grad():
        for t in range(t_max):
            active = valid[:, t]
            blocked = torch.where(active.unsqueeze(-1), visited | batch.pad, batch.pad)
            if mode == "random":
                probs = (~blocked).to(DTYPE)
                probs = probs / probs.sum(-1, keepdim=True)
                value = torch.zeros(B, dtype=DTYPE)
            else:
                probs = policy_forward(S, blocked, ac)
                value = ac.value(S, batch.pad)
            a = sample_actions(probs, "full" if mode == "random" else mode, rng, k, p)
            if bool((visited[ar, a] & active).any()):
                raise RepeatActionError("masked policy selected a visited patch")
            if record_states:
                states[:, t] = S
                visited_hist[:, t] = visited
            for b in torch.nonzero(active).flatten().tolist():
                shas[b].append(_sha(S[b, : int(N[b])]))

            C = update_set(S, a, env.tau, visited, env.update_mode, batch.pad) & active.unsqueeze(-1)
            S_next = update_rows(S, a, batch.V[ar, a], C, env.tsu)
            S = torch.where(active.view(B, 1, 1), S_next, S)
            visited[ar[active], a[active]] = True
            y_hat = env.classify(S, batch.pad)
            r = reward(y_hat, batch.y)

            actions[:, t] = torch.where(active, a, torch.full_like(a, -1))
            out["log_probs"][:, t] = torch.log(probs[ar, a]) * active
            out["values"][:, t] = value * active
            out["y_hats"][:, t] = torch.where(active, y_hat, out["y_hats"][:, t - 1] if t else y_hat)
            out["rewards"][:, t] = r * active

    if reward_schedule == "terminal":
        last = torch.arange(t_max).unsqueeze(0) == (T - 1).unsqueeze(1)
        out["rewards"] = torch.where(last, out["rewards"], torch.zeros_like(out["rewards"]))
    elif reward_schedule != "step":
        raise ValueError(f"unknown reward schedule {reward_schedule!r}")

    traces = []
    for b, s in enumerate(batch.slides):
        steps = [
            StepRecord(t, int(actions[b, t]), float(out["log_probs"][b, t]), float(out["values"][b, t]),
                       float(out["rewards"][b, t]), float(out["y_hats"][b, t]), shas[b][t])
            for t in range(int(T[b]))
        ]
        if len(set(x.action for x in steps)) != len(steps):
            raise RepeatActionError(f"{s.slide_id}: repeated action in trace")
        traces.append(EpisodeTrace(s.slide_id, s.y, trace_mode, steps, steps[-1].y_hat))
    return Rollout(batch, T, actions, out["log_probs"], out["values"], out["rewards"], out["y_hats"], valid,
                   S, traces, states, visited_hist)


def rollout_episode(
    slide: PreparedSlide,
    env: Environment,
    ac: ActorCritic | None,
    budget: float,
    mode: str = "deterministic",
    rng: torch.Generator | None = None,
    **kwargs,
) -> tuple[EpisodeTrace, torch.Tensor]:
    """Single-slide rollout; returns the trace and the final state ``(N, d)``."""
    r = rollout(env, SlideBatch.collate([slide]), ac, budget, mode, rng, **kwargs)
    return r.traces[0], r.final_state[0]


def replay(slide: PreparedSlide, env: Environment, actions: Sequence[int]) -> torch.Tensor:
    """Final state after visiting ``actions`` in order."""
    batch = SlideBatch.collate([slide])
    S, visited = batch.Z.clone(), torch.zeros_like(batch.pad)
    with torch.no_grad():
        for a_t in actions:
            if bool(visited[0, a_t]):
                raise RepeatActionError(f"patch {a_t} repeated in replay")
            a = torch.tensor([a_t])
            C = update_set(S, a, env.tau, visited, env.update_mode, batch.pad)
            S = update_rows(S, a, batch.V[0, a], C, env.tsu)
            visited[0, a_t] = True
    return S[0]


# --- advantage estimation --------------------------------------------------

def compute_gae(rewards, values, gamma: float = 1.0, lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """GAE for one finished episode (bootstrap value 0). Returns ``(advantages, returns)``."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    adv = np.zeros_like(r)
    running = 0.0
    for t in range(len(r) - 1, -1, -1):
        v_next = v[t + 1] if t + 1 < len(r) else 0.0
        running = r[t] + gamma * v_next - v[t] + gamma * lam * running
        adv[t] = running
    return adv, adv + v


def gae_batch(rewards: torch.Tensor, values: torch.Tensor, valid: torch.Tensor, gamma: float, lam: float):
    """:func:`compute_gae` over a padded ``(B, T_max)`` batch."""
    B, t_max = rewards.shape
    adv = torch.zeros_like(rewards)
    running = torch.zeros(B, dtype=rewards.dtype)
    v_next = torch.zeros(B, dtype=rewards.dtype)
    for t in range(t_max - 1, -1, -1):
        m = valid[:, t]
        delta = rewards[:, t] + gamma * v_next - values[:, t]
        running = torch.where(m, delta + gamma * lam * running, torch.zeros_like(running))
        adv[:, t] = running
        v_next = torch.where(m, values[:, t], torch.zeros_like(v_next))
    return adv, adv + values * valid


# --- PPO -------------------------------------------------------------------

def ppo_losses(
    ac: ActorCritic,
    states: torch.Tensor,
    blocked: torch.Tensor,
    pad: torch.Tensor,
    actions: torch.Tensor,
    old_log_probs: torch.Tensor,
    advantages: torch.Tensor,
    returns: torch.Tensor,
    valid: torch.Tensor,
    config: PpoConfig,
) -> tuple[torch.Tensor, torch.Tensor, dict[str, float]]:
    """Actor loss (clipped surrogate minus entropy bonus) and critic MSE over valid steps.

    Shapes: ``states (E, T, N, d)``, ``blocked (E, T, N)``, ``pad (E, N)``,
    the rest ``(E, T)``.
    """
    logp_all = masked_log_softmax(ac.logits(states), blocked)
    a = actions.clamp_min(0).unsqueeze(-1)
    logp = torch.gather(logp_all, -1, a).squeeze(-1)
    ratio = torch.exp(logp - old_log_probs)
    surr = torch.minimum(ratio * advantages, ratio.clamp(1 - config.clip_eps, 1 + config.clip_eps) * advantages)
    safe_logp = logp_all.masked_fill(blocked, 0.0)
    entropy = -(torch.exp(safe_logp).masked_fill(blocked, 0.0) * safe_logp).sum(-1)
    w = valid.to(DTYPE)
    n = w.sum().clamp_min(1.0)
    actor_loss = -((surr + config.entropy_coef * entropy) * w).sum() / n
    v = ac.value(states, pad.unsqueeze(1).expand(-1, states.shape[1], -1))
    critic_loss = (((v - returns) ** 2) * w).sum() / n
    with torch.no_grad():
        stats = {
            "surrogate": float((surr * w).sum() / n),
            "entropy": float((entropy * w).sum() / n),
            "clip_frac": float((((ratio - 1).abs() > config.clip_eps) * w).sum() / n),
        }
    return actor_loss, critic_loss, stats


def ppo_update(
    ac: ActorCritic,
    data: Rollout,
    config: PpoConfig,
    actor_opt: Optimizer,
    critic_opt: Optimizer,
    rng: torch.Generator,
) -> dict[str, float]:
    """Several clipped-surrogate passes over one rollout wave.

    Advantages are normalized over the whole wave. Actor and critic gradients
    are clipped to ``grad_clip`` separately.
    """
    if data.states is None:
        raise ValueError("rollout was collected without record_states=True")
    adv, returns = gae_batch(data.rewards, data.values, data.valid, config.gamma, config.lam)
    flat = adv[data.valid]
    adv = (adv - flat.mean()) / (flat.std() + 1e-8) if flat.numel() > 1 else adv
    adv = adv * data.valid
    pad = data.batch.pad
    blocked_all = data.visited | pad.unsqueeze(1)
    # Steps past the end of an episode still need one allowed action.
    blocked_all = torch.where(data.valid.unsqueeze(-1), blocked_all, pad.unsqueeze(1).expand_as(blocked_all))
    actor_params, critic_params = ac.actor_params(), ac.critic_params()
    B = data.actions.shape[0]
    totals = {"actor_loss": 0.0, "critic_loss": 0.0, "actor_grad_norm": 0.0, "critic_grad_norm": 0.0}
    n_steps = 0
    for _ in range(config.ppo_epochs):
        order = torch.randperm(B, generator=rng)
        for start in range(0, B, config.minibatch_episodes):
            idx = order[start : start + config.minibatch_episodes]
            args = (data.states[idx], blocked_all[idx], pad[idx], data.actions[idx], data.log_probs[idx],
                    adv[idx], returns[idx], data.valid[idx], config)
            actor_loss, critic_loss, _ = ppo_losses(ac, *args)
            if not (torch.isfinite(actor_loss) and torch.isfinite(critic_loss)):
                raise TrainingError(f"non-finite PPO loss at update {actor_opt.step_count}")
            g_actor = dict(zip(actor_params, torch.autograd.grad(actor_loss, list(actor_params.values()), retain_graph=True)))
            g_critic = dict(zip(critic_params, torch.autograd.grad(critic_loss, list(critic_params.values()))))
            totals["actor_grad_norm"] += clip_grad_norm(g_actor, config.grad_clip)
            totals["critic_grad_norm"] += clip_grad_norm(g_critic, config.grad_clip)
            actor_opt.step(g_actor)
            critic_opt.step(g_critic)
            totals["actor_loss"] += float(actor_loss.detach())
            totals["critic_loss"] += float(critic_loss.detach())
            n_steps += 1
    return {k: v / max(n_steps, 1) for k, v in totals.items()}


# --- training and evaluation -----------------------------------------------

@dataclass
class EvalResult:
    y_hat: np.ndarray
    y: np.ndarray
    traces: list[EpisodeTrace]
    loss: float
    accuracy: float
    auc: float
    f1: float
    rollout: Rollout

    @property
    def selection_score(self) -> float:
        return selection_score(self.loss, self.auc, self.f1)


def selection_score(loss: float, auc: float, f1: float) -> float:
    """``Loss + 2 - (AUROC + F1)``; 0 for a perfect model."""
    return loss + 2.0 - (auc + f1)


def evaluate_policy(
    env: Environment,
    slides: Sequence[PreparedSlide],
    ac: ActorCritic | None,
    budget: float,
    mode: str = "deterministic",
    rng: torch.Generator | None = None,
    k: int | None = None,
    p: float | None = None,
) -> EvalResult:
    r = rollout(env, SlideBatch.collate(slides), ac, budget, mode, rng, k, p)
    y_hat = r.final_y_hat.numpy().copy()
    y = np.array([s.y for s in slides])
    m = classification_metrics(y_hat, y)
    return EvalResult(y_hat, y, r.traces, bce(y_hat, y), m.accuracy, m.auc, m.f1, r)


def train_agent(
    train_slides: Sequence[PreparedSlide],
    val_slides: Sequence[PreparedSlide],
    env: Environment,
    config: PpoConfig,
    provenance: dict | None = None,
) -> tuple[ActorCritic, Checkpoint, list[dict]]:
    """PPO training; keeps the epoch with the lowest validation selection score."""
    if not train_slides or not val_slides:
        raise ValueError("train and validation splits must be nonempty")
    d = train_slides[0].Z.shape[1]
    ac = ActorCritic(d, config.hidden, seed=config.seed)
    n = len(train_slides)
    waves = [(a, min(n, a + config.rollout_episodes)) for a in range(0, n, config.rollout_episodes)]
    updates_per_epoch = config.ppo_epochs * sum(math.ceil((b - a) / config.minibatch_episodes) for a, b in waves)
    opt_cfg = OptimizerConfig(**{**asdict(config.optimizer), "total_steps": config.epochs * updates_per_epoch})
    actor_opt = Optimizer(ac.actor_params(), opt_cfg)
    critic_opt = Optimizer(ac.critic_params(), opt_cfg)
    rng = seeded_generator(config.seed + 1)

    best = (float("inf"), module_tensors(ac), -1)
    history = []
    for epoch in range(config.epochs):
        order = torch.randperm(n, generator=rng).tolist()
        correct, totals = 0.0, {}
        for a, b in waves:
            batch = SlideBatch.collate([train_slides[j] for j in order[a:b]])
            data = rollout(env, batch, ac, config.budget, "full", rng,
                           reward_schedule=config.reward_schedule, record_states=True, trace_mode="train")
            stats = ppo_update(ac, data, config, actor_opt, critic_opt, rng)
            correct += float(((data.final_y_hat >= 0.5).to(DTYPE) == batch.y).to(DTYPE).sum())
            for key, v in stats.items():
                totals[key] = totals.get(key, 0.0) + v * (b - a) / n
        val = evaluate_policy(env, val_slides, ac, config.budget)
        score = selection_score(val.loss, val.auc, val.f1)
        row = {"epoch": epoch, "train_accuracy": correct / n, "val_loss": val.loss, "val_auc": val.auc,
               "val_f1": val.f1, "val_accuracy": val.accuracy, "score": score, **totals}
        history.append(row)
        log.debug("agent epoch %d %s", epoch, row)
        if score < best[0]:
            best = (score, module_tensors(ac), epoch)
    load_module_tensors(ac, best[1])
    meta = {"seed": config.seed, "epoch": best[2], "selection_score": best[0], **(provenance or {})}
    return ac, Checkpoint(COMPONENT, asdict(config), best[1], meta), history


def agent_from_checkpoint(source, d: int | None = None) -> tuple[ActorCritic, PpoConfig]:
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source, COMPONENT)
    if ckpt.component != COMPONENT:
        raise CheckpointError(f"component: expected {COMPONENT!r}, found {ckpt.component!r}")
    config = PpoConfig(**ckpt.config)
    width = d if d is not None else ckpt.tensors["critic_head.weight"].shape[1]
    ac = ActorCritic(width, config.hidden)
    load_module_tensors(ac, ckpt.tensors)
    return ac, config


def write_traces(traces: Sequence[EpisodeTrace], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(line + "\n" for tr in traces for line in tr.to_lines()))
    return path
