"""Training pipelines, ablation variants, the multi-seed benchmark and reports."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .agent import (
    ActorCritic,
    Environment,
    EvalResult,
    PpoConfig,
    PreparedSlide,
    episode_length,
    evaluate_policy,
    prepare_slides,
    train_agent,
)
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .datagen import DirectorySource, FeatureBag, SyntheticConfig, generate_bags
from .hafed import Hafed, HafedConfig, evaluate_hafed, train_hafed
from .metrics import (
    CompressibilityInputs,
    MetricRecord,
    attention_overlap,
    bce,
    classification_metrics,
    compressibility,
    ece,
    hit_ratio_series,
)
from .core import seeded_generator
from .tsu import Tsu, train_tsu

log = logging.getLogger(__name__)

ABLATION_BUDGET = 0.2
VARIANTS = (
    "random-policy",
    "global-update",
    "local-update",
    "terminal-reward",
    "random-sampling",
    "single-branch",
    "feature-degradation",
)


# --- components ------------------------------------------------------------

def generator_config(cfg: ExperimentConfig, seed: int, degraded: bool = False) -> SyntheticConfig:
    g = dataclasses.replace(cfg.generator, seed=seed)
    if degraded:
        a = cfg.ablation
        g = dataclasses.replace(
            g,
            noise_sigma=g.noise_sigma * a.degraded_noise_scale,
            class_separation=g.class_separation * a.degraded_separation_scale,
        )
    return g


def load_bags(cfg: ExperimentConfig, seed: int, degraded: bool = False) -> dict[str, list[FeatureBag]]:
    if cfg.data.path:
        src = DirectorySource(cfg.data.path)
        return {s: src.bags(s) for s in ("train", "val", "test")}
    return generate_bags(generator_config(cfg, seed, degraded), cfg.data.n_pos, cfg.data.n_neg,
                         cfg.data.split_fracs, seed=seed)


@dataclass
class Components:
    hafed: Hafed
    hafed_ckpt: Checkpoint
    tsu: Tsu
    tsu_ckpt: Checkpoint
    tau: float
    bags: dict[str, list[FeatureBag]]
    slides: dict[str, list[PreparedSlide]]

    def env(self, update_mode: str = "targeted") -> Environment:
        return Environment(self.hafed, self.tsu, self.tau, update_mode)


def train_components(
    cfg: ExperimentConfig,
    seed: int,
    bags: dict[str, list[FeatureBag]],
    hafed_config: HafedConfig | None = None,
) -> Components:
    hc = hafed_config or cfg.hafed
    ht = dataclasses.replace(cfg.hafed_train, seed=seed)
    hafed, hafed_ckpt = train_hafed(bags["train"], bags["val"], hc, ht)
    slides = {s: prepare_slides(b, hafed) for s, b in bags.items()}
    tc = dataclasses.replace(cfg.tsu, seed=seed)
    tsu, tsu_ckpt = train_tsu(
        [(s.Z, s.V) for s in slides["train"]],
        [(s.Z, s.V) for s in slides["val"]],
        tc,
        hafed_sha256=hafed_ckpt.sha256(),
    )
    return Components(hafed, hafed_ckpt, tsu, tsu_ckpt, tc.tau, bags, slides)


def ppo_config(cfg: ExperimentConfig, seed: int, budget: float, **changes) -> PpoConfig:
    return dataclasses.replace(cfg.ppo, seed=seed, budget=budget, **changes)


def train_policy(cfg, comps: Components, seed: int, budget: float, update_mode="targeted", reward_schedule="step"):
    pc = ppo_config(cfg, seed, budget, update_mode=update_mode, reward_schedule=reward_schedule)
    prov = {"hafed_sha256": comps.hafed_ckpt.sha256(), "tsu_sha256": comps.tsu_ckpt.sha256()}
    return train_agent(comps.slides["train"], comps.slides["val"], comps.env(update_mode), pc, prov)


# --- per-cohort evaluation -------------------------------------------------

@dataclass
class CohortResult:
    cohort: str
    seed: int
    y_hat: np.ndarray
    y: np.ndarray
    slide_ids: list[str]
    actions: list[list[int]] | None = None
    hit_ratio: dict[str, float] = field(default_factory=dict)        # positive slides, end of episode
    mean_attention: dict[str, float] = field(default_factory=dict)   # positive slides
    overlap: dict[str, float] = field(default_factory=dict)
    hit_curves: list[np.ndarray] = field(default_factory=list)
    distilled: float = 0.0

    def records(self, ece_bins: int = 10) -> list[MetricRecord]:
        m = classification_metrics(self.y_hat, self.y)
        cal = ece(self.y_hat, self.y, ece_bins)
        out = {
            "accuracy": m.accuracy,
            "auc": m.auc,
            "f1": m.f1,
            "loss": bce(self.y_hat, self.y),
            "ece": cal.ece,
            "distilled_patches": self.distilled,
        }
        if self.hit_ratio:
            out["hit_ratio"] = float(np.mean(list(self.hit_ratio.values())))
            out["mean_attention"] = float(np.mean(list(self.mean_attention.values())))
            out["attention_overlap"] = float(np.mean(list(self.overlap.values())))
            for q in range(1, 11):
                vals = [c[min(len(c) - 1, math.ceil(q / 10 * len(c)) - 1)] for c in self.hit_curves]
                out[f"hit_ratio_curve@{q / 10:.1f}"] = float(np.mean(vals))
        for b in range(ece_bins):
            out[f"ece_bin{b}_count"] = float(cal.counts[b])
            out[f"ece_bin{b}_acc"] = float(cal.accuracy[b])
            out[f"ece_bin{b}_conf"] = float(cal.confidence[b])
        return [MetricRecord(k, float(v), self.cohort, self.seed) for k, v in out.items()]


def full_attention(hafed: Hafed, slide: PreparedSlide) -> np.ndarray:
    with torch.no_grad():
        return hafed.classifier_forward(slide.V).alpha.numpy()


def hafed_cohort(comps: Components, seed: int, cohort: str = "hafed") -> CohortResult:
    test = comps.slides["test"]
    y_hat = np.array([float(comps.hafed.predict(s.V)) for s in test])
    res = CohortResult(cohort, seed, y_hat, np.array([s.y for s in test]), [s.slide_id for s in test])
    res.distilled = float(np.mean([s.N for s in test]))
    return res


def _trace_stats(res: CohortResult, comps: Components, action_lists: Sequence[Sequence[Sequence[int]]]) -> None:
    """Hit ratio and attention statistics averaged over repeated action lists per slide."""
    test = comps.slides["test"]
    for i, s in enumerate(test):
        T = len(action_lists[0][i])
        if not s.y:
            continue
        alpha = full_attention(comps.hafed, s)
        hrs, atts, ovs, curves = [], [], [], []
        for rep in action_lists:
            acts = rep[i]
            hr = hit_ratio_series(acts, s.tumor_mask, T)
            ov, att = attention_overlap(acts, alpha, T)
            hrs.append(hr.values[-1])
            atts.append(att)
            ovs.append(ov)
            curves.append(hr.values)
        res.hit_ratio[s.slide_id] = float(np.mean(hrs))
        res.mean_attention[s.slide_id] = float(np.mean(atts))
        res.overlap[s.slide_id] = float(np.mean(ovs))
        res.hit_curves.append(np.mean(curves, axis=0))


def policy_cohort(
    comps: Components,
    seed: int,
    cohort: str,
    ac: ActorCritic | None,
    budget: float,
    update_mode: str = "targeted",
    mode: str = "deterministic",
    repeats: int = 1,
    k: int | None = None,
    p: float | None = None,
) -> tuple[CohortResult, list[EvalResult]]:
    """Evaluate a policy on the test split; stochastic modes average ``repeats`` runs."""
    test = comps.slides["test"]
    env = comps.env(update_mode)
    runs = []
    n_runs = repeats if mode != "deterministic" else 1
    for r in range(n_runs):
        rng = seeded_generator(10_000 * (seed + 1) + r)
        runs.append(evaluate_policy(env, test, ac, budget, mode, rng, k, p))
    y_hat = np.mean([r.y_hat for r in runs], axis=0)
    res = CohortResult(cohort, seed, y_hat, runs[0].y, [s.slide_id for s in test])
    res.actions = [tr.actions for tr in runs[0].traces]
    res.distilled = float(np.mean([len(tr.steps) for tr in runs[0].traces]))
    _trace_stats(res, comps, [[tr.actions for tr in r.traces] for r in runs])
    return res, runs


def random_sampling_cohort(comps: Components, seed: int, budget: float, repeats: int) -> CohortResult:
    """Random patch subset at the budget, distilled and classified on its own."""
    test = comps.slides["test"]
    preds = np.zeros((repeats, len(test)))
    picks = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r, 0x5A])
        rep = []
        for i, s in enumerate(test):
            idx = np.sort(rng.choice(s.N, episode_length(budget, s.N), replace=False))
            preds[r, i] = float(comps.hafed.predict(s.V[idx]))
            rep.append(idx.tolist())
        picks.append(rep)
    res = CohortResult(f"random-sampling-{budget:g}", seed, preds.mean(0), np.array([s.y for s in test]),
                       [s.slide_id for s in test])
    res.distilled = float(np.mean([len(a) for a in picks[0]]))
    _trace_stats(res, comps, picks)
    return res


# --- the benchmark ---------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    cohorts: dict[str, CohortResult]
    timings: dict[str, float]
    checkpoints: dict[str, Checkpoint] = field(default_factory=dict)
    histories: dict[str, list] = field(default_factory=dict)
    traces: dict[str, list] = field(default_factory=dict)

    def records(self, ece_bins: int = 10) -> list[MetricRecord]:
        out = []
        for c in self.cohorts.values():
            out.extend(c.records(ece_bins))
        return out


def run_seed(
    cfg: ExperimentConfig,
    seed: int,
    variants: Sequence[str] = (),
    budgets: Sequence[float] | None = None,
) -> SeedResult:
    """Default pipeline at every budget plus the requested ablation variants, one seed."""
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variant {sorted(unknown)[0]!r}; expected one of {VARIANTS}")
    budgets = tuple(budgets if budgets is not None else cfg.eval.budgets)
    timings: dict[str, float] = {}
    t0 = time.perf_counter()
    bags = load_bags(cfg, seed)
    comps = train_components(cfg, seed, bags)
    timings["components"] = time.perf_counter() - t0
    cohorts: dict[str, CohortResult] = {"hafed": hafed_cohort(comps, seed)}
    result = SeedResult(seed, cohorts, timings,
                        checkpoints={"hafed": comps.hafed_ckpt, "tsu": comps.tsu_ckpt})
    reps = cfg.eval.random_repeats

    def add_policy(name, budget, update_mode="targeted", reward_schedule="step"):
        t = time.perf_counter()
        ac, ckpt, hist = train_policy(cfg, comps, seed, budget, update_mode, reward_schedule)
        res, runs = policy_cohort(comps, seed, name, ac, budget, update_mode)
        cohorts[name] = res
        result.checkpoints[name] = ckpt
        result.histories[name] = hist
        result.traces[name] = runs[0].traces
        timings[name] = time.perf_counter() - t

    for f in budgets:
        add_policy(f"sasha-{f:g}", f)
    fa = ABLATION_BUDGET
    if "random-policy" in variants:
        cohorts[f"random-policy-{fa:g}"], _ = policy_cohort(comps, seed, f"random-policy-{fa:g}", None, fa,
                                                             mode="random", repeats=reps)
    if "random-sampling" in variants:
        for f in budgets:
            cohorts[f"random-sampling-{f:g}"] = random_sampling_cohort(comps, seed, f, reps)
    if "global-update" in variants:
        add_policy(f"global-update-{fa:g}", fa, update_mode="global")
    if "local-update" in variants:
        add_policy(f"local-update-{fa:g}", fa, update_mode="local")
    if "terminal-reward" in variants:
        add_policy(f"terminal-reward-{fa:g}", fa, reward_schedule="terminal")
    if "single-branch" in variants or "feature-degradation" in variants:
        for name in ("single-branch", "feature-degradation"):
            if name not in variants:
                continue
            t = time.perf_counter()
            vbags = load_bags(cfg, seed, degraded=(name == "feature-degradation")) if name == "feature-degradation" else bags
            hc = dataclasses.replace(cfg.hafed, M=1) if name == "single-branch" else cfg.hafed
            vcomps = train_components(cfg, seed, vbags, hc)
            ac, ckpt, _ = train_policy(cfg, vcomps, seed, fa)
            cohorts[f"{name}-hafed"] = hafed_cohort(vcomps, seed, f"{name}-hafed")
            cohorts[f"{name}-{fa:g}"], _ = policy_cohort(vcomps, seed, f"{name}-{fa:g}", ac, fa)
            timings[name] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    log.info("seed %d done in %.1fs: %s", seed, timings["total"],
             {k: round(v.records()[0].value, 3) for k, v in cohorts.items()})
    return result


def run_benchmark(cfg: ExperimentConfig, variants: Sequence[str] = (), seeds: Sequence[int] | None = None) -> list[SeedResult]:
    return [run_seed(cfg, s, variants) for s in (seeds if seeds is not None else cfg.seeds)]


# --- reporting -------------------------------------------------------------

def summarize(records: Sequence[MetricRecord]) -> dict[tuple[str, str], tuple[float, float, int]]:
    """``(cohort, name) -> (mean, std, n_seeds)``, ignoring nan values."""
    groups: dict[tuple[str, str], list[float]] = {}
    for r in records:
        groups.setdefault((r.cohort, r.name), []).append(r.value)
    out = {}
    for key, vals in sorted(groups.items()):
        v = np.array([x for x in vals if not math.isnan(x)])
        out[key] = (float(v.mean()) if v.size else math.nan, float(v.std()) if v.size else math.nan, int(v.size))
    return out


_TABLE_METRICS = ("accuracy", "auc", "f1", "ece", "hit_ratio", "mean_attention", "distilled_patches")


def _cohort_order(cohorts):
    def key(c):
        if c == "hafed":
            return (0, c)
        if c.startswith("sasha-"):
            return (1, c)
        return (2, c)
    return sorted(cohorts, key=key)


def comparison_table(records: Sequence[MetricRecord], metrics: Sequence[str] = _TABLE_METRICS) -> str:
    """Cohort-by-metric table of seed means and standard deviations, tab separated."""
    summary = summarize(records)
    cohorts = _cohort_order({c for c, _ in summary})
    lines = ["cohort\t" + "\t".join(metrics)]
    for c in cohorts:
        cells = []
        for m in metrics:
            if (c, m) in summary:
                mean, std, _ = summary[(c, m)]
                cells.append(f"{mean:.3f}±{std:.3f}")
            else:
                cells.append("-")
        lines.append(c + "\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"


def plot_series(records: Sequence[MetricRecord]) -> dict[str, dict]:
    """Seed-mean hit-ratio curves and ECE reliability bars per cohort."""
    summary = summarize(records)
    series: dict[str, dict] = {}
    for (cohort, name), (mean, _, _) in summary.items():
        entry = series.setdefault(cohort, {"hit_ratio_curve": {}, "ece_bins": {}})
        if name.startswith("hit_ratio_curve@"):
            entry["hit_ratio_curve"][name.split("@")[1]] = mean
        elif name.startswith("ece_bin"):
            b, part = name[len("ece_bin"):].split("_", 1)
            entry["ece_bins"].setdefault(int(b), {})[part] = mean
    for entry in series.values():
        entry["ece_bins"] = [entry["ece_bins"][b] for b in sorted(entry["ece_bins"])]
    return series


def compressibility_records(cfg: ExperimentConfig, W: int = 100_000, H: int = 100_000, N: int = 72) -> list[MetricRecord]:
    """Nominal compressibility for both model kinds; only their ratio (= k) is meaningful."""
    g = cfg.generator
    full = compressibility(CompressibilityInputs(W, H, N, g.k, g.d, "full-resolution"))
    seq = compressibility(CompressibilityInputs(W, H, N, g.k, g.d, "sequential"))
    return [
        MetricRecord("compressibility", float(full), "full-resolution", -1),
        MetricRecord("compressibility", float(seq), "sequential", -1),
        MetricRecord("compressibility_ratio", float(seq / full), "sequential", -1),
    ]


def write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=float))
    return path
