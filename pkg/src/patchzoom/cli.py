"""``patchzoom`` command line: data generation, training, evaluation, ablations, reports.

Every subcommand takes ``--config FILE`` and repeatable ``--set key=value``
overrides, and writes its artifacts plus a ``run.json`` manifest into a run
directory (``--run-dir``, default ``$PATCHZOOM_RUN_ROOT/<name>/<command>``).

Exit codes: 0 success, 2 configuration error, 3 dependency error,
4 numeric or training error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .agent import PolicyConfigError, TrainingError as AgentTrainingError, agent_from_checkpoint, write_traces
from .checkpoint import CheckpointError, file_sha256, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .core import NumericError, ShapeError
from .datagen import BagFormatError, ConfigError as DataConfigError, DirectorySource, ManifestError, generate_dataset
from .experiment import (
    ABLATION_BUDGET,
    VARIANTS,
    Components,
    comparison_table,
    compressibility_records,
    hafed_cohort,
    load_bags,
    plot_series,
    policy_cohort,
    run_seed,
    write_json,
)
from .hafed import TrainingError as HafedTrainingError, hafed_from_checkpoint, train_hafed
from .metrics import MetricConfigError, MetricRecord, read_records, write_records
from .tsu import DegenerateTauError, train_tsu, tsu_from_checkpoint
from .agent import prepare_slides, train_agent

log = logging.getLogger("patchzoom")

RUN_ROOT_ENV = "PATCHZOOM_RUN_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4


class DependencyError(RuntimeError):
    """Missing or mismatched upstream artifact (dataset or checkpoint)."""


# --- helpers ---------------------------------------------------------------

class RunDir:
    def __init__(self, path: Path, command: str, argv: Sequence[str], config: ExperimentConfig, seeds):
        self.path = path
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest = {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "config_digest": config.digest(),
            "seeds": list(seeds),
            "dependencies": {},
            "outputs": {},
        }
        (self.path / "config.txt").write_text(config.to_text())

    def depends(self, name: str, path) -> str:
        sha = file_sha256(path)
        self.manifest["dependencies"][name] = {"path": str(Path(path).resolve()), "sha256": sha}
        return sha

    def output(self, name: str, path: Path) -> Path:
        self.manifest["outputs"][name] = {"path": path.name, "sha256": file_sha256(path)}
        return path

    def close(self) -> None:
        (self.path / "run.json").write_text(json.dumps(self.manifest, indent=1, sort_keys=True) + "\n")


def _run_dir(args, cfg: ExperimentConfig, command: str, argv, seeds, suffix: str = "") -> RunDir:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        path = root / cfg.name / (command + suffix)
    return RunDir(path, command, argv, cfg, seeds)


def _seed(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg.seeds[0]


def _need(path, what: str) -> Path:
    if path is None:
        raise DependencyError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise DependencyError(f"{what}: {p} does not exist")
    return p


def _dataset(args, cfg: ExperimentConfig, run: RunDir, seed: int):
    """Bags per split from ``--data``/``data.path``, or generated in memory from the config."""
    root = args.data or cfg.data.path
    if root:
        root = _need(root, "dataset directory")
        try:
            src = DirectorySource(root)
        except ManifestError as exc:
            raise DependencyError(str(exc)) from exc
        run.depends("dataset", root / "manifest.txt")
        return {s: src.bags(s) for s in ("train", "val", "test")}
    run.manifest["dataset"] = "generated in memory from the generator config"
    return load_bags(cfg, seed)


def _load(path, component: str, run: RunDir, what: str):
    p = _need(path, f"--{what} checkpoint")
    sha = run.depends(what, p)
    return load_checkpoint(p, component), sha


def _check_provenance(meta: dict, key: str, expected: str, what: str) -> None:
    found = meta.get(key)
    if found is not None and found != expected:
        raise DependencyError(f"{what} was trained against a different checkpoint ({key} {found[:12]} != {expected[:12]})")


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(args, cfg, argv) -> int:
    seed = _seed(args, cfg)
    run = _run_dir(args, cfg, "gen-data", argv, [seed])
    out = Path(args.out) if args.out else run.path / "data"
    g = dataclasses.replace(cfg.generator, seed=seed)
    manifest = generate_dataset(g, cfg.data.n_pos, cfg.data.n_neg, cfg.data.split_fracs, seed=seed, out_dir=out)
    run.output("manifest", out / "manifest.txt")
    run.close()
    print(f"wrote {len(manifest.entries)} slides to {out}")
    return EXIT_OK


def cmd_train_hafed(args, cfg, argv) -> int:
    seed = _seed(args, cfg)
    run = _run_dir(args, cfg, "train-hafed", argv, [seed])
    bags = _dataset(args, cfg, run, seed)
    tc = dataclasses.replace(cfg.hafed_train, seed=seed)
    _, ckpt = train_hafed(bags["train"], bags["val"], cfg.hafed, tc)
    path = run.output("hafed", save_checkpoint(ckpt, run.path / "hafed.ckpt"))
    run.close()
    print(f"hafed: epoch {ckpt.metadata['epoch']} val_loss {ckpt.metadata['val_loss']:.4f} -> {path}")
    return EXIT_OK


def cmd_train_tsu(args, cfg, argv) -> int:
    seed = _seed(args, cfg)
    run = _run_dir(args, cfg, "train-tsu", argv, [seed])
    hckpt, hsha = _load(args.hafed, "hafed", run, "hafed")
    hafed = hafed_from_checkpoint(hckpt)
    bags = _dataset(args, cfg, run, seed)
    slides = {s: prepare_slides(bags[s], hafed) for s in ("train", "val")}
    tc = dataclasses.replace(cfg.tsu, seed=seed)
    _, ckpt = train_tsu([(s.Z, s.V) for s in slides["train"]], [(s.Z, s.V) for s in slides["val"]], tc, hsha)
    path = run.output("tsu", save_checkpoint(ckpt, run.path / "tsu.ckpt"))
    run.close()
    m = ckpt.metadata
    print(f"tsu: epoch {m['epoch']} val_mse {m['val_mse']:.4f} (identity {m['identity_mse']:.4f}) -> {path}")
    return EXIT_OK


def _components(args, cfg, run, seed, need_tsu: bool) -> tuple[Components | None, object, str, str | None]:
    hckpt, hsha = _load(args.hafed, "hafed", run, "hafed")
    hafed = hafed_from_checkpoint(hckpt)
    tsu, tau, tsha, tckpt = None, cfg.tsu.tau, None, None
    if need_tsu:
        tckpt, tsha = _load(args.tsu, "tsu", run, "tsu")
        _check_provenance(tckpt.metadata, "hafed_sha256", hsha, "tsu checkpoint")
        tsu, tcfg = tsu_from_checkpoint(tckpt)
        tau = tcfg.tau
    bags = _dataset(args, cfg, run, seed)
    slides = {s: prepare_slides(b, hafed) for s, b in bags.items()}
    return Components(hafed, hckpt, tsu, tckpt, tau, bags, slides), hsha, tsha


def cmd_train_agent(args, cfg, argv) -> int:
    seed = _seed(args, cfg)
    budget = args.budget if args.budget is not None else cfg.ppo.budget
    run = _run_dir(args, cfg, "train-agent", argv, [seed], suffix=f"-{budget:g}")
    comps, hsha, tsha = _components(args, cfg, run, seed, need_tsu=True)
    pc = dataclasses.replace(cfg.ppo, seed=seed, budget=budget)
    _, ckpt, history = train_agent(comps.slides["train"], comps.slides["val"], comps.env(pc.update_mode), pc,
                                   {"hafed_sha256": hsha, "tsu_sha256": tsha})
    path = run.output("agent", save_checkpoint(ckpt, run.path / "agent.ckpt"))
    run.output("history", write_json(history, run.path / "history.json"))
    run.close()
    print(f"agent: epoch {ckpt.metadata['epoch']} selection score {ckpt.metadata['selection_score']:.4f} -> {path}")
    return EXIT_OK


def cmd_eval(args, cfg, argv) -> int:
    seed = _seed(args, cfg)
    policy = args.policy or cfg.eval.policy
    suffix = f"-{args.budget:g}-{policy}"
    run = _run_dir(args, cfg, "eval", argv, [seed], suffix=suffix)
    use_agent = args.agent is not None or args.budget < 1.0
    comps, hsha, tsha = _components(args, cfg, run, seed, need_tsu=use_agent)
    if not use_agent:
        res = hafed_cohort(comps, seed)
        traces = []
    else:
        ackpt, _ = _load(args.agent, "agent", run, "agent")
        _check_provenance(ackpt.metadata, "hafed_sha256", hsha, "agent checkpoint")
        _check_provenance(ackpt.metadata, "tsu_sha256", tsha, "agent checkpoint")
        ac, pc = agent_from_checkpoint(ackpt)
        k = args.k if args.k is not None else cfg.eval.top_k
        p = args.p if args.p is not None else cfg.eval.top_p
        cohort = f"sasha-{args.budget:g}" + ("" if policy == "deterministic" else f"-{policy}")
        res, runs = policy_cohort(comps, seed, cohort, ac, args.budget, pc.update_mode, mode=policy,
                                  repeats=1, k=k if policy == "top-k" else None, p=p if policy == "top-p" else None)
        traces = runs[0].traces
    records = res.records(cfg.eval.ece_bins)
    run.output("metrics", write_records(records, run.path / "metrics.tsv"))
    if traces:
        run.output("traces", write_traces(traces, run.path / "traces.jsonl"))
    run.close()
    for r in records[:6]:
        print(f"{r.cohort}\t{r.name}\t{r.value:.4f}")
    return EXIT_OK


def _variants(args, cfg) -> list[str]:
    if args.variant:
        if "all" in args.variant:
            return list(VARIANTS)
        return list(dict.fromkeys(args.variant))
    a = cfg.ablation
    switched = [name for name in VARIANTS if getattr(a, name.replace("-", "_"))]
    return switched or list(VARIANTS)


def cmd_ablate(args, cfg, argv) -> int:
    variants = _variants(args, cfg)
    seeds = args.seeds if args.seeds else list(cfg.seeds)
    if args.data:
        cfg.data.path = str(_need(args.data, "dataset directory"))
    run = _run_dir(args, cfg, "ablate", argv, seeds, suffix="-" + "+".join(variants))
    if cfg.data.path:
        run.depends("dataset", Path(cfg.data.path) / "manifest.txt")
    records: list[MetricRecord] = []
    for seed in seeds:
        result = run_seed(cfg, seed, variants, budgets=(ABLATION_BUDGET,))
        records.extend(result.records(cfg.eval.ece_bins))
        write_records(records, run.path / "metrics.tsv")
    run.output("metrics", run.path / "metrics.tsv")
    table = comparison_table(records)
    (run.path / "comparison.tsv").write_text(table)
    run.output("comparison", run.path / "comparison.tsv")
    run.close()
    print(table, end="")
    return EXIT_OK


def _paths(trace_files) -> dict[str, list[list[int]]]:
    """Visit orders per slide from exported traces (sampled-path overlays)."""
    out: dict[str, list[list[int]]] = {}
    for f in trace_files or ():
        episodes: dict[tuple, list[int]] = {}
        for line in Path(_need(f, "trace file")).read_text().splitlines():
            row = json.loads(line)
            episodes.setdefault((row["slide_id"], row.get("mode", "")), []).append(int(row["action"]))
        for (sid, _), acts in sorted(episodes.items()):
            out.setdefault(sid, []).append(acts)
    return out


def cmd_report(args, cfg, argv) -> int:
    run = _run_dir(args, cfg, "report", argv, list(cfg.seeds))
    records: list[MetricRecord] = []
    for f in args.records:
        records.extend(read_records(_need(f, "metric records")))
        run.depends(f"records:{Path(f).name}", f)
    records.extend(compressibility_records(cfg))
    table = comparison_table(records)
    (run.path / "tables.tsv").write_text(table)
    run.output("tables", run.path / "tables.tsv")
    series = {"cohorts": plot_series(records), "paths": _paths(args.traces)}
    run.output("series", write_json(series, run.path / "series.json"))
    run.close()
    print(table, end="")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-hafed": cmd_train_hafed,
    "train-tsu": cmd_train_tsu,
    "train-agent": cmd_train_agent,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchzoom", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--run-dir", help=f"output directory (default ${RUN_ROOT_ENV}/<name>/<command>)")
        p.add_argument("--seed", type=int, help="seed (default: first of config seeds)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    def data(p):
        p.add_argument("--data", help="dataset directory (default: data.path, else generate in memory)")

    p = common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    p.add_argument("--out", help="dataset directory (default <run-dir>/data)")
    p = common(sub.add_parser("train-hafed", help="train the hierarchical classifier"))
    data(p)
    p = common(sub.add_parser("train-tsu", help="train the state update network"))
    data(p)
    p.add_argument("--hafed", help="HAFED checkpoint")
    p = common(sub.add_parser("train-agent", help="train the patch selection policy with PPO"))
    data(p)
    p.add_argument("--hafed", help="HAFED checkpoint")
    p.add_argument("--tsu", help="TSU checkpoint")
    p.add_argument("--budget", type=float, help="fraction of patches visited (default ppo.budget)")
    p = common(sub.add_parser("eval", help="evaluate on the test split, write metric records"))
    data(p)
    p.add_argument("--hafed", help="HAFED checkpoint")
    p.add_argument("--tsu", help="TSU checkpoint (needed with --agent)")
    p.add_argument("--agent", help="agent checkpoint (needed for budget < 1)")
    p.add_argument("--budget", type=float, choices=(0.1, 0.2, 1.0), default=1.0)
    p.add_argument("--policy", choices=("deterministic", "full", "top-k", "top-p"))
    p.add_argument("--k", type=int)
    p.add_argument("--p", type=float)
    p = common(sub.add_parser("ablate", help="run ablation variants over seeds and compare"))
    data(p)
    p.add_argument("--variant", action="append", choices=VARIANTS + ("all",))
    p.add_argument("--seeds", type=int, nargs="+")
    p = common(sub.add_parser("report", help="aggregate metric records into tables and plot series"))
    p.add_argument("--records", nargs="+", required=True, help="metric record files")
    p.add_argument("--traces", nargs="*", help="trace files for sampled-path series")
    return parser


_CONFIG_ERRORS = (ConfigError, DataConfigError, PolicyConfigError, MetricConfigError)
_DEPENDENCY_ERRORS = (DependencyError, CheckpointError, ManifestError, BagFormatError, ShapeError, FileNotFoundError)
_NUMERIC_ERRORS = (NumericError, HafedTrainingError, AgentTrainingError, DegenerateTauError)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set)
        return COMMANDS[args.command](args, cfg, argv)
    except _CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _DEPENDENCY_ERRORS as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except _NUMERIC_ERRORS as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
