import numpy as np
import pytest
import torch

from patchzoom.checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    load_module_tensors,
    module_tensors,
    save_checkpoint,
)
from patchzoom.config import ConfigError, ExperimentConfig, apply_overrides, load_config
from patchzoom.hafed import Hafed, HafedConfig, hafed_from_checkpoint
from patchzoom.tsu import Tsu


def _ckpt(component="hafed", d=8):
    model = Hafed(HafedConfig(d=d, k=4, hidden=5, M=2), seed=3)
    return Checkpoint(component, {"d": d, "k": 4, "hidden": 5, "M": 2}, module_tensors(model), {"seed": 3, "epoch": 1})


def test_save_load_save_identical(tmp_path):
    ckpt = _ckpt()
    p1 = save_checkpoint(ckpt, tmp_path / "a.ckpt")
    loaded = load_checkpoint(p1)
    p2 = save_checkpoint(loaded, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.metadata == ckpt.metadata and loaded.config == ckpt.config
    for name, arr in ckpt.tensors.items():
        assert np.array_equal(loaded.tensors[name], arr)


def test_wrong_component_and_shape(tmp_path):
    tsu_ckpt = Checkpoint("tsu", {"d": 8}, module_tensors(Tsu(8)))
    path = save_checkpoint(tsu_ckpt, tmp_path / "t.ckpt")
    with pytest.raises(CheckpointError, match="component"):
        load_checkpoint(path, "hafed")
    with pytest.raises(CheckpointError, match="component"):
        hafed_from_checkpoint(load_checkpoint(path))
    small = Hafed(HafedConfig(d=32, k=4, hidden=5, M=2))
    big = Hafed(HafedConfig(d=64, k=4, hidden=5, M=2))
    with pytest.raises(CheckpointError, match="stage1"):
        load_module_tensors(big, module_tensors(small))


def test_corrupt_checkpoint(tmp_path):
    path = save_checkpoint(_ckpt(), tmp_path / "a.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"X" + raw[1:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_config_round_trip_and_overrides(tmp_path):
    cfg = apply_overrides(ExperimentConfig(), [("ppo.optimizer.lr0", "1e-5"), ("seeds", "(1, 2)"),
                                               ("ablation.random_policy", "true"), ("name", "abl")])
    assert cfg.ppo.optimizer.lr0 == 1e-5 and cfg.seeds == (1, 2) and cfg.ablation.random_policy
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again.to_text() == cfg.to_text() and again.digest() == cfg.digest()
    (tmp_path / "c.txt").write_text("# comment\nhafed.M = 1\n")
    loaded = load_config(tmp_path / "c.txt", ["tsu.tau=0.95"])
    assert loaded.hafed.M == 1 and loaded.tsu.tau == 0.95


@pytest.mark.parametrize(
    "pairs, match",
    [
        ([("hafed.nope", "1")], "hafed.nope"),
        ([("ppo.clip_eps", "abc")], "ppo.clip_eps"),
        ([("ppo.clip_eps", "0")], "clip_eps"),
        ([("generator.d", "16")], "generator.d"),
        ([("ablation.global_update", "true"), ("ablation.local_update", "true")], "exclusive"),
        ([("eval.policy", "greedy")], "policy"),
    ],
)
def test_config_errors(pairs, match):
    with pytest.raises(ConfigError, match=match):
        apply_overrides(ExperimentConfig(), pairs)
