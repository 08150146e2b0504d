import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from patchzoom.core import DTYPE, ShapeError, finite_difference_check, param_set, seeded_generator
from patchzoom.datagen import SyntheticConfig, generate_bags
from patchzoom.hafed import Hafed, HafedConfig
from patchzoom.tsu import (
    DegenerateTauError,
    RepeatActionError,
    SlideState,
    Tsu,
    TsuConfig,
    apply_update,
    similar_set,
    train_tsu,
    tsu_from_checkpoint,
    tsu_mse,
    _collect,
)


def test_similar_set_examples():
    S = torch.randn(6, 4, generator=seeded_generator(0), dtype=DTYPE)
    assert similar_set(S, 2, 1.0) == []
    S[4] = S[2]
    assert 4 in similar_set(S, 2, 0.9)
    assert similar_set(S, 2, 0.9, visited=[4]) == []
    S[1] = 0.0
    assert 1 not in similar_set(S, 2, -0.99)
    with pytest.raises(IndexError):
        similar_set(S, 6, 0.5)


def test_similar_set_random_8x4():
    S = torch.randn(8, 4, generator=seeded_generator(7), dtype=DTYPE)
    for a in range(8):
        assert similar_set(S, a, 0.5) == oracles.similar_set(S.tolist(), a, 0.5)


@given(st.integers(2, 20), st.integers(1, 6), st.floats(-0.9, 1.0), st.data())
@settings(max_examples=150)
def test_similar_set_matches_oracle(N, d, tau, data):
    rows = data.draw(st.lists(st.lists(st.integers(-3, 3), min_size=d, max_size=d), min_size=N, max_size=N))
    a = data.draw(st.integers(0, N - 1))
    visited = data.draw(st.sets(st.integers(0, N - 1)))
    S = torch.tensor(rows, dtype=DTYPE)
    assert similar_set(S, a, tau, visited) == oracles.similar_set(rows, a, tau, visited)


def test_tsu_shapes_and_normalization():
    net = Tsu(384)
    assert net.fc1.weight.shape == (768, 1152)
    assert net.fc2.weight.shape == (384, 768)
    assert net.norm.weight.shape == (384,)
    assert sum(p.numel() for p in net.norm.parameters()) == 384
    x = torch.randn(5, 384, dtype=DTYPE)
    out = net(x, x.flip(0), -x)
    assert torch.allclose(out.mean(-1), torch.zeros(5, dtype=DTYPE), atol=1e-12)
    assert torch.allclose(out.var(-1, unbiased=False), torch.ones(5, dtype=DTYPE), atol=1e-3)
    with pytest.raises(ShapeError):
        net(x[:, :10], x, x)


def test_tsu_formula_oracle():
    net = Tsu(3, seed=4)
    with torch.no_grad():
        net.norm.weight.copy_(torch.tensor([0.5, 2.0, -1.0], dtype=DTYPE))
    s_i, s_a, v_a = (torch.tensor(v, dtype=DTYPE) for v in ([0.1, -0.4, 1.0], [2.0, 0.3, -0.2], [0.0, 1.5, 0.7]))
    W1, b1 = net.fc1.weight.tolist(), net.fc1.bias.tolist()
    W2, b2 = net.fc2.weight.tolist(), net.fc2.bias.tolist()
    x = s_i.tolist() + s_a.tolist() + v_a.tolist()
    h = [max(0.0, sum(w * v for w, v in zip(W1[j], x)) + b1[j]) for j in range(6)]
    z = [sum(w * v for w, v in zip(W2[j], h)) + b2[j] for j in range(3)]
    mu = sum(z) / 3
    var = sum((v - mu) ** 2 for v in z) / 3
    g = [0.5, 2.0, -1.0]
    expected = [g[j] * (z[j] - mu) / math.sqrt(var + net.norm.eps) for j in range(3)]
    assert np.allclose(net(s_i, s_a, v_a).detach().numpy(), expected, atol=1e-12, rtol=0)


def test_tsu_gradient():
    net = Tsu(4, seed=1)
    X = torch.randn(3, 6, 4, generator=seeded_generator(2), dtype=DTYPE)
    target = torch.randn(6, 4, generator=seeded_generator(3), dtype=DTYPE)
    err = finite_difference_check(lambda: ((net(X[0], X[1], X[2]) - target) ** 2).mean(), param_set(net))
    assert err < 1e-4


def _state(N=10, d=4, seed=0, T=None):
    Z = torch.randn(N, d, generator=seeded_generator(seed), dtype=DTYPE)
    return SlideState.initial(Z, T or N)


def test_apply_update_contracts():
    st0 = _state()
    net = Tsu(4)
    v = torch.randn(4, dtype=DTYPE)
    st1 = apply_update(st0, 3, v, net, 1.0)
    assert torch.equal(st1.S[3], v)
    changed = (st1.S != st0.S).any(-1)
    assert changed.tolist() == [i == 3 for i in range(10)]
    assert st1.visited == [3] and st1.t == 1
    assert torch.equal(st0.S, _state().S)
    with pytest.raises(RepeatActionError):
        apply_update(st1, 3, v, net, 0.5)


def test_update_uses_pre_update_row():
    st0 = _state()
    st0.S[5] = 2.0 * st0.S[1]
    net = Tsu(4, seed=9)
    v = torch.randn(4, dtype=DTYPE)
    st1 = apply_update(st0, 1, v, net, 0.99)
    with torch.no_grad():
        expected = net(st0.S[5], st0.S[1], v)
    assert torch.allclose(st1.S[5], expected, atol=1e-14)


@given(st.integers(0, 1000), st.floats(-0.5, 0.99))
@settings(max_examples=30)
def test_visited_rows_frozen_and_replay(seed, tau):
    rng = np.random.default_rng(seed)
    N = 9
    st_ = _state(N=N, seed=seed)
    net = Tsu(4, seed=seed % 5)
    values = torch.randn(N, 4, generator=seeded_generator(seed + 1), dtype=DTYPE)
    order = rng.permutation(N).tolist()
    frozen = {}
    for step, a in enumerate(order):
        st_ = apply_update(st_, a, values[a], net, tau)
        frozen[a] = values[a]
        assert len(st_.visited) == step + 1
        for i, v in frozen.items():
            assert torch.equal(st_.S[i], v)
    again = _state(N=N, seed=seed)
    for a in order:
        again = apply_update(again, a, values[a], net, tau)
    assert torch.equal(again.S, st_.S)
    assert torch.equal(st_.S, values)


def test_full_traversal_equals_distillation():
    bag = generate_bags(SyntheticConfig(N_range=(16, 20)), 5, 5, seed=1)["train"][0]
    hafed = Hafed(HafedConfig())
    hafed.ready = True
    net = Tsu(32)
    st_ = SlideState.initial(bag.Z, bag.N)
    U = torch.as_tensor(bag.U, dtype=DTYPE)
    for a in range(bag.N):
        st_ = apply_update(st_, a, hafed.distill(U[a]), net, 0.9)
    assert torch.equal(st_.S, hafed.distill_bag(U))


def test_degenerate_tau():
    Z = torch.eye(8, dtype=DTYPE)
    slides = [(Z, Z.clone())]
    with pytest.raises(DegenerateTauError):
        train_tsu(slides, slides, TsuConfig(d=8, tau=0.99, epochs=1))


@pytest.mark.slow
def test_training_beats_identity_and_is_deterministic(components):
    train = [(s.Z, s.V) for s in components.slides["train"]]
    val = [(s.Z, s.V) for s in components.slides["val"]]
    ckpt = components.tsu_ckpt
    assert ckpt.metadata["val_mse"] < ckpt.metadata["identity_mse"]
    cfg = TsuConfig(**{**ckpt.config, "epochs": 2})
    net, a = train_tsu(train, val, cfg)
    _, b = train_tsu(train, val, cfg)
    assert a.to_bytes() == b.to_bytes()
    restored, rcfg = tsu_from_checkpoint(a)
    assert rcfg.tau == cfg.tau
    pairs = _collect(val, None, cfg, seeded_generator(0))
    assert tsu_mse(restored, pairs) == tsu_mse(net, pairs)


@pytest.mark.slow
def test_trained_update_informative_on_tumor_pairs(components):
    net = components.tsu
    pred_err, ident_err = [], []
    for s, bag in zip(components.slides["val"], components.bags["val"]):
        for a in np.flatnonzero(bag.tumor_mask):
            for i in similar_set(s.Z, int(a), components.tau):
                if not bag.tumor_mask[i]:
                    continue
                with torch.no_grad():
                    pred = net(s.Z[i], s.Z[a], s.V[a])
                pred_err.append(float(((pred - s.V[i]) ** 2).mean()))
                ident_err.append(float(((s.Z[i] - s.V[i]) ** 2).mean()))
    assert len(pred_err) >= 20
    assert np.mean(pred_err) < np.mean(ident_err)
