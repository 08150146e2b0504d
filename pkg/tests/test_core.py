import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from patchzoom.core import (
    DTYPE,
    ExhaustedActionError,
    GatedAttention,
    NumericError,
    OptimizerConfig,
    ShapeError,
    clip_grad_norm,
    finite_difference_check,
    grad,
    init_optimizer_state,
    masked_softmax,
    optimizer_step,
    param_set,
    scheduled_lr,
    seeded_generator,
)


def test_gated_attention_matches_elementwise_oracle():
    net = GatedAttention(6, 4, 1, generator=seeded_generator(0))
    x = torch.randn(5, 6, generator=seeded_generator(1), dtype=DTYPE)
    A, a_b = net.proj_a.weight.detach().numpy(), net.proj_a.bias.detach().numpy()
    B, b_b = net.proj_b.weight.detach().numpy(), net.proj_b.bias.detach().numpy()
    W, w_b = net.score.weight.detach().numpy(), net.score.bias.detach().numpy()
    xs = x.numpy()
    expected = np.zeros((5, 1))
    for i in range(5):
        for j in range(4):
            ga = 1.0 / (1.0 + math.exp(-(A[j] @ xs[i] + a_b[j])))
            gb = math.tanh(B[j] @ xs[i] + b_b[j])
            expected[i, 0] += W[0, j] * ga * gb
        expected[i, 0] += w_b[0]
    assert np.allclose(net(x).detach().numpy(), expected, atol=1e-12, rtol=0)


def test_gated_attention_shapes_and_symmetry():
    net = GatedAttention(384, 128, 1, generator=seeded_generator(0))
    assert net.proj_a.weight.shape == (128, 384)
    assert net.proj_b.weight.shape == (128, 384)
    assert net.score.weight.shape == (1, 128)
    row = torch.randn(1, 384, dtype=DTYPE)
    out = net(row.repeat(4, 1))
    assert torch.equal(out, out[:1].expand_as(out))
    with pytest.raises(ShapeError):
        net(torch.zeros(3, 32, dtype=DTYPE))


def test_masked_softmax_examples():
    s = torch.zeros(3, dtype=DTYPE)
    assert torch.allclose(masked_softmax(s, torch.zeros(3, dtype=torch.bool)), torch.full((3,), 1 / 3, dtype=DTYPE))
    one_hot = masked_softmax(torch.tensor([5.0, 9.0, -2.0], dtype=DTYPE), torch.tensor([True, True, False]))
    assert torch.equal(one_hot, torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE))
    a = masked_softmax(torch.tensor([1.0, 2.0, 3.0], dtype=DTYPE))
    b = masked_softmax(torch.tensor([11.0, 12.0, 13.0], dtype=DTYPE))
    assert torch.allclose(a, b, atol=1e-15)
    with pytest.raises(ExhaustedActionError):
        masked_softmax(s, torch.ones(3, dtype=torch.bool))


@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.data(),
)
def test_masked_softmax_is_distribution(scores, data):
    n = len(scores)
    mask = data.draw(st.lists(st.booleans(), min_size=n, max_size=n))
    keep = data.draw(st.integers(0, n - 1))
    mask[keep] = False
    p = masked_softmax(torch.tensor(scores, dtype=DTYPE), torch.tensor(mask))
    assert bool((p >= 0).all())
    assert abs(float(p.sum()) - 1.0) < 1e-12
    assert bool((p[torch.tensor(mask)] == 0).all())


def test_grad_analytic_cases():
    theta = torch.randn(3, 2, dtype=DTYPE, requires_grad=True)
    g = grad(lambda: 0.5 * (theta ** 2).sum(), {"t": theta})
    assert torch.allclose(g["t"], theta.detach())
    g0 = grad(lambda: torch.tensor(3.0, dtype=DTYPE) + 0 * theta.sum(), {"t": theta})
    assert torch.equal(g0["t"], torch.zeros_like(theta))
    with pytest.raises(NumericError):
        grad(lambda: theta.sum() * math.inf, {"t": theta})


def test_finite_difference_gated_attention():
    net = GatedAttention(5, 4, 2, generator=seeded_generator(3))
    x = torch.randn(6, 5, generator=seeded_generator(4), dtype=DTYPE)
    err = finite_difference_check(lambda: (net(x) ** 2).sum(), param_set(net))
    assert err < 1e-4


def test_clip_grad_norm_post_norm():
    g = {"a": torch.full((3,), 4.0, dtype=DTYPE), "b": torch.full((2, 2), -3.0, dtype=DTYPE)}
    before = clip_grad_norm(g, 0.5)
    assert before > 0.5
    after = math.sqrt(sum(float((v ** 2).sum()) for v in g.values()))
    assert abs(after - 0.5) < 1e-9
    small = {"a": torch.tensor([0.1], dtype=DTYPE)}
    clip_grad_norm(small, 0.5)
    assert float(small["a"]) == 0.1


def test_schedule_endpoints():
    cfg = OptimizerConfig(lr0=0.01, total_steps=100, schedule="cosine")
    assert scheduled_lr(cfg, 0) == 0.01
    assert scheduled_lr(cfg, 100) == 0.0
    floor = OptimizerConfig(lr0=0.01, total_steps=100, lr_floor=1e-4)
    assert abs(scheduled_lr(floor, 100) - 1e-4) < 1e-15
    const = OptimizerConfig(lr0=0.01, schedule="constant")
    assert scheduled_lr(const, 57) == 0.01


def _adam_oracle(theta, g, lr, b1=0.9, b2=0.999, eps=1e-8, wd=0.0, decoupled=True):
    m = (1 - b1) * g
    v = (1 - b2) * g * g
    m_hat, v_hat = m / (1 - b1), v / (1 - b2)
    if decoupled:
        theta = theta * (1 - lr * wd)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


def test_optimizer_step_first_step_oracle():
    theta = torch.tensor([1.0, -2.0, 0.5], dtype=DTYPE)
    g = torch.tensor([1.0, 0.3, -4.0], dtype=DTYPE)
    cfg = OptimizerConfig(algorithm="adamw", lr0=0.1, weight_decay=0.01, schedule="constant")
    params = {"t": theta.clone()}
    optimizer_step(params, {"t": g}, init_optimizer_state(params), cfg, 0)
    expected = _adam_oracle(theta.numpy(), g.numpy(), 0.1, wd=0.01)
    assert np.allclose(params["t"].numpy(), expected, atol=1e-14)


def test_optimizer_step_descent_zero_grad_and_determinism():
    cfg = OptimizerConfig(lr0=0.1, weight_decay=0.0, schedule="constant")
    p = {"t": torch.tensor([1.0], dtype=DTYPE)}
    optimizer_step(p, {"t": torch.tensor([1.0], dtype=DTYPE)}, init_optimizer_state(p), cfg, 0)
    assert float(p["t"]) < 1.0
    z = {"t": torch.tensor([1.0, 2.0], dtype=DTYPE)}
    optimizer_step(z, {"t": torch.zeros(2, dtype=DTYPE)}, init_optimizer_state(z), cfg, 0)
    assert torch.equal(z["t"], torch.tensor([1.0, 2.0], dtype=DTYPE))

    def run():
        q = {"t": torch.linspace(-1, 1, 7, dtype=DTYPE)}
        st_ = init_optimizer_state(q)
        for step in range(5):
            _, st_ = optimizer_step(q, {"t": torch.sin(q["t"] * (step + 1))}, st_, OptimizerConfig(total_steps=5), step)
        return q["t"].numpy().tobytes()

    assert run() == run()


def test_optimizer_rejects_bad_gradients():
    p = {"t": torch.zeros(2, dtype=DTYPE)}
    with pytest.raises(ShapeError):
        optimizer_step(p, {"t": torch.zeros(3, dtype=DTYPE)}, init_optimizer_state(p), OptimizerConfig(), 0)
    with pytest.raises(NumericError):
        optimizer_step(p, {"t": torch.tensor([math.nan, 0.0], dtype=DTYPE)}, init_optimizer_state(p), OptimizerConfig(), 0)


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(algorithm="sgd")
    with pytest.raises(ValueError):
        OptimizerConfig(lr0=0)
