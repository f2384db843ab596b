import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference_grads, dense_mixture, max_relative_error
from ragmoe.condense import DTYPE
from ragmoe.errors import InputError
from ragmoe.moe import (
    ExpertFFN,
    GaussianNoise,
    LoadStats,
    ReplayNoise,
    Router,
    ZeroNoise,
    load_balance_loss,
    moe_forward,
    router_logits,
    topk_gate,
)
from ragmoe.seeding import numpy_rng, torch_generator


def _router(d=8, n_experts=4, k=2, seed=61):
    router = Router(d, n_experts, k)
    router.init_params(torch_generator(seed, "router"))
    return router


def _experts(d=8, d_ff=16, n=4, seed=62):
    experts = []
    gen = torch_generator(seed, "experts")
    for e in range(n):
        expert = ExpertFFN(d, d_ff, index=e)
        expert.init_params(gen)
        experts.append(expert)
    return experts


def _tokens(n=6, d=8, seed=63):
    rng = numpy_rng(seed, "tokens")
    return torch.from_numpy(rng.standard_normal((n, d))).to(DTYPE)


# --- router logits -------------------------------------------------------------


def test_eval_mode_logits_are_clean():
    router = _router()
    h = _tokens()
    with torch.no_grad():
        logits, noise = router_logits(h, router, GaussianNoise(torch_generator(1, "n")), training=False)
        clean = router.w_clean(h)
    assert noise is None
    assert torch.equal(logits, clean)


def test_zero_noise_draw_equals_clean():
    router = _router()
    with torch.no_grad():
        router.w_noise.weight.copy_(torch.randn(4, 8, dtype=DTYPE, generator=torch_generator(2, "wn")))
    h = _tokens()
    with torch.no_grad():
        logits, _ = router_logits(h, router, ZeroNoise(), training=True)
        clean = router.w_clean(h)
    assert torch.equal(logits, clean)


def test_noise_scale_softplus_zero_is_ln2():
    router = _router()
    with torch.no_grad():
        router.w_noise.weight.zero_()  # W_n h = 0 for every h
    h = _tokens()

    class OnesNoise:
        def sample(self, shape):
            return torch.ones(shape, dtype=DTYPE)

    with torch.no_grad():
        noisy, _ = router_logits(h, router, OnesNoise(), training=True)
        clean = router.w_clean(h)
    assert torch.allclose(noisy - clean, torch.full_like(clean, math.log(2.0)), atol=1e-15)


def test_noise_scale_strictly_positive():
    router = _router()
    with torch.no_grad():
        router.w_noise.weight.copy_(
            torch.randn(4, 8, dtype=DTYPE, generator=torch_generator(3, "wn2")) * 5
        )
        scale = torch.nn.functional.softplus(router.w_noise(_tokens()))
    assert (scale > 0).all()


# --- top-k gate -----------------------------------------------------------------


def test_topk_gate_derived_weights():
    gate = topk_gate(torch.tensor([3.0, 1.0, 2.0, 0.0], dtype=DTYPE), 2)
    assert gate.experts[0].tolist() == [0, 2]
    # softmax over {3, 2}: sigma(1) = 1/(1+e^-1)
    sigma1 = 1.0 / (1.0 + math.exp(-1.0))
    assert float(gate.weights[0, 0]) == pytest.approx(sigma1, abs=1e-12)
    assert float(gate.weights[0, 1]) == pytest.approx(1.0 - sigma1, abs=1e-12)
    # the spec's rounded values
    assert float(gate.weights[0, 0]) == pytest.approx(0.73106, abs=5e-6)
    assert float(gate.weights[0, 1]) == pytest.approx(0.26894, abs=5e-6)


def test_topk_gate_tie_break_lower_index():
    gate = topk_gate(torch.zeros(1, 4, dtype=DTYPE), 2)
    assert gate.experts[0].tolist() == [0, 1]
    assert torch.allclose(gate.weights, torch.tensor([[0.5, 0.5]], dtype=DTYPE))


def test_topk_gate_k1_weight_one():
    rng = numpy_rng(64, "gate")
    for _ in range(10):
        logits = torch.from_numpy(rng.standard_normal(5))
        gate = topk_gate(logits, 1)
        assert float(gate.weights[0, 0]) == 1.0
        assert int(gate.experts[0, 0]) == int(np.argmax(logits.numpy()))


def test_topk_gate_validates_k():
    logits = torch.zeros(4, dtype=DTYPE)
    for k in (0, 5):
        with pytest.raises(InputError):
            topk_gate(logits, k)


# --- moe forward -----------------------------------------------------------------


def test_single_expert_bitwise_identity():
    router = Router(8, 1, 1)
    router.init_params(torch_generator(65, "r1"))
    experts = _experts(n=1)
    h = _tokens()
    with torch.no_grad():
        out, stats, gate = moe_forward(h, experts, router, training=False)
        direct = experts[0](h)
    assert torch.equal(out, direct)
    assert float(stats.f_usage[0]) == 1.0


def test_k_equals_e_matches_dense_mixture():
    router = _router(k=4)
    experts = _experts()
    h = _tokens(n=12)
    with torch.no_grad():
        out, _, _ = moe_forward(h, experts, router, training=False)
    dense = dense_mixture(h, experts, router)
    assert torch.allclose(out, dense, atol=1e-6)
    assert float((out - dense).abs().max()) < 1e-12  # reorder slack only


def test_identical_experts_ignore_routing():
    router = _router(k=2)
    experts = _experts(n=4)
    state = experts[0].state_dict()
    for e in experts[1:]:
        e.load_state_dict(state)
    h = _tokens()
    with torch.no_grad():
        out, _, _ = moe_forward(h, experts, router, training=False)
        single = experts[0](h)
    assert torch.allclose(out, single, atol=1e-12)


def test_exactly_k_nonzero_weights_and_conditional_compute():
    router = _router(k=2)
    experts = _experts()
    h = _tokens(n=50, seed=66)
    calls = []
    for e, expert in enumerate(experts):
        orig = expert.net.forward

        def wrapped(x, dropout_gen=None, _orig=orig, _e=e):
            calls.append((_e, x.shape[0]))
            return _orig(x, dropout_gen=dropout_gen)

        expert.net.forward = wrapped
    with torch.no_grad():
        out, stats, gate = moe_forward(h, experts, router, training=False)
    assert gate.weights.shape == (50, 2)
    assert torch.allclose(gate.weights.sum(dim=1), torch.ones(50, dtype=DTYPE), atol=1e-6)
    assert (gate.weights > 0).all()
    # every expert evaluated at most once, on exactly its dispatched tokens
    counts = {e: n for e, n in calls}
    for e in range(4):
        dispatched = int((gate.experts == e).sum())
        assert counts.get(e, 0) == dispatched


def test_eval_determinism():
    router = _router()
    experts = _experts()
    h = _tokens(n=20, seed=67)
    with torch.no_grad():
        out1, _, gate1 = moe_forward(h, experts, router, training=False)
        out2, _, gate2 = moe_forward(h, experts, router, training=False)
    assert torch.equal(out1, out2)
    assert torch.equal(gate1.experts, gate2.experts)


def test_training_noise_changes_routing():
    router = _router()
    experts = _experts()
    h = _tokens(n=1000, seed=68) * 0.05  # small logit gaps vs ln2 noise scale
    with torch.no_grad():
        _, _, gate_a = moe_forward(
            h, experts, router, noise_source=GaussianNoise(torch_generator(1, "a")), training=True
        )
        _, _, gate_b = moe_forward(
            h, experts, router, noise_source=GaussianNoise(torch_generator(2, "b")), training=True
        )
        _, _, gate_eval = moe_forward(h, experts, router, training=False)
    assert not torch.equal(gate_a.experts, gate_b.experts)
    assert not torch.equal(gate_a.experts, gate_eval.experts)


def test_replay_noise_freezes_draws():
    router = _router()
    experts = _experts()
    h = _tokens()
    noise = ReplayNoise(torch_generator(69, "replay"))
    with torch.no_grad():
        out1, _, gate1 = moe_forward(h, experts, router, noise_source=noise, training=True)
        noise.rewind()
        out2, _, gate2 = moe_forward(h, experts, router, noise_source=noise, training=True)
    assert torch.equal(out1, out2)
    assert torch.equal(gate1.logits, gate2.logits)


# --- load stats and balance loss ---------------------------------------------------


def test_load_stats_sum_to_one():
    router = _router(k=2)
    experts = _experts()
    h = _tokens(n=40, seed=70)
    with torch.no_grad():
        _, stats, _ = moe_forward(h, experts, router, training=False)
    assert float(stats.f_usage.sum()) == pytest.approx(1.0, abs=1e-9)
    assert float(stats.p_mean.sum()) == pytest.approx(1.0, abs=1e-9)
    assert (stats.f_usage >= 0).all() and (stats.p_mean >= 0).all()


def test_balance_loss_uniform_identity():
    quarter = torch.full((4,), 0.25, dtype=DTYPE)
    loss = load_balance_loss(LoadStats(quarter, quarter.clone()), 4)
    assert float(loss) == pytest.approx(1.0, abs=1e-12)


def test_balance_loss_collapse_worst_case():
    one_hot = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=DTYPE)
    loss = load_balance_loss(LoadStats(one_hot, one_hot.clone()), 4)
    assert float(loss) == pytest.approx(4.0, abs=1e-12)


def test_balance_loss_derived_value():
    f = torch.tensor([0.5, 0.5, 0.0, 0.0], dtype=DTYPE)
    p = torch.tensor([0.4, 0.4, 0.1, 0.1], dtype=DTYPE)
    loss = load_balance_loss(LoadStats(f, p), 4)
    assert float(loss) == pytest.approx(1.6, abs=1e-12)


def test_balance_loss_gradient_only_through_p_mean():
    f = torch.tensor([0.5, 0.5, 0.0, 0.0], dtype=DTYPE, requires_grad=True)
    p = torch.tensor([0.4, 0.4, 0.1, 0.1], dtype=DTYPE, requires_grad=True)
    loss = load_balance_loss(LoadStats(f, p), 4)
    loss.backward()
    assert p.grad is not None and float(p.grad.abs().sum()) > 0
    assert f.grad is None or float(f.grad.abs().sum()) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=8))
def test_balance_loss_cauchy_schwarz_bound(raw):
    # when f == p componentwise, E * sum f^2 >= 1 with equality iff uniform
    total = sum(raw)
    f = torch.tensor([v / total for v in raw], dtype=DTYPE)
    n = len(raw)
    loss = float(load_balance_loss(LoadStats(f, f.clone()), n))
    assert loss >= 1.0 - 1e-12
    if max(raw) - min(raw) > 1e-6:
        assert loss > 1.0


def test_balance_loss_uniform_equality_case():
    for n in (2, 3, 4, 8):
        f = torch.full((n,), 1.0 / n, dtype=DTYPE)
        assert float(load_balance_loss(LoadStats(f, f.clone()), n)) == pytest.approx(
            1.0, abs=1e-12
        )


# --- gradients -------------------------------------------------------------------


def test_moe_gradients_match_finite_differences():
    router = _router(seed=71)
    experts = _experts(seed=72)
    h = _tokens(n=5, seed=73)
    probe = _tokens(n=5, seed=74)
    noise = ReplayNoise(torch_generator(75, "fd"))

    modules = [("router", router)] + [(f"expert{e}", ex) for e, ex in enumerate(experts)]
    params = [
        (f"{mname}.{pname}", p)
        for mname, m in modules
        for pname, p in m.named_parameters()
    ]

    def forward():
        if noise.recorded:
            noise.rewind()
        out, stats, _ = moe_forward(h, experts, router, noise_source=noise, training=True)
        return (out * probe).sum() + load_balance_loss(stats, router.n_experts)

    loss = forward()
    for _, p in params:
        if p.grad is not None:
            p.grad = None
    loss.backward()
    analytic = {name: (p.grad.reshape(-1).numpy().copy() if p.grad is not None else None)
                for name, p in params}

    def loss_fn():
        with torch.no_grad():
            return float(forward())

    fd = central_difference_grads(loss_fn, params, h=1e-6)
    for name, param in params:
        idx, fd_grads = fd[name]
        got = analytic[name]
        if got is None:
            assert np.abs(fd_grads).max() < 1e-8, name
            continue
        assert max_relative_error(got[idx], fd_grads) < 1e-4, name
