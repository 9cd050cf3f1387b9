import numpy as np
import pytest
import torch

from piddpg.agent import CriticNet, NetConfig
from piddpg.errors import DomainError
from piddpg.harness.verify import LinearCritic
from piddpg.hexgrid import N_CHANNELS
from piddpg.refiner import RefinerParams, affine_clip, refine, refine_step, refinement_schedule

S1 = np.zeros(5)
H1 = np.zeros((1, N_CHANNELS, 1, 1))


def test_affine_clip_examples():
    a = np.array([0.1, 0.4, 0.9])
    assert np.array_equal(affine_clip(a, RefinerParams.identity(3)), a)
    assert affine_clip(np.array([0.4]), RefinerParams(np.array([2.0]), np.array([0.5])))[0] == 1.0
    assert not affine_clip(a, RefinerParams(np.zeros(3), -np.ones(3))).any()


def test_schedule():
    assert refinement_schedule(1, 10) == 1
    assert refinement_schedule(50, 10) == 10
    assert refinement_schedule(0, 10) == 0
    with pytest.raises(DomainError):
        refinement_schedule(-1, 10)


def test_k_zero_is_identity(grid1):
    critic = CriticNet.create(grid1, NetConfig(2, (8, 6), 1), np.random.default_rng(0))
    a0 = np.random.default_rng(1).uniform(size=7)
    res = refine(a0, np.zeros(35), np.zeros((1, N_CHANNELS, 3, 3)), critic, 0)
    assert res.action.tobytes() == a0.tobytes()
    assert res.q_gain is None


def test_hand_example():
    res = refine(np.array([0.5]), S1, H1, LinearCritic(np.array([1.0])), 1, 0.1)
    assert abs(res.action[0] - 0.625) < 1e-12
    assert res.q_before == pytest.approx(0.5) and res.q_after == pytest.approx(0.625)


def test_saturated_component_is_frozen():
    trace = []
    res = refine(np.array([0.9, 0.2]), np.zeros(10), np.zeros((1, N_CHANNELS, 1, 2)), LinearCritic(np.array([1.0, 1.0])), 5, 0.1, trace=trace)
    w, b, a = zip(*trace)
    # first cell saturates after one step: 1.09 * 0.9 + 0.1 > 1
    assert a[1][0] == 1.0
    assert all(w[k][0] == w[0][0] and b[k][0] == b[0][0] for k in range(5))
    assert b[-1][1] > b[0][1]
    assert res.action[0] == 1.0


def test_refine_step_mask_random_cases():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = 6
        p = RefinerParams(rng.uniform(-2, 3, n), rng.uniform(-1, 1, n))
        a0 = rng.uniform(0, 1, n)
        g = rng.normal(size=n)
        new, live = refine_step(p, a0, g, 0.1)
        pre = p.w * a0 + p.b
        dead = (pre <= 0) | (pre >= 1)
        assert np.array_equal(live, ~dead)
        assert np.all(new.w[dead] == p.w[dead]) and np.all(new.b[dead] == p.b[dead])
        # autograd through torch.clamp masks the same components
        w = torch.tensor(p.w, requires_grad=True)
        b = torch.tensor(p.b, requires_grad=True)
        q = (torch.tensor(g) * torch.clamp(w * torch.tensor(a0) + b, 0, 1)).sum()
        gw, gb = torch.autograd.grad(q, [w, b])
        assert np.allclose(new.w - p.w, 0.1 * gw.numpy(), atol=1e-15)
        assert np.allclose(new.b - p.b, 0.1 * gb.numpy(), atol=1e-15)


def test_linear_critic_increases_q_until_saturation():
    coef = np.array([0.5, -0.3, 1.2])
    trace = []
    critic = LinearCritic(coef)
    refine(np.array([0.3, 0.6, 0.5]), np.zeros(15), np.zeros((1, N_CHANNELS, 1, 3)), critic, 8, 0.05, trace=trace)
    qs = [float(coef @ a) for _, _, a in trace]
    assert all(q2 > q1 for q1, q2 in zip(qs, qs[1:]))


def test_constant_critic_returns_a0():
    a0 = np.array([0.2, 0.7])
    res = refine(a0, np.zeros(10), np.zeros((1, N_CHANNELS, 1, 2)), LinearCritic(np.zeros(2)), 10, 0.1)
    assert np.array_equal(res.action, a0)


def test_network_critic_untouched_and_bounded(grid1):
    critic = CriticNet.create(grid1, NetConfig(2, (8, 6), 2), np.random.default_rng(3))
    before = critic.params.copy()
    rng = np.random.default_rng(4)
    for _ in range(10):
        a0 = rng.uniform(size=7)
        s = rng.uniform(0, 2, 35)
        h = rng.uniform(0, 1, (2, N_CHANNELS, 3, 3)) * grid1.mask
        res = refine(a0, s, h, critic, 10, 0.5)
        assert np.all((res.action >= 0) & (res.action <= 1))
        assert res.q_before is not None and res.q_after is not None
    assert critic.params.equal(before)
    assert all(not t.requires_grad or t.grad is None for t in critic.params.values())


def test_fallback_flag():
    # with a concave critic and a huge step the ascent overshoots
    class Concave(LinearCritic):
        def head(self, feats, a):
            return -((a - 0.5) ** 2).sum(dim=1)

    a0 = np.array([0.45])
    plain = refine(a0, S1, H1, Concave(np.zeros(1)), 1, 50.0)
    assert plain.q_after < plain.q_before
    guarded = refine(a0, S1, H1, Concave(np.zeros(1)), 1, 50.0, fallback=True)
    assert guarded.fell_back and np.array_equal(guarded.action, a0)


def test_bad_arguments():
    with pytest.raises(DomainError):
        refine(np.array([0.5]), S1, H1, LinearCritic(np.ones(1)), -1)
    with pytest.raises(DomainError):
        refine(np.array([0.5]), S1, H1, LinearCritic(np.ones(1)), 1, 0.0)
