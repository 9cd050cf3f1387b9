"""Invariant and oracle checks behind ``piddpg verify`` and the acceptance suite."""
from __future__ import annotations

import copy
import time
from dataclasses import dataclass

import numpy as np
import torch
from scipy.stats import chisquare

from ..agent import ActorNet, CriticNet, NetConfig, soft_update
from ..hexgrid import GridMap
from ..market import MarketEnv, ScenarioProfile, order_matching
from ..neural import HexConv, convlstm_params, convlstm_sequence, dense, grad_check
from ..refiner import RefinerParams, affine_clip, refine, refine_step
from ..replay import PerBuffer, Transition
from .oracles import production_match_set, random_matching_instance, reference_matching


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name, fn, *args, **kwargs) -> CheckResult:
    t0 = time.perf_counter()
    passed, detail = fn(*args, **kwargs)
    return CheckResult(name, bool(passed), detail, time.perf_counter() - t0)


# gradients


def _t(rng, *shape, scale=1.0):
    return torch.from_numpy(rng.normal(0.0, scale, size=shape))


KINK_MARGIN = 1e-3


def relu_margin(actor, critic, s, h) -> float:
    """Smallest ``|z|`` over every ReLU pre-activation of ``Q(s, h, mu(s, h))``.

    Central differences straddle a kink when this is within reach of the step,
    so such instances are redrawn.
    """
    with torch.no_grad():
        zs = []
        for net, head_in in ((actor, None), (critic, actor.forward(s, h))):
            x = net.features(s, h)
            if head_in is not None:
                x = torch.cat([x, head_in.to(x.dtype)], dim=1)
            p = net.params
            z1 = x @ p["fc1.w"] + p["fc1.b"]
            z2 = torch.relu(z1) @ p["fc2.w"] + p["fc2.b"]
            zs += [z1.abs().min(), z2.abs().min()]
    return float(min(zs))


def gradient_errors(instances: int = 20, seed: int = 0) -> tuple[dict, int]:
    """Worst relative error per layer type over ``instances`` random small problems,
    plus the number of network instances redrawn for sitting near a ReLU kink.
    """
    rng = np.random.default_rng(seed)
    grid = GridMap.hexagon(1)
    geom = HexConv(grid)
    n = grid.n_cells
    worst = {}
    redrawn = 0

    def note(key, err):
        worst[key] = max(worst.get(key, 0.0), err)

    cfg = NetConfig(hidden_channels=2, dense_units=(6, 5), memory_length=2)
    for _ in range(instances):
        x, w, b = _t(rng, 3, 4), _t(rng, 4, 5), _t(rng, 5)
        for act in ("relu", "tanh", "linear"):
            # shift relu inputs away from the kink so finite differences are valid
            xs = x + 0.05 * torch.sign(x) if act == "relu" else x
            note(f"dense/{act}", grad_check(lambda x_, w_, b_: (dense(x_, w_, b_, act) ** 2).sum(), [xs, w, b]))
        xc, k = _t(rng, 2, 3, n), _t(rng, 4, 3, 3, 3)
        note("hexconv", grad_check(lambda x_, k_: (geom.apply(x_, k_) ** 2).sum(), [xc, k]))
        p = convlstm_params(3, 2, rng)
        seq = _t(rng, 2, 3, 3, n)
        note(
            "convlstm",
            grad_check(
                lambda s_, wx, wh, bb: (convlstm_sequence(s_, wx, wh, bb, geom, 2) ** 2).sum(),
                [seq, p["convlstm.wx"], p["convlstm.wh"], p["convlstm.b"] + _t(rng, 8, scale=0.1)],
            ),
        )
        while True:
            actor = ActorNet.create(grid, cfg, rng, geom)
            critic = CriticNet.create(grid, cfg, rng, geom)
            s = torch.from_numpy(rng.uniform(0, 1, size=(2, 5 * n)))
            h = torch.from_numpy(rng.uniform(0, 1, size=(2, 2, 9, n)))
            if relu_margin(actor, critic, s, h) > KINK_MARGIN:
                break
            redrawn += 1
        names = actor.params.names()

        def chain(*vals):
            # policy objective: Q(s, h, mu(s, h)) differentiated through the actor parameters
            saved = actor.params.tensors
            actor.params.tensors = dict(zip(names, vals))
            try:
                return critic.forward(s, h, actor.forward(s, h)).mean()
            finally:
                actor.params.tensors = saved

        note("actor->critic chain", grad_check(chain, [actor.params[k].detach() for k in names]))
        a = torch.from_numpy(rng.uniform(0.1, 0.9, size=(1, n)))
        feats = critic.features(s[:1], h[:1]).detach()
        note("critic dQ/da (refiner)", grad_check(lambda a_: critic.head(feats, a_).sum(), [a]))
    return worst, redrawn


def check_gradients(instances: int = 20, tol: float = 1e-4):
    worst, redrawn = gradient_errors(instances)
    bad = {k: v for k, v in worst.items() if not v < tol}
    detail = (f"max rel err {max(worst.values()):.2e} over {len(worst)} layer types x {instances} instances "
              f"({redrawn} network draws rejected within {KINK_MARGIN} of a ReLU kink)")
    return not bad, detail + (f"; above {tol}: {bad}" if bad else "")


# replay


def per_fixture(alpha: float, beta: float = 0.5, size: int = 16, seed: int = 0) -> PerBuffer:
    buf = PerBuffer(capacity=size, alpha=alpha, beta=beta, seed=seed)
    z = np.zeros(1)
    for _ in range(size):
        buf.insert(Transition(z, z, z, 0.0, z, z, False))
    errs = np.random.default_rng(seed + 1).permutation(size).astype(float) + 1.0
    buf.update_priorities(np.arange(size), errs)
    return buf


def per_chi_square(alpha: float, draws: int = 100_000, seed: int = 0) -> float:
    buf = per_fixture(alpha, seed=seed)
    _, slots, _ = buf.sample(n=draws)
    observed = np.bincount(slots, minlength=len(buf))
    return float(chisquare(observed, draws * buf.probabilities()).pvalue)


def check_per(draws: int = 100_000, significance: float = 0.01):
    p1 = per_chi_square(1.0, draws)
    p0 = per_chi_square(0.0, draws)
    uniform = np.allclose(per_fixture(0.0).probabilities(), 1 / 16, rtol=0, atol=1e-15)
    w_beta0 = per_fixture(1.0, beta=0.0).weights(np.arange(16))
    b = per_fixture(0.0, beta=1.0)
    raw = (len(b) * b.probabilities()) ** (-b.beta)
    ok = p1 > significance and p0 > significance and uniform and np.all(w_beta0 == 1.0) and np.allclose(raw, 1.0, atol=1e-12)
    return ok, f"chi2 p(alpha=1)={p1:.3f}, p(alpha=0)={p0:.3f}; beta=0 weights all 1: {bool(np.all(w_beta0 == 1.0))}"


# simulator


def check_matching(instances: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    mismatched = 0
    for _ in range(instances):
        profile, state, drivers, orders = random_matching_instance(rng)
        ref = reference_matching(copy.deepcopy(drivers), orders, profile.grid)
        if production_match_set(order_matching(state, profile)) != ref:
            mismatched += 1
    return mismatched == 0, f"{instances - mismatched}/{instances} instances identical to brute force"


def random_profile(rng: np.random.Generator) -> ScenarioProfile:
    grid = GridMap.hexagon(int(rng.integers(0, 3)))
    n = grid.n_cells
    T = int(rng.integers(1, 6))
    M = int(rng.integers(1, 4))
    dest = rng.uniform(0, 1, size=(n, n))
    return ScenarioProfile(
        grid=grid,
        horizon=T,
        supply_means=rng.uniform(0, 3 * n, size=(M, T)),
        demand_means=rng.uniform(0, 2.5, size=(T, n, 3)),
        destinations=dest / dest.sum(axis=1, keepdims=True),
        competitor_ratio=float(rng.uniform()),
        controlled_platform=int(rng.integers(0, M)),
    )


def conservation_violations(steps: int = 10_000, seed: int = 0) -> tuple[int, list]:
    """Run random episodes for ``steps`` total steps; returns (steps, problems)."""
    rng = np.random.default_rng(seed)
    problems = []
    done_steps = 0
    while done_steps < steps and len(problems) < 10:
        profile = random_profile(rng)
        env = MarketEnv(profile)
        env.reset(int(rng.integers(2**31)))
        dist = profile.distance
        ctrl = profile.controlled_platform
        finished = False
        while not finished and done_steps < steps:
            st = env.state
            before = {d.id: (d.location, d.platform) for d in st.drivers.values()}
            orders = {o.id: o for o in st.open_orders}
            on0, off0 = st.onlined.copy(), st.offlined.copy()
            a = rng.uniform(0, 1, size=profile.n_cells)
            res = env.step({ctrl: a})
            done_steps += 1
            finished = res.done
            used_d, used_o = set(), set()
            for m in res.matches:
                o = orders[m.order_id]
                loc, plat = before[m.driver_id]
                if m.driver_id in used_d or m.order_id in used_o:
                    problems.append(f"driver or order matched twice at t={st.t}")
                used_d.add(m.driver_id)
                used_o.add(m.order_id)
                if dist[o.origin, loc] > 1:
                    problems.append(f"match over {dist[o.origin, loc]} hops")
                expect_disc = o.order_type == 1 or (o.order_type == 3 and m.served_as_discount)
                if o.order_type == 1 and not m.served_as_discount:
                    problems.append("type 1 order served at express fare")
                if o.order_type == 2 and m.served_as_discount:
                    problems.append("type 2 order served at discount fare")
                if m.served_as_discount != expect_disc:
                    problems.append("fare tier inconsistent with order type")
                if plat != m.platform:
                    problems.append("match platform differs from driver platform")
            accepting = {d.id for d in st.drivers.values() if d.accepts_discount}
            for m in res.matches:
                if m.served_as_discount and m.driver_id not in accepting and m.driver_id in st.drivers:
                    problems.append("discount order served by a non-accepting driver")
            fees = np.zeros(profile.n_platforms)
            for m in res.matches:
                fees[m.platform] += m.fee
            if not np.array_equal(fees, res.rewards):
                problems.append("platform rewards differ from summed fees")
            for p in range(profile.n_platforms):
                # online drivers = previous online + arrivals - departures, matched or not
                prev = sum(1 for v in before.values() if v[1] == p)
                now = st.online_count(p)
                if now != prev + (st.onlined[p] - on0[p]) - (st.offlined[p] - off0[p]):
                    problems.append(f"driver count of platform {p} not conserved at t={st.t}")
                if now != st.onlined[p] - st.offlined[p]:
                    problems.append(f"platform {p}: cumulative on/off ledger broken")
    return done_steps, problems


def check_conservation(steps: int = 10_000):
    n, problems = conservation_violations(steps)
    return not problems, f"{n} random steps, {len(problems)} violations" + (f": {problems[:3]}" if problems else "")


# refiner


class LinearCritic:
    """``Q(s, h, a) = sum_i c_i a_i``; stands in for a critic in hand-checkable cases."""

    def __init__(self, coef):
        self.coef = torch.as_tensor(np.asarray(coef, dtype=np.float64))

    def features(self, s, h):
        return torch.zeros(s.shape[0], 1, dtype=torch.float64)

    def head(self, feats, a):
        return (a * self.coef).sum(dim=1) + feats[:, 0]


def check_refiner(cases: int = 1000, seed: int = 0):
    rng = np.random.default_rng(seed)
    grid = GridMap.hexagon(1)
    n = grid.n_cells
    cfg = NetConfig(hidden_channels=2, dense_units=(8, 6), memory_length=2)
    critic = CriticNet.create(grid, cfg, rng)
    s = rng.uniform(0, 1, 5 * n)
    h = rng.uniform(0, 1, (2, 9, grid.axial_rows, grid.axial_cols))
    a0 = rng.uniform(0, 1, n)
    identity = np.array_equal(refine(a0, s, h, critic, 0).action, a0)
    frozen = critic.params.copy()
    for k in (1, 3, 10):
        refine(a0, s, h, critic, k, 0.1)
    untouched = critic.params.equal(frozen) and all(
        critic.params.m[k].equal(frozen.m[k]) for k in frozen.names()
    ) and critic.params.step_count == frozen.step_count
    hand = refine(np.array([0.5]), np.zeros(5), np.zeros((0, 9, 1, 1)), LinearCritic([1.0]), 1, 0.1).action[0]
    hand_ok = abs(hand - 0.625) <= 1e-12
    mask_ok = True
    for _ in range(cases):
        m = int(rng.integers(1, 8))
        a = rng.uniform(0.01, 1, m)
        w = rng.uniform(-3, 3, m)
        b = rng.uniform(-2, 2, m)
        pre = w * a + b
        sat = (pre <= 0) | (pre >= 1)
        if not sat.any():
            continue
        g = rng.normal(size=m)
        new, live = refine_step(RefinerParams(w, b), a, g, 0.1)
        wt = torch.tensor(w, requires_grad=True)
        bt = torch.tensor(b, requires_grad=True)
        q = (torch.clamp(wt * torch.from_numpy(a) + bt, 0.0, 1.0) * torch.from_numpy(g)).sum()
        gw, gb = torch.autograd.grad(q, (wt, bt))
        strict = (pre < 0) | (pre > 1)
        mask_ok &= bool(
            np.array_equal(new.w[sat], w[sat])
            and np.array_equal(new.b[sat], b[sat])
            and not live[sat].any()
            and np.all(gw.numpy()[strict] == 0)
            and np.all(gb.numpy()[strict] == 0)
            and np.array_equal(affine_clip(a, RefinerParams(w, b))[strict], np.clip(pre, 0, 1)[strict])
        )
    ok = identity and untouched and hand_ok and mask_ok
    return ok, (f"K=0 identity {identity}; hand example {hand!r}; clip mask {mask_ok} on {cases} cases; "
                f"critic untouched {untouched}")


# agent


def soft_update_ratio(k: int = 1000, tau: float = 0.005, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    grid = GridMap.hexagon(1)
    cfg = NetConfig(hidden_channels=2, dense_units=(8, 6), memory_length=1)
    online = CriticNet.create(grid, cfg, rng)
    target = CriticNet.create(grid, cfg, rng)
    d0 = float(torch.linalg.vector_norm(target.params.flat() - online.params.flat()))
    for _ in range(k):
        soft_update(target, online, tau)
    d = float(torch.linalg.vector_norm(target.params.flat() - online.params.flat()))
    return (d / d0) / (1 - tau) ** k - 1.0


def check_soft_update(k: int = 1000, tau: float = 0.005):
    rel = soft_update_ratio(k, tau)
    return abs(rel) <= 1e-9, f"relative deviation from (1-tau)^k: {rel:.2e}"


# trainer


def reduction_metrics(episodes: int = 2, seed: int = 3):
    from ..trainer import TrainConfig, train
    from .profiles import synth_profile

    profile = synth_profile({"radius": 1, "horizon": 4, "platforms": 2, "supply_scales": [1, 1]}, seed=seed)
    base = dict(episodes=episodes, seed=seed, hidden_channels=2, dense_units=(8, 6), memory_length=2, k_max=0)
    a = train(TrainConfig(algo="ddpg", **base), profile)
    b = train(TrainConfig(algo="pi-ddpg", **base), profile)
    return a, b


def check_reduction(episodes: int = 2):
    a, b = reduction_metrics(episodes)
    same_rows = [m.row() for m in a.metrics] == [m.row() for m in b.metrics]
    same_steps = [m.step_rewards for m in a.metrics] == [m.step_rewards for m in b.metrics]
    same_params = all(
        x.equal(y) for x, y in zip(a.learner.agent.param_sets().values(), b.learner.agent.param_sets().values())
    )
    ok = same_rows and same_steps and same_params
    return ok, f"metrics identical {same_rows and same_steps}, parameters identical {same_params}"


def run_checks(quick: bool = False) -> list[CheckResult]:
    scale = 0.1 if quick else 1.0
    return [
        _timed("gradients", check_gradients, max(2, int(20 * scale))),
        _timed("per-statistics", check_per),
        _timed("matching-oracle", check_matching, max(50, int(1000 * scale))),
        _timed("conservation", check_conservation, max(500, int(10_000 * scale))),
        _timed("refiner", check_refiner, max(100, int(1000 * scale))),
        _timed("reduction", check_reduction),
        _timed("soft-update", check_soft_update),
    ]
