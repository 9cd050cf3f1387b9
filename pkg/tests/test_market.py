import copy

import numpy as np
import pytest

from conftest import make_profile
from piddpg.errors import ConfigError, DomainError, StateError
from piddpg.harness.oracles import production_match_set, random_matching_instance, reference_matching
from piddpg.harness.verify import conservation_violations
from piddpg.hexgrid import GridCell, GridMap
from piddpg.market import (
    Driver,
    MarketEnv,
    MarketState,
    MatchRecord,
    Order,
    ScenarioProfile,
    apply_action,
    base_fee,
    driver_online_offline,
    driver_transition,
    get_state,
    order_arrival,
    order_matching,
    reset,
    round_half_up,
    step,
    supply_rates,
)


def bare_state(drivers=(), orders=(), platforms=1, seed=0):
    return MarketState(
        t=0,
        drivers={d.id: d for d in drivers},
        open_orders=list(orders),
        rng=np.random.default_rng(seed),
        onlined=np.zeros(platforms, dtype=np.int64),
        offlined=np.zeros(platforms, dtype=np.int64),
        next_driver_id=max((d.id for d in drivers), default=-1) + 1,
    )


# profile validation


def test_profile_violations_are_listed():
    p = make_profile(demand=-1.0)
    with pytest.raises(ConfigError) as err:
        p.validate()
    assert "demand[t=0][cell=0][type=1]" in str(err.value)
    assert len(err.value.violations) == 3 * 7 * 3
    bad = make_profile(destinations=np.full((7, 7), 0.9 / 7))
    with pytest.raises(ConfigError, match="destinations"):
        bad.validate()


# reset


def test_reset_zero_supply():
    s = reset(make_profile(supply=0.0), 1)
    assert s.t == 0 and not s.drivers and not s.open_orders


def test_reset_deterministic():
    p = make_profile(supply=20.0, platforms=3)
    assert reset(p, 5).fingerprint() == reset(p, 5).fingerprint()
    assert reset(p, 5).fingerprint() != reset(p, 6).fingerprint()


def test_reset_poisson_mean():
    p = make_profile(radius=0, supply=100.0)
    counts = [len(reset(p, s).drivers) for s in range(10_000)]
    assert abs(np.mean(counts) - 100) / 100 < 0.01


def test_reset_flags():
    p = make_profile(supply=200.0, platforms=2)
    s = reset(p, 0)
    own = [d for d in s.drivers.values() if d.platform == 0]
    comp = [d for d in s.drivers.values() if d.platform == 1]
    assert not any(d.accepts_discount for d in own)
    share = np.mean([d.accepts_discount for d in comp])
    assert 0.2 < share < 0.4


# arrivals


def test_arrival_zero_demand():
    s = reset(make_profile(), 0)
    assert order_arrival(s, make_profile()) == []


def test_arrival_poisson_mean():
    n = 1
    dm = np.zeros((1, n, 3))
    dm[0, 0, 1] = 4.0
    p = make_profile(radius=0, horizon=1, demand=dm)
    s = reset(p, 0)
    total = 0
    draws = 100_000
    # one call draws every (cell, type), so repeated calls give independent samples
    for _ in range(draws // 1000):
        counts = s.rng.poisson(p.demand_means[0], size=(1000, n, 3))
        total += counts[:, 0, 1].sum()
    assert 3.96 <= total / draws <= 4.04
    sizes = []
    for _ in range(2000):
        s.open_orders = []
        sizes.append(len(order_arrival(s, p)))
    assert abs(np.mean(sizes) - 4.0) < 0.15


def test_arrival_point_mass_destination():
    p = make_profile(demand=1.0, destinations=np.eye(7))
    s = reset(p, 3)
    orders = order_arrival(s, p)
    assert orders and all(o.origin == o.destination for o in orders)
    assert all(o.order_type in (1, 2, 3) for o in orders)


# supply


@pytest.mark.parametrize("now,nxt,lam,p", [(3, 5, 2, 0), (5, 3, 0, 0.4), (0, 0, 0, 0)])
def test_supply_rates(now, nxt, lam, p):
    prof = make_profile(radius=0, horizon=2, supply=np.array([[now, nxt]], dtype=float))
    rl, rp = supply_rates(prof, 0, 0)
    assert rl == pytest.approx(lam) and rp == pytest.approx(p)


def test_constant_supply_has_no_drift():
    p = make_profile(radius=1, horizon=2, supply=30.0)
    s = reset(p, 0)
    before = len(s.drivers)
    for _ in range(10_000):
        driver_online_offline(s, p)
    # lambda = 0 and p_off = 0 when the mean is flat
    assert len(s.drivers) == before


def test_offline_probability_monte_carlo():
    prof = make_profile(radius=0, horizon=2, supply=np.array([[5.0, 3.0]]))
    left = []
    for seed in range(4000):
        s = bare_state([Driver(i, 0, 0) for i in range(5)], seed=seed)
        driver_online_offline(s, prof)
        left.append(len(s.drivers))
    assert abs(np.mean(left) - 3.0) < 0.05


# actions


@pytest.mark.parametrize("a,k", [(1.0, 10), (0.0, 0), (0.35, 4), (0.5, 5), (0.04, 0)])
def test_apply_action_counts(a, k):
    s = bare_state([Driver(i, 0, 0) for i in range(10)])
    apply_action(s, 0, np.array([a]))
    assert sum(d.accepts_discount for d in s.drivers.values()) == k


def test_round_half_up():
    assert round_half_up(3.5) == 4
    assert round_half_up(0.35 * 10) == 4
    assert round_half_up(2.4999) == 2
    assert round_half_up(0.0) == 0


def test_apply_action_rejects_bad_fractions():
    s = bare_state([Driver(0, 0, 0)])
    with pytest.raises(DomainError):
        apply_action(s, 0, np.array([1.2]))
    with pytest.raises(DomainError):
        apply_action(s, 0, np.array([np.nan]))


def test_apply_action_leaves_competitors():
    s = bare_state([Driver(0, 0, 0), Driver(1, 1, 0, True)], platforms=2)
    apply_action(s, 0, np.array([0.0]))
    assert s.drivers[1].accepts_discount


# observations


def test_get_state_counts_and_isolation():
    p = make_profile(platforms=2)
    s = bare_state([Driver(0, 0, 2, True), Driver(1, 0, 2, True), Driver(2, 1, 2, False)], platforms=2)
    obs = get_state(s, p, 0)
    assert obs.n_accept[2] == 2 and obs.n_reject.sum() == 0
    s.drivers[2].accepts_discount = True
    assert get_state(s, p, 0) == obs
    only_comp = bare_state([Driver(0, 1, 0)], platforms=2)
    o = get_state(only_comp, p, 0)
    assert not o.n_accept.any() and not o.n_reject.any()


def test_get_state_empty_market():
    p = make_profile()
    o = get_state(bare_state(), p, 0)
    assert not o.as_vector(10.0).any()


# matching


def test_type1_needs_accepting_driver():
    p = make_profile()
    s = bare_state([Driver(0, 0, 0, False)], [Order(0, 1, 0, 0, 0)])
    assert order_matching(s, p) == []


def test_type2_prefers_rejecting_driver():
    p = make_profile()
    s = bare_state([Driver(0, 0, 0, True), Driver(1, 0, 0, False)], [Order(0, 2, 0, 0, 0)])
    (m,) = order_matching(s, p)
    assert m.driver_id == 1 and not m.served_as_discount and m.fee == 1.0


def test_type3_tiers():
    p = make_profile()
    s = bare_state([Driver(0, 0, 0, True)], [Order(0, 3, 0, 0, 0)])
    (m,) = order_matching(s, p)
    assert m.served_as_discount and m.fee == pytest.approx(0.7)
    s = bare_state([Driver(0, 0, 0, True)], [Order(0, 2, 0, 0, 0)])
    (m,) = order_matching(s, p)
    assert not m.served_as_discount and m.fee == 1.0


def test_neighbor_expansion_and_radius():
    g = GridMap.hexagon(2)
    p = make_profile(radius=2)
    center = g.index(GridCell(0, 0, 0))
    ring1 = g.index(GridCell(1, -1, 0))
    ring2 = g.index(GridCell(2, -2, 0))
    s = bare_state([Driver(0, 0, ring2, False), Driver(1, 0, ring1, False)], [Order(0, 2, center, center, 0)])
    (m,) = order_matching(s, p)
    assert m.driver_id == 1
    s = bare_state([Driver(0, 0, ring2, False)], [Order(0, 2, center, center, 0)])
    assert order_matching(s, p) == []


def test_brute_force_small_fixed_case():
    rng = np.random.default_rng(2024)
    g = GridMap.from_cells([GridCell(0, 0, 0), GridCell(1, -1, 0), GridCell(1, 0, -1)])
    p = ScenarioProfile(g, 1, np.zeros((2, 1)), np.zeros((1, 3, 3)), np.full((3, 3), 1 / 3))
    drivers = [Driver(i, i % 2, int(rng.integers(3)), bool(rng.integers(2))) for i in range(5)]
    orders = [Order(10 + i, int(rng.integers(1, 4)), int(rng.integers(3)), int(rng.integers(3)), 0) for i in range(6)]
    s = bare_state(copy.deepcopy(drivers), orders, platforms=2)
    assert production_match_set(order_matching(s, p)) == reference_matching(drivers, orders, g)


def test_brute_force_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(300):
        prof, state, drivers, orders = random_matching_instance(rng)
        ref = reference_matching(copy.deepcopy(drivers), orders, prof.grid)
        assert production_match_set(order_matching(state, prof)) == ref


def test_base_fee():
    g = GridMap.hexagon(3)
    p = make_profile(radius=3)
    c = g.index(GridCell(0, 0, 0))
    assert base_fee(c, g.index(GridCell(1, -1, 0)), p) == 1.0
    assert base_fee(c, c, p) == 1.0
    assert base_fee(c, g.index(GridCell(3, -3, 0)), p) == 3.0
    assert base_fee(c, g.index(GridCell(1, -1, 0)), p) * p.discount_ratio == pytest.approx(0.7)


# transitions and step


def test_driver_transition():
    s = bare_state([Driver(0, 0, 1), Driver(1, 0, 2)])
    driver_transition(s, [])
    assert s.drivers[0].location == 1
    driver_transition(s, [MatchRecord(0, 0, 1, False, 1.0, 0, 2, 1)])
    assert s.drivers[0].location == 1
    driver_transition(s, [MatchRecord(0, 1, 1, False, 1.0, 0, 2, 5)])
    assert s.drivers[0].location == 5 and s.drivers[1].location == 2
    with pytest.raises(StateError):
        driver_transition(s, [MatchRecord(99, 0, 0, False, 1.0, 0, 2, 0)])


def test_zero_market_step():
    env = MarketEnv(make_profile(horizon=2))
    obs = env.reset(0)
    res = env.step({0: np.zeros(7)})
    assert res.rewards.sum() == 0 and not obs[0].as_vector(10).any()


def test_micro_scenario_reward_one():
    g = GridMap.hexagon(1)
    p = make_profile(radius=1, horizon=1)
    c = g.index(GridCell(0, 0, 0))
    nb = g.index(GridCell(1, -1, 0))
    s = bare_state([Driver(0, 0, nb)], [Order(0, 2, c, nb, 0)])
    s.started = True
    res = step(s, p, {0: np.zeros(7)})
    assert res.rewards.tolist() == [1.0]
    assert s.drivers[0].location == nb


def test_episode_length_and_done():
    p = make_profile(horizon=3, supply=5.0, demand=0.5)
    env = MarketEnv(p)
    env.reset(1)
    n = 0
    done = False
    while not done:
        done = env.step({0: np.full(7, 0.5)}).done
        n += 1
    assert n == p.horizon + 1
    with pytest.raises(StateError):
        env.step({0: np.zeros(7)})


def test_step_deterministic():
    p = make_profile(horizon=4, supply=8.0, demand=1.0, platforms=2)
    runs = []
    for _ in range(2):
        env = MarketEnv(p)
        env.reset(11)
        out = []
        for t in range(5):
            r = env.step({0: np.linspace(0, 1, 7)})
            out.append((r.rewards.tolist(), [m for m in r.matches], env.state.fingerprint()))
        runs.append(out)
    assert runs[0] == runs[1]


def test_random_run_invariants():
    n, problems = conservation_violations(steps=2000, seed=5)
    assert n == 2000 and problems == []


def test_unmatched_orders_expire():
    p = make_profile(horizon=2, demand=2.0)
    env = MarketEnv(p)
    env.reset(0)
    first = {o.id for o in env.state.open_orders}
    env.step({0: np.zeros(7)})
    assert first and not first & {o.id for o in env.state.open_orders}
    assert all(o.created_step == env.state.t for o in env.state.open_orders)
