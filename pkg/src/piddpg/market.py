"""Integrated multi-platform ride-hailing market on a hexagonal grid.

One interval of the simulator runs these phases, in order::

    order_arrival -> driver_online_offline -> get_state
        -> apply_action -> order_matching -> driver_transition

The observation boundary sits between ``get_state`` and ``apply_action``: the
agent sees the interval's order pool and its own drivers before choosing the
acceptance fractions. :func:`begin_interval` runs the first three phases and
:func:`step` runs the rest, then opens the next interval.

Cells inside drivers, orders and match records are referenced by their index
in ``profile.grid.cells``.

All randomness comes from the single generator ``MarketState.rng``. Draw order
per interval:

1. arrivals: one Poisson count per (cell, type) in cell-major order, then one
   uniform per order (same order) for the destination;
2. on-lining per platform in index order: Poisson count, uniform cell per new
   driver, and for competitors one uniform per new driver for the flag;
3. off-lining: one uniform per online driver of every platform with a positive
   off-line probability, in ascending driver id;
4. actions: for every cell (index order) where the target count is strictly
   between 0 and the driver count, one permutation of that cell's drivers
   sorted by id.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, StateError
from .hexgrid import N_ORDER_TYPES, GridMap, Snapshot

REJECT, ACCEPT = 0, 1
ORDER_TYPES = (1, 2, 3)


@dataclass
class ScenarioProfile:
    """Calibration inputs of the market.

    ``supply_means[m, t]`` is the mean online driver count of platform ``m`` in
    interval ``t``; ``demand_means[t, i, j]`` the mean arrivals of type ``j + 1``
    in cell ``i``. Interval tables have ``horizon`` rows and are read cyclically,
    so the transition out of the last interval looks at interval 0.
    """

    grid: GridMap
    horizon: int
    supply_means: np.ndarray
    demand_means: np.ndarray
    destinations: np.ndarray
    competitor_ratio: float = 0.3
    controlled_platform: int = 0
    express_fee_per_hop: float = 1.0
    discount_ratio: float = 0.7
    count_scale: float = 10.0
    _distance: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.supply_means = np.asarray(self.supply_means, dtype=np.float64)
        self.demand_means = np.asarray(self.demand_means, dtype=np.float64)
        self.destinations = np.asarray(self.destinations, dtype=np.float64)

    @property
    def n_platforms(self) -> int:
        return int(self.supply_means.shape[0])

    @property
    def n_cells(self) -> int:
        return self.grid.n_cells

    @property
    def distance(self) -> np.ndarray:
        if self._distance is None:
            self._distance = self.grid.distance_matrix()
        return self._distance

    def interval(self, t: int) -> int:
        return t % self.horizon

    def violations(self) -> list[str]:
        out = []
        n = self.grid.n_cells
        if not isinstance(self.horizon, (int, np.integer)) or self.horizon < 1:
            out.append(f"horizon: must be a positive integer, got {self.horizon!r}")
            return out
        T = int(self.horizon)
        sm, dm, dest = self.supply_means, self.demand_means, self.destinations
        if sm.ndim != 2 or sm.shape[1] != T or sm.shape[0] < 1:
            out.append(f"supply: expected shape (platforms, {T}), got {sm.shape}")
        else:
            for m, t in zip(*np.nonzero(~np.isfinite(sm) | (sm < 0))):
                out.append(f"supply[{m}][{t}]: mean must be finite and >= 0, got {sm[m, t]}")
        if dm.shape != (T, n, N_ORDER_TYPES):
            out.append(f"demand: expected shape ({T}, {n}, {N_ORDER_TYPES}), got {dm.shape}")
        else:
            for t, i, j in zip(*np.nonzero(~np.isfinite(dm) | (dm < 0))):
                out.append(
                    f"demand[t={t}][cell={i}][type={j + 1}]: mean must be finite and >= 0, got {dm[t, i, j]}"
                )
        if dest.shape != (n, n):
            out.append(f"destinations: expected shape ({n}, {n}), got {dest.shape}")
        else:
            for i in range(n):
                row = dest[i]
                if np.any(~np.isfinite(row)) or np.any(row < 0):
                    out.append(f"destinations[{i}]: weights must be finite and >= 0")
                elif abs(row.sum() - 1.0) > 1e-9:
                    out.append(f"destinations[{i}]: weights sum to {row.sum():.12g}, expected 1")
        if not 0.0 <= self.competitor_ratio <= 1.0:
            out.append(f"platforms.competitor_ratio: must lie in [0, 1], got {self.competitor_ratio}")
        if sm.ndim == 2 and not 0 <= self.controlled_platform < sm.shape[0]:
            out.append(f"platforms.controlled: index {self.controlled_platform} out of range")
        if not self.express_fee_per_hop >= 0:
            out.append("pricing.express_per_hop: must be >= 0")
        if not 0.0 <= self.discount_ratio <= 1.0:
            out.append("pricing.discount_ratio: must lie in [0, 1]")
        if not self.count_scale > 0:
            out.append("encoding.count_scale: must be > 0")
        return out

    def validate(self) -> "ScenarioProfile":
        problems = self.violations()
        if problems:
            raise ConfigError("invalid scenario profile", problems)
        return self

    def __eq__(self, other):
        if not isinstance(other, ScenarioProfile):
            return NotImplemented
        return (
            self.grid == other.grid
            and self.horizon == other.horizon
            and np.array_equal(self.supply_means, other.supply_means)
            and np.array_equal(self.demand_means, other.demand_means)
            and np.array_equal(self.destinations, other.destinations)
            and self.competitor_ratio == other.competitor_ratio
            and self.controlled_platform == other.controlled_platform
            and self.express_fee_per_hop == other.express_fee_per_hop
            and self.discount_ratio == other.discount_ratio
            and self.count_scale == other.count_scale
        )


@dataclass(slots=True)
class Order:
    id: int
    order_type: int
    origin: int
    destination: int
    created_step: int


@dataclass(slots=True)
class Driver:
    id: int
    platform: int
    location: int
    accepts_discount: bool = False
    online: bool = True


@dataclass(frozen=True, slots=True)
class MatchRecord:
    driver_id: int
    order_id: int
    grid: int
    served_as_discount: bool
    fee: float
    platform: int
    order_type: int
    destination: int


@dataclass
class Observation:
    """What one platform sees: its own drivers by setting, and the shared order pool."""

    n_accept: np.ndarray
    n_reject: np.ndarray
    demand: np.ndarray

    def as_vector(self, count_scale: float) -> np.ndarray:
        return np.concatenate([self.n_accept, self.n_reject, self.demand.ravel()]).astype(np.float64) / count_scale

    def __eq__(self, other):
        return (
            isinstance(other, Observation)
            and np.array_equal(self.n_accept, other.n_accept)
            and np.array_equal(self.n_reject, other.n_reject)
            and np.array_equal(self.demand, other.demand)
        )


@dataclass
class MarketState:
    t: int
    drivers: dict
    open_orders: list
    rng: np.random.Generator
    onlined: np.ndarray
    offlined: np.ndarray
    next_driver_id: int = 0
    next_order_id: int = 0
    started: bool = False
    done: bool = False

    def online_count(self, platform: int) -> int:
        return sum(1 for d in self.drivers.values() if d.platform == platform)

    def fingerprint(self) -> tuple:
        """Hashable summary of the full state, used for determinism checks."""
        drivers = tuple(
            (d.id, d.platform, d.location, d.accepts_discount) for d in sorted(self.drivers.values(), key=_by_id)
        )
        orders = tuple((o.id, o.order_type, o.origin, o.destination, o.created_step) for o in self.open_orders)
        return (
            self.t,
            self.started,
            self.done,
            drivers,
            orders,
            tuple(self.onlined),
            tuple(self.offlined),
            str(self.rng.bit_generator.state),
        )


def _by_id(obj):
    return obj.id


def _add_drivers(state: MarketState, profile: ScenarioProfile, platform: int, count: int) -> None:
    n = profile.n_cells
    cells = state.rng.integers(0, n, size=count)
    if platform == profile.controlled_platform:
        flags = np.zeros(count, dtype=bool)
    else:
        flags = state.rng.random(count) < profile.competitor_ratio
    for c, f in zip(cells, flags):
        did = state.next_driver_id
        state.next_driver_id += 1
        state.drivers[did] = Driver(did, platform, int(c), bool(f))
    state.onlined[platform] += count


def reset(profile: ScenarioProfile, seed: int) -> MarketState:
    """Fresh market at ``t = 0`` with Poisson initial supply and no open orders."""
    profile.validate()
    M = profile.n_platforms
    state = MarketState(
        t=0,
        drivers={},
        open_orders=[],
        rng=np.random.default_rng(seed),
        onlined=np.zeros(M, dtype=np.int64),
        offlined=np.zeros(M, dtype=np.int64),
    )
    for m in range(M):
        k = int(state.rng.poisson(profile.supply_means[m, 0]))
        _add_drivers(state, profile, m, k)
    return state


def order_arrival(state: MarketState, profile: ScenarioProfile) -> list[Order]:
    """Draw this interval's orders and add them to the shared pool."""
    if state.t > profile.horizon:
        raise StateError("order_arrival called past the horizon")
    means = profile.demand_means[profile.interval(state.t)]
    counts = state.rng.poisson(means)
    total = int(counts.sum())
    new = []
    if total == 0:
        return new
    u = state.rng.random(total)
    cdf = np.cumsum(profile.destinations, axis=1)
    k = 0
    n = profile.n_cells
    for i in range(n):
        for j in range(N_ORDER_TYPES):
            c = int(counts[i, j])
            if not c:
                continue
            dests = np.searchsorted(cdf[i], u[k : k + c], side="right")
            np.minimum(dests, n - 1, out=dests)
            k += c
            for d in dests:
                new.append(Order(state.next_order_id, j + 1, i, int(d), state.t))
                state.next_order_id += 1
    state.open_orders.extend(new)
    return new


def supply_rates(profile: ScenarioProfile, platform: int, t: int) -> tuple[float, float]:
    """On-line arrival rate and off-line probability for ``platform`` in interval ``t``."""
    now = profile.supply_means[platform, profile.interval(t)]
    nxt = profile.supply_means[platform, profile.interval(t + 1)]
    lam = max(0.0, nxt - now)
    p_off = max(0.0, (now - nxt) / now) if now > 0 else 0.0
    return lam, p_off


def driver_online_offline(state: MarketState, profile: ScenarioProfile) -> MarketState:
    M = profile.n_platforms
    p_off = np.zeros(M)
    for m in range(M):
        lam, p = supply_rates(profile, m, state.t)
        p_off[m] = p
        _add_drivers(state, profile, m, int(state.rng.poisson(lam)))
    if np.any(p_off > 0):
        exposed = [d for d in sorted(state.drivers.values(), key=_by_id) if p_off[d.platform] > 0]
        if exposed:
            u = state.rng.random(len(exposed))
            for d, ui in zip(exposed, u):
                if ui < p_off[d.platform]:
                    d.online = False
                    del state.drivers[d.id]
                    state.offlined[d.platform] += 1
    return state


def round_half_up(x: float) -> int:
    # the epsilon absorbs products like 0.35 * 10 == 3.4999999999999996
    return int(math.floor(x + 0.5 + 1e-9))


def apply_action(state: MarketState, platform: int, action) -> MarketState:
    """Set exactly ``round_half_up(a_i * n_i)`` of the platform's drivers in cell ``i`` to accept."""
    a = np.asarray(action, dtype=np.float64)
    if a.ndim != 1:
        raise DomainError("action must be a vector with one fraction per cell")
    if np.any(~np.isfinite(a)) or np.any(a < 0) or np.any(a > 1):
        raise DomainError("action components must lie in [0, 1]")
    by_cell = {}
    for d in sorted(state.drivers.values(), key=_by_id):
        if d.platform == platform:
            if d.location >= a.shape[0]:
                raise DomainError("action is shorter than the number of cells")
            by_cell.setdefault(d.location, []).append(d)
    for cell in sorted(by_cell):
        group = by_cell[cell]
        n_i = len(group)
        k = round_half_up(a[cell] * n_i)
        if k <= 0:
            for d in group:
                d.accepts_discount = False
        elif k >= n_i:
            for d in group:
                d.accepts_discount = True
        else:
            perm = state.rng.permutation(n_i)
            for rank, idx in enumerate(perm):
                group[idx].accepts_discount = bool(rank < k)
    return state


def get_state(state: MarketState, profile: ScenarioProfile, platform: int) -> Observation:
    n = profile.n_cells
    acc = np.zeros(n, dtype=np.int64)
    rej = np.zeros(n, dtype=np.int64)
    for d in state.drivers.values():
        if d.platform == platform and d.online:
            if d.accepts_discount:
                acc[d.location] += 1
            else:
                rej[d.location] += 1
    demand = np.zeros((n, N_ORDER_TYPES), dtype=np.int64)
    for o in state.open_orders:
        demand[o.origin, o.order_type - 1] += 1
    return Observation(acc, rej, demand)


def base_fee(origin: int, destination: int, profile: ScenarioProfile) -> float:
    """Express fare: one unit per hop, intra-cell and adjacent trips both cost one unit."""
    return profile.express_fee_per_hop * max(1, int(profile.distance[origin, destination]))


def order_matching(state: MarketState, profile: ScenarioProfile) -> list[MatchRecord]:
    """Centralized priority matching over the pooled drivers of every platform.

    Pairing steps, in order:

    1. Type 2 orders -> non-accepting drivers
    2. Type 1 orders -> accepting drivers (discount fare)
    3. unmatched Type 2 -> accepting drivers (express fare)
    4. Type 3 orders -> non-accepting drivers (express fare)
    5. unmatched Type 3 -> accepting drivers (discount fare)

    In each step orders go in ascending id; an order takes the lowest-id
    eligible driver in its own cell, otherwise in the first adjacent cell (in
    canonical neighbor order) that has one.
    """
    grid = profile.grid
    n = grid.n_cells
    pools = [(deque(), deque()) for _ in range(n)]
    for d in sorted(state.drivers.values(), key=_by_id):
        if d.online:
            pools[d.location][ACCEPT if d.accepts_discount else REJECT].append(d)
    by_type = {1: [], 2: [], 3: []}
    for o in sorted(state.open_orders, key=_by_id):
        by_type[o.order_type].append(o)

    matches = []

    def pair(orders, cls, discount):
        residual = []
        for o in orders:
            driver = None
            for c in (o.origin, *grid.neighbor_indices(o.origin)):
                q = pools[c][cls]
                if q:
                    driver = q.popleft()
                    break
            if driver is None:
                residual.append(o)
                continue
            fee = base_fee(o.origin, o.destination, profile)
            if discount:
                fee *= profile.discount_ratio
            matches.append(
                MatchRecord(driver.id, o.id, o.origin, discount, fee, driver.platform, o.order_type, o.destination)
            )
        return residual

    left2 = pair(by_type[2], REJECT, False)
    pair(by_type[1], ACCEPT, True)
    pair(left2, ACCEPT, False)
    left3 = pair(by_type[3], REJECT, False)
    pair(left3, ACCEPT, True)
    return matches


def driver_transition(state: MarketState, matches) -> MarketState:
    for rec in matches:
        try:
            driver = state.drivers[rec.driver_id]
        except KeyError:
            raise StateError(f"match references unknown driver {rec.driver_id}") from None
        driver.location = rec.destination
    return state


def begin_interval(state: MarketState, profile: ScenarioProfile) -> list[Observation]:
    """Run arrivals and supply changes for interval ``t``; return every platform's view."""
    if state.done:
        raise StateError("episode is finished; call reset")
    if state.started:
        raise StateError(f"interval {state.t} already started")
    order_arrival(state, profile)
    driver_online_offline(state, profile)
    state.started = True
    return [get_state(state, profile, m) for m in range(profile.n_platforms)]


@dataclass
class StepResult:
    observations: list
    rewards: np.ndarray
    done: bool
    matches: list
    fulfilled: np.ndarray


def fulfilled_counts(matches, platform: int, n_cells: int) -> np.ndarray:
    """Per origin cell, per type count of orders served by ``platform``'s drivers."""
    out = np.zeros((n_cells, N_ORDER_TYPES), dtype=np.int64)
    for rec in matches:
        if rec.platform == platform:
            out[rec.grid, rec.order_type - 1] += 1
    return out


def step(state: MarketState, profile: ScenarioProfile, actions: dict) -> StepResult:
    """Finish interval ``t`` with the given per-platform actions and open interval ``t + 1``.

    ``actions`` maps platform index to a per-cell fraction vector; platforms
    without an entry keep their drivers' current settings. The episode covers
    intervals ``0..horizon``; after interval ``horizon`` the result is terminal.
    """
    if state.done:
        raise StateError("step called after the episode finished")
    if not state.started:
        begin_interval(state, profile)
    for m in sorted(actions):
        apply_action(state, m, actions[m])
    matches = order_matching(state, profile)
    driver_transition(state, matches)
    rewards = np.zeros(profile.n_platforms)
    for rec in matches:
        rewards[rec.platform] += rec.fee
    fulfilled = np.stack([fulfilled_counts(matches, m, profile.n_cells) for m in range(profile.n_platforms)])
    state.open_orders = []
    state.started = False
    if state.t >= profile.horizon:
        state.done = True
        obs = [get_state(state, profile, m) for m in range(profile.n_platforms)]
    else:
        state.t += 1
        obs = begin_interval(state, profile)
    return StepResult(obs, rewards, state.done, matches, fulfilled)


class MarketEnv:
    """Stateful convenience wrapper around the functional simulator."""

    def __init__(self, profile: ScenarioProfile):
        self.profile = profile.validate()
        self.state = None

    @property
    def grid(self) -> GridMap:
        return self.profile.grid

    def reset(self, seed: int) -> list[Observation]:
        self.state = reset(self.profile, seed)
        return begin_interval(self.state, self.profile)

    def step(self, actions: dict) -> StepResult:
        if self.state is None:
            raise StateError("reset must be called before step")
        return step(self.state, self.profile, actions)


def snapshot_from(obs: Observation, action, fulfilled) -> Snapshot:
    return Snapshot(
        drivers_accept=obs.n_accept.copy(),
        drivers_reject=obs.n_reject.copy(),
        demand=obs.demand.copy(),
        action=np.asarray(action, dtype=np.float64).copy(),
        fulfilled=np.asarray(fulfilled).copy(),
    )
