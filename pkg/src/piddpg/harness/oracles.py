"""Slow reference implementations used to cross-check the production code.

The matcher here re-reads the priority rules from scratch: every order scans
the complete driver list, filters by eligibility and picks the best candidate
by an explicit key. It shares no pooling or neighbor tables with the market.
"""
from __future__ import annotations

import numpy as np

from ..hexgrid import GridCell, GridMap, hex_distance
from ..market import Driver, MarketState, Order, ScenarioProfile

# (order type, driver must accept discount, discount fare, only orders left over by step)
PRIORITY_STEPS = (
    (2, False, False, None),
    (1, True, True, None),
    (2, True, False, 0),
    (3, False, False, None),
    (3, True, True, 3),
)


def reference_matching(
    drivers: list[Driver], orders: list[Order], grid: GridMap, fee_per_hop: float = 1.0, discount: float = 0.7
) -> set[tuple]:
    """Match set ``{(driver_id, order_id, served_as_discount, fee)}``."""
    cells: list[GridCell] = list(grid.cells)
    taken_driver = set()
    left_over = {}
    result = set()
    for step, (otype, accepting, disc, after) in enumerate(PRIORITY_STEPS):
        if after is None:
            queue = sorted((o for o in orders if o.order_type == otype), key=lambda o: o.id)
        else:
            queue = left_over[after]
        unmatched = []
        for o in queue:
            origin = cells[o.origin]
            best, best_key = None, None
            for d in drivers:
                if d.id in taken_driver or not d.online or d.accepts_discount != accepting:
                    continue
                c = cells[d.location]
                dist = hex_distance(origin, c)
                if dist > 1:
                    continue
                key = (dist, c.x, c.y, d.id)
                if best_key is None or key < best_key:
                    best, best_key = d, key
            if best is None:
                unmatched.append(o)
                continue
            taken_driver.add(best.id)
            hops = max(1, hex_distance(origin, cells[o.destination]))
            fee = fee_per_hop * hops * (discount if disc else 1.0)
            result.add((best.id, o.id, disc, fee))
        left_over[step] = unmatched
    return result


def production_match_set(matches) -> set[tuple]:
    return {(m.driver_id, m.order_id, m.served_as_discount, m.fee) for m in matches}


def random_matching_instance(rng: np.random.Generator, max_cells: int = 7, max_drivers: int = 12, max_orders: int = 12):
    """A random small map (subset of the radius-1 hexagon) with a shuffled-id driver and order pool."""
    base = GridMap.hexagon(1)
    k = int(rng.integers(1, min(max_cells, base.n_cells) + 1))
    picked = sorted(rng.choice(base.n_cells, size=k, replace=False))
    grid = GridMap.from_cells([base.cells[i] for i in picked])
    n = grid.n_cells
    nd = int(rng.integers(0, max_drivers + 1))
    no = int(rng.integers(0, max_orders + 1))
    dids = rng.permutation(100)[:nd]
    oids = rng.permutation(100)[:no]
    drivers = [
        Driver(int(dids[i]), int(rng.integers(0, 3)), int(rng.integers(0, n)), bool(rng.random() < 0.5))
        for i in range(nd)
    ]
    orders = [
        Order(int(oids[i]), int(rng.integers(1, 4)), int(rng.integers(0, n)), int(rng.integers(0, n)), 0)
        for i in range(no)
    ]
    profile = ScenarioProfile(
        grid=grid,
        horizon=1,
        supply_means=np.zeros((3, 1)),
        demand_means=np.zeros((1, n, 3)),
        destinations=np.full((n, n), 1.0 / n),
    )
    state = MarketState(
        t=0,
        drivers={d.id: d for d in drivers},
        open_orders=list(orders),
        rng=np.random.default_rng(0),
        onlined=np.zeros(3, dtype=np.int64),
        offlined=np.zeros(3, dtype=np.int64),
    )
    return profile, state, drivers, orders
