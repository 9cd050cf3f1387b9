"""Hexagonal cube-coordinate geometry and grid-tensor encoding of market snapshots.

Cells use cube coordinates ``(x, y, z)`` with ``x + y + z == 0``. A finite study
area (:class:`GridMap`) is embedded into a dense axial layout so that snapshots
can be stacked as ``(channels, rows, cols)`` tensors, with a boolean mask
marking the positions that correspond to real cells.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DomainError

N_ORDER_TYPES = 3
N_CHANNELS = 9
CHANNEL_NAMES = (
    "drivers_accept",
    "drivers_reject",
    "demand_1",
    "demand_2",
    "demand_3",
    "action",
    "fulfilled_1",
    "fulfilled_2",
    "fulfilled_3",
)
DEFAULT_COUNT_SCALE = 10.0

CUBE_DIRECTIONS = (
    (1, -1, 0),
    (1, 0, -1),
    (0, 1, -1),
    (-1, 1, 0),
    (-1, 0, 1),
    (0, -1, 1),
)


class _Cube(NamedTuple):
    x: int
    y: int
    z: int


class GridCell(_Cube):
    """A hexagon in cube coordinates."""

    __slots__ = ()

    def __new__(cls, x, y, z):
        x, y, z = int(x), int(y), int(z)
        if x + y + z != 0:
            raise DomainError(f"cube coordinates must sum to zero, got ({x}, {y}, {z})")
        return super().__new__(cls, x, y, z)

    def cube_neighbors(self):
        return [GridCell(self.x + dx, self.y + dy, self.z + dz) for dx, dy, dz in CUBE_DIRECTIONS]


def hex_distance(a: GridCell, b: GridCell) -> int:
    return (abs(a.x - b.x) + abs(a.y - b.y) + abs(a.z - b.z)) // 2


def hexagon_cells(radius: int) -> list[GridCell]:
    if radius < 0:
        raise DomainError(f"radius must be non-negative, got {radius}")
    cells = []
    for x in range(-radius, radius + 1):
        for y in range(max(-radius, -x - radius), min(radius, -x + radius) + 1):
            cells.append(GridCell(x, y, -x - y))
    return cells


@dataclass(frozen=True, eq=False)
class GridMap:
    """Finite set of cells with a lossless axial embedding.

    Cells are stored in row-major axial order, sorted by ``(z, x)``, so cell index
    ``i`` is the ``i``-th true entry of ``mask.ravel()``.
    """

    cells: tuple
    axial_rows: int
    axial_cols: int
    mask: np.ndarray
    cell_to_index: dict
    min_x: int
    min_z: int
    radius: int | None = None
    _lookup: dict = field(default_factory=dict, repr=False)
    _neighbors: tuple = field(default=(), repr=False)

    @classmethod
    def from_cells(cls, cells: Iterable[GridCell], radius: int | None = None) -> "GridMap":
        uniq = {GridCell(*c) for c in cells}
        if not uniq:
            raise DomainError("a map needs at least one cell")
        ordered = tuple(sorted(uniq, key=lambda c: (c.z, c.x)))
        min_x = min(c.x for c in ordered)
        min_z = min(c.z for c in ordered)
        rows = max(c.z for c in ordered) - min_z + 1
        cols = max(c.x for c in ordered) - min_x + 1
        mask = np.zeros((rows, cols), dtype=bool)
        to_index = {}
        lookup = {}
        for i, c in enumerate(ordered):
            rc = (c.z - min_z, c.x - min_x)
            mask[rc] = True
            to_index[c] = rc
            lookup[c] = i
        mask.setflags(write=False)
        nbrs = []
        for c in ordered:
            inside = sorted((n for n in c.cube_neighbors() if n in lookup), key=lambda n: (n.x, n.y))
            nbrs.append(tuple(lookup[n] for n in inside))
        return cls(
            cells=ordered,
            axial_rows=rows,
            axial_cols=cols,
            mask=mask,
            cell_to_index=to_index,
            min_x=min_x,
            min_z=min_z,
            radius=radius,
            _lookup=lookup,
            _neighbors=tuple(nbrs),
        )

    @classmethod
    def hexagon(cls, radius: int = 3) -> "GridMap":
        return cls.from_cells(hexagon_cells(radius), radius=radius)

    def __len__(self):
        return len(self.cells)

    def __contains__(self, cell):
        return cell in self._lookup

    def __eq__(self, other):
        return isinstance(other, GridMap) and self.cells == other.cells

    def __hash__(self):
        return hash(self.cells)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def index(self, cell: GridCell) -> int:
        try:
            return self._lookup[cell]
        except KeyError:
            raise DomainError(f"cell {tuple(cell)} is not in the map") from None

    def neighbor_indices(self, i: int) -> tuple:
        """In-map neighbors of cell ``i`` as indices, canonical ``(x, y)`` order."""
        return self._neighbors[i]

    def distance_matrix(self) -> np.ndarray:
        n = self.n_cells
        out = np.zeros((n, n), dtype=np.int64)
        for i, a in enumerate(self.cells):
            for j, b in enumerate(self.cells):
                out[i, j] = hex_distance(a, b)
        return out

    def to_spec(self) -> dict:
        if self.radius is not None:
            return {"radius": self.radius}
        return {"cells": [list(c) for c in self.cells]}


def neighbors(cell: GridCell, grid: GridMap) -> list[GridCell]:
    """In-map cube neighbors of ``cell`` sorted by ``(x, y)``."""
    i = grid.index(cell)
    return [grid.cells[j] for j in grid.neighbor_indices(i)]


def map_from_spec(spec) -> GridMap:
    """Build a map from ``{"radius": k}`` or ``{"cells": [[x, y, z], ...]}``."""
    if "radius" in spec:
        return GridMap.hexagon(int(spec["radius"]))
    if "cells" in spec:
        return GridMap.from_cells(GridCell(*c) for c in spec["cells"])
    raise DomainError("map spec needs 'radius' or 'cells'")


@dataclass
class Snapshot:
    """Per-cell market picture for one interval, arrays indexed by ``GridMap.cells``."""

    drivers_accept: np.ndarray
    drivers_reject: np.ndarray
    demand: np.ndarray
    action: np.ndarray
    fulfilled: np.ndarray

    @classmethod
    def empty(cls, n_cells: int) -> "Snapshot":
        return cls(
            drivers_accept=np.zeros(n_cells, dtype=np.int64),
            drivers_reject=np.zeros(n_cells, dtype=np.int64),
            demand=np.zeros((n_cells, N_ORDER_TYPES), dtype=np.int64),
            action=np.zeros(n_cells),
            fulfilled=np.zeros((n_cells, N_ORDER_TYPES), dtype=np.int64),
        )

    def validate(self, n_cells: int) -> None:
        shapes = {
            "drivers_accept": (n_cells,),
            "drivers_reject": (n_cells,),
            "demand": (n_cells, N_ORDER_TYPES),
            "action": (n_cells,),
            "fulfilled": (n_cells, N_ORDER_TYPES),
        }
        for name, shape in shapes.items():
            arr = np.asarray(getattr(self, name))
            if arr.shape != shape:
                raise DomainError(f"snapshot field {name} has shape {arr.shape}, expected {shape}")
            if name == "action":
                if np.any(arr < 0) or np.any(arr > 1):
                    raise DomainError("snapshot action components must lie in [0, 1]")
            elif np.any(arr < 0):
                raise DomainError(f"snapshot field {name} has negative counts")

    def __eq__(self, other):
        if not isinstance(other, Snapshot):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("drivers_accept", "drivers_reject", "demand", "action", "fulfilled")
        )


def _cell_channels(snap: Snapshot, scale: float) -> np.ndarray:
    return np.column_stack(
        [
            np.asarray(snap.drivers_accept, dtype=np.float64) / scale,
            np.asarray(snap.drivers_reject, dtype=np.float64) / scale,
            np.asarray(snap.demand, dtype=np.float64) / scale,
            np.asarray(snap.action, dtype=np.float64),
            np.asarray(snap.fulfilled, dtype=np.float64) / scale,
        ]
    ).T


def encode_snapshot(snap: Snapshot, grid: GridMap, count_scale: float = DEFAULT_COUNT_SCALE) -> np.ndarray:
    """Scatter a snapshot into a ``(9, rows, cols)`` tensor; masked positions stay zero."""
    snap.validate(grid.n_cells)
    out = np.zeros((N_CHANNELS, grid.axial_rows, grid.axial_cols))
    out[:, grid.mask] = _cell_channels(snap, count_scale)
    return out


def decode_snapshot(tensor: np.ndarray, grid: GridMap, count_scale: float = DEFAULT_COUNT_SCALE) -> Snapshot:
    """Inverse of :func:`encode_snapshot`; counts are rounded back to integers."""
    tensor = np.asarray(tensor)
    if tensor.shape != (N_CHANNELS, grid.axial_rows, grid.axial_cols):
        raise DomainError(f"tensor shape {tensor.shape} does not match the map embedding")
    vals = tensor[:, grid.mask]

    def counts(rows):
        return np.rint(vals[rows] * count_scale).astype(np.int64)

    return Snapshot(
        drivers_accept=counts(0),
        drivers_reject=counts(1),
        demand=counts(slice(2, 5)).T.copy(),
        action=vals[5].copy(),
        fulfilled=counts(slice(6, 9)).T.copy(),
    )


def encode_memory(
    history: Sequence[Snapshot],
    grid: GridMap,
    length: int,
    count_scale: float = DEFAULT_COUNT_SCALE,
) -> np.ndarray:
    """Encode the last ``length`` snapshots oldest-first, zero-padding at the front."""
    out = np.zeros((length, N_CHANNELS, grid.axial_rows, grid.axial_cols))
    recent = list(history)[-length:] if length else []
    offset = length - len(recent)
    for k, snap in enumerate(recent):
        out[offset + k] = encode_snapshot(snap, grid, count_scale)
    return out
