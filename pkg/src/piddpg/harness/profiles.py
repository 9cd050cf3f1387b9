"""Scenario profile files and the synthetic profile generator.

A profile is a JSON document with schema ``piddpg.profile/1``::

    {
      "schema": "piddpg.profile/1",
      "map": {"radius": 3} | {"cells": [[x, y, z], ...]},
      "horizon": T,
      "platforms": {"count": M, "controlled": 0, "competitor_ratio": 0.3},
      "supply": [[...T means...], ... M rows],
      "demand": {"means": [T][n][3]} | {"shape": [T][3], "spatial": [n][3]},
      "destinations": "uniform" | {"distance_decay": g} | [[...n...], ... n rows],
      "pricing": {"express_per_hop": 1.0, "discount_ratio": 0.7},
      "encoding": {"count_scale": 10.0}
    }

Factorized demand is ``means[t][i][j] = shape[t][j] * spatial[i][j]``. A
distance-decay destination row is proportional to ``exp(-g * dist)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DomainError
from ..hexgrid import N_ORDER_TYPES, GridMap, map_from_spec
from ..market import ScenarioProfile

PROFILE_SCHEMA = "piddpg.profile/1"
TOP_KEYS = {"schema", "map", "horizon", "platforms", "supply", "demand", "destinations", "pricing", "encoding"}


def distance_decay_destinations(grid: GridMap, decay: float) -> np.ndarray:
    w = np.exp(-float(decay) * grid.distance_matrix())
    return w / w.sum(axis=1, keepdims=True)


def _array(value, path, problems, ndim):
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        problems.append(f"{path}: expected a numeric array")
        return None
    if arr.ndim != ndim:
        problems.append(f"{path}: expected {ndim}-d array, got {arr.ndim}-d")
        return None
    return arr


def profile_from_dict(doc: dict) -> ScenarioProfile:
    """Parse and validate a profile document; every violation is reported at once."""
    problems = []
    if not isinstance(doc, dict):
        raise ConfigError("profile must be a JSON object")
    if doc.get("schema") != PROFILE_SCHEMA:
        problems.append(f"schema: expected {PROFILE_SCHEMA!r}, got {doc.get('schema')!r}")
    for k in sorted(set(doc) - TOP_KEYS):
        problems.append(f"{k}: unknown key")
    for k in ("map", "horizon", "supply", "demand"):
        if k not in doc:
            problems.append(f"{k}: required")
    if problems:
        raise ConfigError("invalid scenario profile", problems)

    try:
        grid = map_from_spec(doc["map"])
    except (DomainError, TypeError, ValueError, KeyError) as exc:
        raise ConfigError("invalid scenario profile", [f"map: {exc}"]) from None
    n = grid.n_cells
    horizon = doc["horizon"]
    if not isinstance(horizon, int) or isinstance(horizon, bool) or horizon < 1:
        raise ConfigError("invalid scenario profile", [f"horizon: must be a positive integer, got {horizon!r}"])

    plat = doc.get("platforms", {})
    supply = _array(doc["supply"], "supply", problems, 2)
    if supply is not None and "count" in plat and supply.shape[0] != plat["count"]:
        problems.append(f"platforms.count: {plat['count']} does not match {supply.shape[0]} supply rows")

    dem = doc["demand"]
    demand = None
    if isinstance(dem, dict) and "means" in dem:
        demand = _array(dem["means"], "demand.means", problems, 3)
    elif isinstance(dem, dict) and {"shape", "spatial"} <= set(dem):
        shape = _array(dem["shape"], "demand.shape", problems, 2)
        spatial = _array(dem["spatial"], "demand.spatial", problems, 2)
        if shape is not None and spatial is not None:
            if shape.shape != (horizon, N_ORDER_TYPES):
                problems.append(f"demand.shape: expected ({horizon}, {N_ORDER_TYPES}), got {shape.shape}")
            elif spatial.shape != (n, N_ORDER_TYPES):
                problems.append(f"demand.spatial: expected ({n}, {N_ORDER_TYPES}), got {spatial.shape}")
            else:
                demand = shape[:, None, :] * spatial[None, :, :]
    else:
        problems.append("demand: expected {'means': ...} or {'shape': ..., 'spatial': ...}")

    dest_doc = doc.get("destinations", "uniform")
    dest = None
    if dest_doc == "uniform":
        dest = np.full((n, n), 1.0 / n)
    elif isinstance(dest_doc, dict) and "distance_decay" in dest_doc:
        dest = distance_decay_destinations(grid, dest_doc["distance_decay"])
    else:
        dest = _array(dest_doc, "destinations", problems, 2)

    pricing = doc.get("pricing", {})
    encoding = doc.get("encoding", {})
    if problems:
        raise ConfigError("invalid scenario profile", problems)
    profile = ScenarioProfile(
        grid=grid,
        horizon=horizon,
        supply_means=supply,
        demand_means=demand,
        destinations=dest,
        competitor_ratio=float(plat.get("competitor_ratio", 0.3)),
        controlled_platform=int(plat.get("controlled", 0)),
        express_fee_per_hop=float(pricing.get("express_per_hop", 1.0)),
        discount_ratio=float(pricing.get("discount_ratio", 0.7)),
        count_scale=float(encoding.get("count_scale", 10.0)),
    )
    return profile.validate()


def profile_to_dict(profile: ScenarioProfile) -> dict:
    """Fully expanded document; floats survive the JSON round trip exactly."""
    return {
        "schema": PROFILE_SCHEMA,
        "map": profile.grid.to_spec(),
        "horizon": int(profile.horizon),
        "platforms": {
            "count": profile.n_platforms,
            "controlled": int(profile.controlled_platform),
            "competitor_ratio": float(profile.competitor_ratio),
        },
        "supply": profile.supply_means.tolist(),
        "demand": {"means": profile.demand_means.tolist()},
        "destinations": profile.destinations.tolist(),
        "pricing": {
            "express_per_hop": float(profile.express_fee_per_hop),
            "discount_ratio": float(profile.discount_ratio),
        },
        "encoding": {"count_scale": float(profile.count_scale)},
    }


def dumps_profile(profile: ScenarioProfile) -> str:
    return json.dumps(profile_to_dict(profile), sort_keys=True, separators=(",", ":"))


def profile_digest(profile: ScenarioProfile) -> str:
    return hashlib.sha256(dumps_profile(profile).encode()).hexdigest()


def load_profile(path) -> ScenarioProfile:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"profile file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"profile {path} is not valid JSON", [f"line {exc.lineno}: {exc.msg}"]) from None
    return profile_from_dict(doc)


def save_profile(profile: ScenarioProfile, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_profile(profile) + "\n")
    return path


@dataclass
class SynthSpec:
    """Knobs of the synthetic day. All magnitudes are free parameters.

    Demand per interval follows two Gaussian peaks over a base level. Each cell
    gets a random type tilt ``u`` in ``[-1, 1]`` that moves mass between Type 1
    (``u > 0``) and Type 3 (``u < 0``) by ``type_contrast``. On top of the
    static tilt, the mix swings over the day with amplitude ``type_drift``; the
    swing has one random phase for the whole map, jittered per cell by up to
    ``phase_spread`` of a full cycle.
    """

    radius: int = 3
    horizon: int = 96
    platforms: int = 5
    supply_scales: tuple = (1.0, 0.9, 0.8, 0.6, 0.2)
    supply_per_cell: float = 1.0
    supply_amplitude: float = 0.3
    demand_per_cell: float = 3.0
    amplitude: float = 1.0
    peaks: tuple = (0.33, 0.75)
    peak_width: float = 0.07
    base_level: float = 0.35
    type_shares: tuple = (0.45, 0.1, 0.45)
    type_contrast: float = 1.0
    spatial_tilt: float = 0.3
    type_drift: float = 1.5
    phase_spread: float = 0.0
    spatial_spread: float = 0.4
    distance_decay: float = 1.5
    competitor_ratio: float = 0.3
    controlled: int = 0
    count_scale: float = 10.0

    def __post_init__(self):
        self.supply_scales = tuple(float(x) for x in self.supply_scales)
        self.peaks = tuple(float(x) for x in self.peaks)
        self.type_shares = tuple(float(x) for x in self.type_shares)
        problems = []
        if self.radius < 0 or self.horizon < 1 or self.platforms < 1:
            problems.append("radius >= 0, horizon >= 1 and platforms >= 1 are required")
        if len(self.supply_scales) < self.platforms:
            problems.append(f"supply_scales: need {self.platforms} entries, got {len(self.supply_scales)}")
        if len(self.type_shares) != N_ORDER_TYPES or min(self.type_shares) < 0 or sum(self.type_shares) <= 0:
            problems.append("type_shares: need 3 non-negative entries with a positive sum")
        for name in ("supply_per_cell", "demand_per_cell", "amplitude", "base_level", "peak_width", "spatial_spread"):
            if getattr(self, name) < 0:
                problems.append(f"{name}: must be >= 0")
        if not 0 <= self.type_contrast <= 1 or self.type_drift < 0:
            problems.append("type_contrast must lie in [0, 1] and type_drift be >= 0")
        if problems:
            raise ConfigError("invalid synthetic profile spec", problems)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("unknown synthetic spec keys", [f"{k}: not recognized" for k in unknown])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("supply_scales", "peaks", "type_shares"):
            d[k] = list(d[k])
        return d


# radius-2 map, 24 intervals, 2 platforms: the scale used by the desk learning checks
DESK_SPEC = {"radius": 2, "horizon": 24, "platforms": 2, "supply_scales": [1.0, 1.0]}


def daily_curve(horizon: int, peaks, width: float, base: float) -> np.ndarray:
    """Base level plus unit-height Gaussian bumps at fractional times ``peaks``."""
    x = (np.arange(horizon) + 0.5) / horizon
    curve = np.full(horizon, float(base))
    for p in peaks:
        d = np.abs(x - p)
        d = np.minimum(d, 1.0 - d)
        curve += np.exp(-0.5 * (d / max(width, 1e-9)) ** 2)
    return curve


def synth_profile(spec: SynthSpec | dict | None = None, seed: int = 0) -> ScenarioProfile:
    if spec is None:
        spec = SynthSpec()
    elif isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    rng = np.random.default_rng(seed)
    grid = GridMap.hexagon(spec.radius)
    n, T = grid.n_cells, spec.horizon

    curve = daily_curve(T, spec.peaks, spec.peak_width, spec.base_level)
    curve = curve / curve.max()
    weight = rng.lognormal(0.0, spec.spatial_spread, size=n) if spec.spatial_spread > 0 else np.ones(n)
    weight = weight / weight.mean()
    tilt = rng.uniform(-1.0, 1.0, size=n)
    phase = rng.uniform(0.0, 2 * np.pi) + 2 * np.pi * spec.phase_spread * rng.uniform(-0.5, 0.5, size=n)

    shares = np.asarray(spec.type_shares) / sum(spec.type_shares)
    flex = shares[0] + shares[2]
    hours = 2 * np.pi * np.arange(T) / T
    u = np.clip(spec.spatial_tilt * tilt[None, :] + spec.type_drift * np.sin(hours[:, None] + phase[None, :]), -1.0, 1.0)
    mix = np.empty((T, n, N_ORDER_TYPES))
    mix[..., 0] = flex * (1 + spec.type_contrast * u) / 2
    mix[..., 1] = shares[1]
    mix[..., 2] = flex * (1 - spec.type_contrast * u) / 2
    level = spec.amplitude * spec.demand_per_cell * curve
    demand = level[:, None, None] * weight[None, :, None] * mix

    supply_curve = 1.0 + spec.supply_amplitude * (curve - curve.mean())
    scales = np.asarray(spec.supply_scales[: spec.platforms])
    supply = scales[:, None] * spec.supply_per_cell * n * supply_curve[None, :]

    return ScenarioProfile(
        grid=grid,
        horizon=T,
        supply_means=supply,
        demand_means=demand,
        destinations=distance_decay_destinations(grid, spec.distance_decay),
        competitor_ratio=spec.competitor_ratio,
        controlled_platform=spec.controlled,
        count_scale=spec.count_scale,
    ).validate()


def desk_profile(seed: int = 0, **overrides) -> ScenarioProfile:
    return synth_profile({**DESK_SPEC, **overrides}, seed)
