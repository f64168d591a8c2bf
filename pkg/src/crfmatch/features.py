"""Point and path feature functions, named catalogs, and min-max scaling.

Point features score how well one road state explains one observation; path
features score a candidate route between two consecutive observations. Weight
vectors index features by catalog position, so catalog order is frozen.

Heading is unreliable at low GPS speed: when speed <= v_min the bearing term
is replaced by the constant val_0 for every candidate of that layer, which
leaves the layer's argmax unaffected by the choice of val_0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import bearing_diff, to_plane
from .road_network import Path, RoadNetwork, RoadState, count_turns
from .trajectory_io import Observation

FeatureVector = np.ndarray

BIAS_FEATURES = frozenset({"point_bias", "path_bias"})


@dataclass(frozen=True)
class FilterConfig:
    v_min_kmh: float = 7.2
    val_0: float = 0.0

    def __post_init__(self):
        if self.v_min_kmh < 0:
            raise ValueError("v_min_kmh must be >= 0")


# ---------------------------------------------------------------------------
# feature functions

def _f_distance_error(obs: Observation, state: RoadState, cfg: FilterConfig) -> float:
    return state.dist_m


def _f_bearing_error_filtered(obs: Observation, state: RoadState, cfg: FilterConfig) -> float:
    if obs.speed_kmh > cfg.v_min_kmh:
        return bearing_diff(float(obs.direction), state.road_bearing)
    return cfg.val_0


def _f_log_distance(obs: Observation, state: RoadState, cfg: FilterConfig) -> float:
    return math.log1p(state.dist_m)


def _f_point_bias(obs: Observation, state: RoadState, cfg: FilterConfig) -> float:
    return 1.0


POINT_FEATURES = {
    "distance_error": _f_distance_error,
    "bearing_error_filtered": _f_bearing_error_filtered,
    "log_distance": _f_log_distance,
    "point_bias": _f_point_bias,
}


def _traversed_lengths(path: Path, net: RoadNetwork) -> list[float]:
    edges = [net.edges[eid] for eid in path.edge_ids]
    if len(edges) == 1:
        return [max(0.0, path.end_offset_m - path.start_offset_m)]
    lengths = [edges[0].length_m - path.start_offset_m]
    lengths.extend(e.length_m for e in edges[1:-1])
    lengths.append(path.end_offset_m)
    return lengths


def _g_length(path, obs_a, obs_b, net) -> float:
    return path.length_m


def _g_avg_speed_limit(path, obs_a, obs_b, net) -> float:
    limits = [net.edges[eid].speed_limit_kmh for eid in path.edge_ids]
    return sum(limits) / len(limits)


def _g_travel_time_s(path, obs_a, obs_b, net) -> float:
    total = 0.0
    for eid, length in zip(path.edge_ids, _traversed_lengths(path, net)):
        total += 3.6 * length / net.edges[eid].speed_limit_kmh
    return total


def _g_length_ratio(path, obs_a, obs_b, net) -> float:
    pa = to_plane(obs_a.pos, net.projection)
    pb = to_plane(obs_b.pos, net.projection)
    straight = math.hypot(pb.x - pa.x, pb.y - pa.y)
    return path.length_m / max(1.0, straight)


def _g_implied_speed_gap(path, obs_a, obs_b, net) -> float:
    dt = obs_b.timestamp - obs_a.timestamp
    implied = path.length_m / dt
    return abs(implied - _g_avg_speed_limit(path, obs_a, obs_b, net) / 3.6)


def _g_left_turns(path, obs_a, obs_b, net) -> float:
    return float(count_turns(net, path)[0])


def _g_right_turns(path, obs_a, obs_b, net) -> float:
    return float(count_turns(net, path)[1])


def _g_u_turns(path, obs_a, obs_b, net) -> float:
    return float(count_turns(net, path)[2])


def _g_path_bias(path, obs_a, obs_b, net) -> float:
    return 1.0


PATH_FEATURES = {
    "length": _g_length,
    "avg_speed_limit": _g_avg_speed_limit,
    "travel_time_s": _g_travel_time_s,
    "length_ratio": _g_length_ratio,
    "implied_speed_gap": _g_implied_speed_gap,
    "left_turns": _g_left_turns,
    "right_turns": _g_right_turns,
    "u_turns": _g_u_turns,
    "path_bias": _g_path_bias,
}


# ---------------------------------------------------------------------------
# catalogs

@dataclass(frozen=True)
class FeatureCatalog:
    point_names: tuple[str, ...]
    path_names: tuple[str, ...]
    filter_cfg: FilterConfig = field(default_factory=FilterConfig)

    def __post_init__(self):
        names = list(self.point_names) + list(self.path_names)
        if len(set(self.point_names)) != len(self.point_names) or len(
            set(self.path_names)
        ) != len(self.path_names):
            raise ValueError("catalog feature names must be unique per section")
        for name in self.point_names:
            if name not in POINT_FEATURES:
                raise ValueError(f"unknown point feature {name!r}")
        for name in self.path_names:
            if name not in PATH_FEATURES:
                raise ValueError(f"unknown path feature {name!r}")
        if not names:
            raise ValueError("catalog is empty")

    @property
    def n_point(self) -> int:
        return len(self.point_names)

    @property
    def n_path(self) -> int:
        return len(self.path_names)


def default_catalog(filter_cfg: FilterConfig | None = None) -> FeatureCatalog:
    return FeatureCatalog(
        point_names=("distance_error", "bearing_error_filtered", "log_distance", "point_bias"),
        path_names=(
            "length",
            "avg_speed_limit",
            "travel_time_s",
            "length_ratio",
            "implied_speed_gap",
            "left_turns",
            "right_turns",
            "u_turns",
            "path_bias",
        ),
        filter_cfg=filter_cfg or FilterConfig(),
    )


def base_simple_catalog(filter_cfg: FilterConfig | None = None) -> FeatureCatalog:
    """Minimal two-feature baseline: one feature per node type."""
    return FeatureCatalog(
        point_names=("distance_error",),
        path_names=("length",),
        filter_cfg=filter_cfg or FilterConfig(),
    )


def base_complex_catalog(filter_cfg: FilterConfig | None = None) -> FeatureCatalog:
    """Eight-feature baseline: geometry plus speed and turn counts."""
    return FeatureCatalog(
        point_names=("distance_error", "bearing_error_filtered", "point_bias"),
        path_names=("length", "avg_speed_limit", "travel_time_s", "left_turns", "right_turns"),
        filter_cfg=filter_cfg or FilterConfig(),
    )


CATALOGS = {
    "default": default_catalog,
    "base_simple": base_simple_catalog,
    "base_complex": base_complex_catalog,
}


def point_features(obs: Observation, state: RoadState, catalog: FeatureCatalog) -> FeatureVector:
    cfg = catalog.filter_cfg
    return np.array(
        [POINT_FEATURES[name](obs, state, cfg) for name in catalog.point_names], dtype=float
    )


def path_features(
    path: Path, obs_a: Observation, obs_b: Observation, net: RoadNetwork, catalog: FeatureCatalog
) -> FeatureVector:
    if obs_b.timestamp - obs_a.timestamp <= 0:
        raise ValueError("observation interval must be positive")
    return np.array(
        [PATH_FEATURES[name](path, obs_a, obs_b, net) for name in catalog.path_names], dtype=float
    )


# ---------------------------------------------------------------------------
# scaling

@dataclass(frozen=True)
class Scaler:
    """Per-feature training min/max; bias features pass through unscaled."""

    point_min: np.ndarray
    point_max: np.ndarray
    path_min: np.ndarray
    path_max: np.ndarray
    point_bias_mask: np.ndarray
    path_bias_mask: np.ndarray

    def scale_points(self, matrix: np.ndarray) -> np.ndarray:
        return _scale(matrix, self.point_min, self.point_max, self.point_bias_mask)

    def scale_paths(self, matrix: np.ndarray) -> np.ndarray:
        return _scale(matrix, self.path_min, self.path_max, self.path_bias_mask)


def _scale(matrix: np.ndarray, lo: np.ndarray, hi: np.ndarray, bias_mask: np.ndarray) -> np.ndarray:
    matrix = np.asarray(matrix, dtype=float)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    # near-zero spans can overflow to inf; the clip lands on the boundary
    with np.errstate(over="ignore"):
        out = np.clip((matrix - lo) / safe, 0.0, 1.0)
    out[..., span == 0] = 0.0
    out[..., bias_mask] = matrix[..., bias_mask]
    return out


def fit_scaler(
    point_matrix: np.ndarray, path_matrix: np.ndarray, catalog: FeatureCatalog
) -> Scaler:
    """Record per-feature min/max over the training matrices, per section."""
    point_matrix = np.asarray(point_matrix, dtype=float).reshape(-1, catalog.n_point)
    path_matrix = np.asarray(path_matrix, dtype=float).reshape(-1, catalog.n_path)
    if point_matrix.shape[0] == 0 or path_matrix.shape[0] == 0:
        raise ValueError("cannot fit scaler on an empty training set")
    return Scaler(
        point_min=point_matrix.min(axis=0),
        point_max=point_matrix.max(axis=0),
        path_min=path_matrix.min(axis=0),
        path_max=path_matrix.max(axis=0),
        point_bias_mask=np.array([n in BIAS_FEATURES for n in catalog.point_names]),
        path_bias_mask=np.array([n in BIAS_FEATURES for n in catalog.path_names]),
    )


def apply_scaler(scaler: Scaler, vector: FeatureVector, kind: str) -> FeatureVector:
    """Scale one vector; ``kind`` is 'point' or 'path'."""
    if kind == "point":
        return scaler.scale_points(vector.reshape(1, -1))[0]
    if kind == "path":
        return scaler.scale_paths(vector.reshape(1, -1))[0]
    raise ValueError("kind must be 'point' or 'path'")
