"""Candidate lattice: alternating point layers and path layers over a trajectory.

For N surviving observations the lattice has N point layers (road-state
candidates) and N-1 path layers (feasible routes per candidate pair), i.e.
2N-1 label variables. Construction guarantees at least one compatible full
assignment per lattice piece; where that is impossible the trajectory splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .geometry import distance, to_plane
from .road_network import Path, RoadNetwork, RoadState, feasible_paths, nearest_road_states
from .trajectory_io import GroundTruth, Observation, Trajectory

LATTICE_DUMP_VERSION = 1

PairKey = tuple[int, int]


@dataclass(frozen=True)
class LatticeConfig:
    radius_m: float = 50.0
    radius_max_m: float = 200.0
    max_candidates_k: int = 5
    paths_per_pair_k: int = 3
    length_cap_factor: float = 2.0
    length_cap_floor_m: float = 500.0
    speed_cap_kmh: float = 180.0

    def __post_init__(self):
        if min(
            self.radius_m,
            self.radius_max_m,
            self.max_candidates_k,
            self.paths_per_pair_k,
            self.length_cap_factor,
            self.length_cap_floor_m,
            self.speed_cap_kmh,
        ) <= 0:
            raise ValueError("lattice config values must be positive")
        if self.radius_max_m < self.radius_m:
            raise ValueError("radius_max_m must be >= radius_m")

    def length_cap(self, straight_m: float, dt_s: float) -> float:
        cap = max(self.length_cap_factor * straight_m, self.length_cap_floor_m)
        return min(cap, self.speed_cap_kmh / 3.6 * dt_s)


@dataclass(frozen=True, eq=False)
class Lattice:
    """One chain piece: point layers, path layers, and provenance indices.

    ``obs_indices[t]`` is the position of point layer t's observation in the
    source trajectory; ``dropped_observations`` lists source indices removed
    during construction (shared by all pieces of one build).
    """

    car_id: int
    observations: tuple[Observation, ...]
    obs_indices: tuple[int, ...]
    point_layers: tuple[tuple[RoadState, ...], ...]
    path_layers: tuple[dict[PairKey, tuple[Path, ...]], ...]
    dropped_observations: tuple[int, ...]

    @property
    def n_layers(self) -> int:
        return 2 * len(self.point_layers) - 1


@dataclass(frozen=True, eq=False)
class LabeledLattice:
    """A lattice plus ground-truth indices into its candidate sets.

    ``point_label_idx[t]`` is the candidate index of the true edge at layer t
    (None when the truth was eliminated by the caps). ``path_label[t]`` is
    ((i, j), path index) for the true gap route, or None. ``missing_label``
    is set when any layer lacks its truth.
    """

    lattice: Lattice
    point_label_idx: tuple[int | None, ...]
    path_label: tuple[tuple[PairKey, int] | None, ...]
    missing_label: bool
    true_point_edges: tuple[int, ...]
    true_gap_paths: tuple[tuple[int, ...], ...]


def _candidates_with_escalation(
    net: RoadNetwork, obs: Observation, cfg: LatticeConfig
) -> tuple[RoadState, ...]:
    p = to_plane(obs.pos, net.projection)
    radius = cfg.radius_m
    while True:
        states = nearest_road_states(net, p, radius, cfg.max_candidates_k)
        if states or radius >= cfg.radius_max_m:
            return tuple(states)
        radius = min(2.0 * radius, cfg.radius_max_m)


def _gap_paths(
    net: RoadNetwork,
    layer_a: tuple[RoadState, ...],
    layer_b: tuple[RoadState, ...],
    obs_a: Observation,
    obs_b: Observation,
    cfg: LatticeConfig,
) -> dict[PairKey, tuple[Path, ...]]:
    pa = to_plane(obs_a.pos, net.projection)
    pb = to_plane(obs_b.pos, net.projection)
    cap = cfg.length_cap(distance(pa, pb), obs_b.timestamp - obs_a.timestamp)
    out: dict[PairKey, tuple[Path, ...]] = {}
    for i, sa in enumerate(layer_a):
        for j, sb in enumerate(layer_b):
            paths = feasible_paths(net, sa, sb, cfg.paths_per_pair_k, cap)
            if paths:
                out[(i, j)] = tuple(paths)
    return out


def build_lattice(traj: Trajectory, net: RoadNetwork, cfg: LatticeConfig) -> list[Lattice]:
    """Construct lattice pieces for one trajectory.

    Per observation: candidates within radius_m, doubling the radius up to
    radius_max_m while empty; still-empty observations are dropped. Per gap:
    feasible paths per candidate pair under the length cap. The chain splits
    at a gap through which no compatible assignment can pass, so every piece
    admits at least one full assignment.
    """
    survivors: list[tuple[int, Observation, tuple[RoadState, ...]]] = []
    dropped: list[int] = []
    for idx, obs in enumerate(traj.observations):
        cands = _candidates_with_escalation(net, obs, cfg)
        if cands:
            survivors.append((idx, obs, cands))
        else:
            dropped.append(idx)

    pieces: list[Lattice] = []
    if not survivors:
        return pieces

    dropped_t = tuple(dropped)

    def close_piece(start: int, stop: int, path_layers: list[dict]) -> None:
        chunk = survivors[start:stop]
        pieces.append(
            Lattice(
                car_id=traj.car_id,
                observations=tuple(obs for _, obs, _ in chunk),
                obs_indices=tuple(idx for idx, _, _ in chunk),
                point_layers=tuple(cands for _, _, cands in chunk),
                path_layers=tuple(path_layers),
                dropped_observations=dropped_t,
            )
        )

    piece_start = 0
    path_layers: list[dict[PairKey, tuple[Path, ...]]] = []
    reachable = set(range(len(survivors[0][2])))
    for t in range(len(survivors) - 1):
        _, obs_a, layer_a = survivors[t]
        _, obs_b, layer_b = survivors[t + 1]
        gap = _gap_paths(net, layer_a, layer_b, obs_a, obs_b, cfg)
        reach_next = {j for (i, j) in gap if i in reachable}
        if reach_next:
            path_layers.append(gap)
            reachable = reach_next
        else:
            close_piece(piece_start, t + 1, path_layers)
            piece_start = t + 1
            path_layers = []
            reachable = set(range(len(layer_b)))
    close_piece(piece_start, len(survivors), path_layers)
    return pieces


def _joined_gap(truth: GroundTruth, a: int, b: int) -> tuple[int, ...]:
    """True edge sequence across source gaps a..b-1 (b > a), boundaries merged."""
    merged = list(truth.gap_paths[a])
    for t in range(a + 1, b):
        merged.extend(truth.gap_paths[t][1:])
    return tuple(merged)


def label_lattice(lattice: Lattice, truth: GroundTruth) -> LabeledLattice:
    """Locate the ground truth inside the candidate sets.

    The truth must describe the lattice's source trajectory. Layers whose
    truth was eliminated (edge beyond the search radius, route not among the
    enumerated paths) yield None and set ``missing_label``.
    """
    if len(truth.point_labels) <= max(lattice.obs_indices):
        raise ValueError("ground truth shorter than the lattice's source trajectory")
    point_idx: list[int | None] = []
    true_edges: list[int] = []
    for t, layer in enumerate(lattice.point_layers):
        true_edge = truth.point_labels[lattice.obs_indices[t]]
        true_edges.append(true_edge)
        found = None
        for c, state in enumerate(layer):
            if state.edge_id == true_edge:
                found = c
                break
        point_idx.append(found)
    path_label: list[tuple[PairKey, int] | None] = []
    true_gaps: list[tuple[int, ...]] = []
    for t in range(len(lattice.point_layers) - 1):
        a, b = lattice.obs_indices[t], lattice.obs_indices[t + 1]
        true_seq = _joined_gap(truth, a, b)
        true_gaps.append(true_seq)
        i, j = point_idx[t], point_idx[t + 1]
        found_path = None
        if i is not None and j is not None:
            for p, path in enumerate(lattice.path_layers[t].get((i, j), ())):
                if path.edge_ids == true_seq:
                    found_path = ((i, j), p)
                    break
        path_label.append(found_path)
    missing = any(v is None for v in point_idx) or any(v is None for v in path_label)
    return LabeledLattice(
        lattice=lattice,
        point_label_idx=tuple(point_idx),
        path_label=tuple(path_label),
        missing_label=missing,
        true_point_edges=tuple(true_edges),
        true_gap_paths=tuple(true_gaps),
    )


def dump_lattice(lattice: Lattice) -> str:
    """Versioned JSON rendering for debugging and byte-level comparisons."""
    doc = {
        "version": LATTICE_DUMP_VERSION,
        "car_id": lattice.car_id,
        "obs_indices": list(lattice.obs_indices),
        "dropped_observations": list(lattice.dropped_observations),
        "point_layers": [
            [
                {
                    "edge_id": s.edge_id,
                    "offset_m": s.offset_m,
                    "dist_m": s.dist_m,
                    "road_bearing": s.road_bearing,
                }
                for s in layer
            ]
            for layer in lattice.point_layers
        ],
        "path_layers": [
            {
                f"{i},{j}": [list(p.edge_ids) for p in paths]
                for (i, j), paths in sorted(layer.items())
            }
            for layer in lattice.path_layers
        ],
    }
    return json.dumps(doc, sort_keys=True)
