"""Synthetic benchmark data: jittered grid networks and noisy GPS walks.

Everything is a pure function of (config, car index): node jitter, one-way
selection, speed limits, the route walk, per-edge travel speeds, position
noise, and heading corruption all come from seeded numpy generators, so
identical configs reproduce identical files byte for byte.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .geometry import GeoPoint, PlanePoint, Projection, from_plane, signed_heading_change
from .road_network import (
    EDGES_HEADER,
    NODES_HEADER,
    RoadEdge,
    RoadNetwork,
    load_network,
)
from .trajectory_io import GroundTruth, Observation, Trajectory

BASE_TIMESTAMP = 1270080000  # 2010-04-01 00:00:00 UTC
GEN_ORIGIN = GeoPoint(121.4, 31.2)


@dataclass(frozen=True)
class GenConfig:
    rows: int = 10
    cols: int = 10
    spacing_m: float = 200.0
    jitter_m: float = 20.0
    oneway_fraction: float = 0.1
    speed_choices_kmh: tuple[float, ...] = (30.0, 50.0, 80.0)
    noise_sigma_m: float = 15.0
    native_interval_s: int = 10
    heading_noise_deg: float = 10.0
    low_speed_fraction: float = 0.1
    low_speed_kmh: float = 7.2
    straight_bias: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError("grid must be at least 2x2")
        if min(self.spacing_m, self.native_interval_s) <= 0:
            raise ValueError("spacing and interval must be positive")
        if min(
            self.jitter_m,
            self.noise_sigma_m,
            self.heading_noise_deg,
            self.low_speed_kmh,
        ) < 0:
            raise ValueError("noise magnitudes must be >= 0")
        for frac in (self.oneway_fraction, self.low_speed_fraction, self.straight_bias):
            if not (0.0 <= frac <= 1.0):
                raise ValueError("fractions must lie in [0, 1]")
        if not self.speed_choices_kmh or min(self.speed_choices_kmh) <= 0:
            raise ValueError("speed choices must be positive")


def _render_network_rows(cfg: GenConfig) -> tuple[str, str]:
    """Deterministic node/edge CSV contents for the jittered grid."""
    rng = np.random.default_rng(cfg.seed)
    proj = Projection(GEN_ORIGIN)

    def node_id(r: int, c: int) -> int:
        return r * cfg.cols + c + 1

    positions: dict[int, GeoPoint] = {}
    node_lines = io.StringIO()
    node_lines.write(",".join(NODES_HEADER) + "\n")
    for r in range(cfg.rows):
        for c in range(cfg.cols):
            x = c * cfg.spacing_m + rng.uniform(-cfg.jitter_m, cfg.jitter_m)
            y = r * cfg.spacing_m + rng.uniform(-cfg.jitter_m, cfg.jitter_m)
            geo = from_plane(PlanePoint(x, y), proj)
            positions[node_id(r, c)] = geo
            node_lines.write(f"{node_id(r, c)},{repr(geo.lon)},{repr(geo.lat)}\n")

    edge_lines = io.StringIO()
    edge_lines.write(",".join(EDGES_HEADER) + "\n")
    eid = 1
    for r in range(cfg.rows):
        for c in range(cfg.cols):
            for dr, dc in ((0, 1), (1, 0)):
                nr, nc = r + dr, c + dc
                if nr >= cfg.rows or nc >= cfg.cols:
                    continue
                a, b = node_id(r, c), node_id(nr, nc)
                oneway = rng.random() < cfg.oneway_fraction
                if oneway and rng.random() < 0.5:
                    a, b = b, a
                speed = float(cfg.speed_choices_kmh[rng.integers(len(cfg.speed_choices_kmh))])
                ga, gb = positions[a], positions[b]
                geom = f"{repr(ga.lon)} {repr(ga.lat)};{repr(gb.lon)} {repr(gb.lat)}"
                edge_lines.write(f"{eid},{a},{b},{repr(speed)},{int(oneway)},{geom}\n")
                eid += 1
    return node_lines.getvalue(), edge_lines.getvalue()


def gen_network(cfg: GenConfig, nodes_path=None, edges_path=None) -> RoadNetwork:
    """Build (and optionally write) a rows x cols jittered grid network."""
    nodes_text, edges_text = _render_network_rows(cfg)
    if nodes_path is not None:
        with open(nodes_path, "w", encoding="utf-8") as fh:
            fh.write(nodes_text)
    if edges_path is not None:
        with open(edges_path, "w", encoding="utf-8") as fh:
            fh.write(edges_text)
    return load_network(nodes_text.splitlines(), edges_text.splitlines())


def _random_walk(
    net: RoadNetwork, rng: np.random.Generator, start_node: int, route_len_edges: int, straight_bias: float
) -> list[RoadEdge]:
    """Directed walk without immediate reversal, biased toward going straight."""
    route: list[RoadEdge] = []
    node = start_node
    prev: RoadEdge | None = None
    while len(route) < route_len_edges:
        out = net.adjacency.get(node, ())
        if prev is not None:
            allowed = [e for e in out if not net.is_reverse_pair(prev.id, e.id)]
        else:
            allowed = list(out)
        if not allowed:
            break
        pool = allowed
        if prev is not None:
            straight = [
                e
                for e in allowed
                if abs(signed_heading_change(prev.last_bearing, e.first_bearing)) < 30.0
            ]
            if straight and rng.random() < straight_bias:
                pool = straight
        edge = pool[rng.integers(len(pool))]
        route.append(edge)
        prev = edge
        node = edge.to_node
    return route


def gen_trajectory(
    net: RoadNetwork, cfg: GenConfig, route_len_edges: int, car_id: int = 1
) -> tuple[Trajectory, GroundTruth, int]:
    """One noisy trajectory with its ground truth.

    Returns (trajectory, truth, route_edge_count); the count is below
    route_len_edges when the walk hit a dead end early.
    """
    if route_len_edges < 1:
        raise ValueError("route_len_edges must be >= 1")
    rng = np.random.default_rng([cfg.seed, car_id])
    node_ids = sorted(net.nodes)
    route: list[RoadEdge] = []
    for _ in range(50):
        start = node_ids[rng.integers(len(node_ids))]
        route = _random_walk(net, rng, start, route_len_edges, cfg.straight_bias)
        if route:
            break
    if not route:
        raise RuntimeError("could not start a walk anywhere on the network")

    speeds_kmh = [float(rng.uniform(0.5, 1.0) * e.speed_limit_kmh) for e in route]
    durations = [e.length_m / (v / 3.6) for e, v in zip(route, speeds_kmh)]
    ends = np.cumsum(durations)
    total = float(ends[-1])
    n_fix = int(total // cfg.native_interval_s) + 1

    observations = []
    point_labels = []
    fix_edge_idx = []
    for k in range(n_fix):
        t = k * cfg.native_interval_s
        idx = min(int(np.searchsorted(ends, t, side="right")), len(route) - 1)
        edge = route[idx]
        t0 = float(ends[idx] - durations[idx])
        offset = min((t - t0) * speeds_kmh[idx] / 3.6, edge.length_m)
        pos = edge.point_at(offset)
        motion_bearing = edge.bearing_at(min(offset, edge.length_m - 1e-9))
        dx = rng.normal(0.0, cfg.noise_sigma_m)
        dy = rng.normal(0.0, cfg.noise_sigma_m)
        if rng.random() < cfg.low_speed_fraction:
            speed = float(rng.uniform(0.0, cfg.low_speed_kmh))
            direction = int(rng.uniform(0.0, 360.0)) % 360
        else:
            speed = speeds_kmh[idx]
            direction = int(round(motion_bearing + rng.normal(0.0, cfg.heading_noise_deg))) % 360
        geo = from_plane(PlanePoint(pos.x + dx, pos.y + dy), net.projection)
        observations.append(
            Observation(
                car_id=car_id,
                pos=geo,
                speed_kmh=speed,
                direction=direction,
                occupied=True,
                timestamp=BASE_TIMESTAMP + k * cfg.native_interval_s,
            )
        )
        point_labels.append(edge.id)
        fix_edge_idx.append(idx)

    gaps = []
    for a, b in zip(fix_edge_idx, fix_edge_idx[1:]):
        gaps.append(tuple(route[i].id for i in range(a, b + 1)))
    truth = GroundTruth(tuple(point_labels), tuple(gaps))
    return Trajectory(car_id, tuple(observations)), truth, len(route)


def gen_dataset(
    net: RoadNetwork, cfg: GenConfig, n_traj: int, route_len_edges: int
) -> tuple[list[Trajectory], dict[int, GroundTruth]]:
    """Trajectories for car ids 1..n_traj, each from its own sub-stream."""
    trajs = []
    truths: dict[int, GroundTruth] = {}
    for car_id in range(1, n_traj + 1):
        traj, truth, _ = gen_trajectory(net, cfg, route_len_edges, car_id)
        trajs.append(traj)
        truths[car_id] = truth
    return trajs, truths
