"""Shared fixtures: tiny hand-built networks and synthetic CRF lattices.

The synthetic lattice builder produces FeaturizedLattice objects directly
(random feature matrices, random sparsity in the pair maps) so inference can
be checked against exhaustive enumeration without any geometry in the way.
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from crfmatch.crf_engine import Assignment, CrfModel, FeaturizedLattice
from crfmatch.features import FeatureCatalog, FilterConfig, Scaler
from crfmatch.geometry import GeoPoint, PlanePoint
from crfmatch.lattice import LabeledLattice, Lattice
from crfmatch.road_network import RoadNetwork, RoadState, load_network
from crfmatch.synthgen import GEN_ORIGIN
from crfmatch.trajectory_io import Observation


def network_from_rows(node_rows, edge_rows) -> RoadNetwork:
    """Build a network from (id, lon, lat) and (id, a, b, speed, oneway, geom) rows."""
    nodes = ["node_id,lon,lat"]
    nodes += [f"{nid},{lon!r},{lat!r}" for nid, lon, lat in node_rows]
    edges = ["edge_id,from_node,to_node,speed_limit_kmh,oneway,geometry"]
    for eid, a, b, speed, oneway, geom in edge_rows:
        edges.append(f"{eid},{a},{b},{speed!r},{oneway},{geom}")
    return load_network(nodes, edges)


def geo_at(x_m: float, y_m: float) -> GeoPoint:
    """Geographic point at the given plane offset from the generator origin."""
    from crfmatch.geometry import Projection, from_plane

    return from_plane(PlanePoint(x_m, y_m), Projection(GEN_ORIGIN))


def grid_node_rows(rows: int, cols: int, spacing: float = 200.0):
    out = []
    for r in range(rows):
        for c in range(cols):
            g = geo_at(c * spacing, r * spacing)
            out.append((r * cols + c + 1, g.lon, g.lat))
    return out


def grid_edge_rows(rows: int, cols: int, spacing: float = 200.0, speed: float = 50.0,
                   oneway: int = 0):
    """Two-way (by default) lattice edges in the generator's numbering order."""
    node_pos = {}
    for r in range(rows):
        for c in range(cols):
            node_pos[r * cols + c + 1] = geo_at(c * spacing, r * spacing)
    out = []
    eid = 1
    for r in range(rows):
        for c in range(cols):
            for dr, dc in ((0, 1), (1, 0)):
                nr, nc = r + dr, c + dc
                if nr >= rows or nc >= cols:
                    continue
                a = r * cols + c + 1
                b = nr * cols + nc + 1
                ga, gb = node_pos[a], node_pos[b]
                geom = f"{ga.lon!r} {ga.lat!r};{gb.lon!r} {gb.lat!r}"
                out.append((eid, a, b, speed, oneway, geom))
                eid += 1
    return out


@pytest.fixture(scope="session")
def square_net() -> RoadNetwork:
    """2x2 two-way grid: 4 nodes, 8 directed edges, 200 m spacing."""
    return network_from_rows(grid_node_rows(2, 2), grid_edge_rows(2, 2))


@pytest.fixture(scope="session")
def grid5_net() -> RoadNetwork:
    """5x5 two-way grid without jitter, 200 m spacing."""
    return network_from_rows(grid_node_rows(5, 5), grid_edge_rows(5, 5))


def make_obs(x_m: float, y_m: float, *, car_id: int = 1, speed: float = 40.0,
             direction: int = 0, timestamp: int = 1_270_080_000) -> Observation:
    return Observation(
        car_id=car_id,
        pos=geo_at(x_m, y_m),
        speed_kmh=speed,
        direction=direction,
        occupied=True,
        timestamp=timestamp,
    )


# ---------------------------------------------------------------------------
# synthetic featurized lattices for inference oracles

N_PT = 2
N_PA = 2

_CATALOG = FeatureCatalog(
    point_names=("distance_error", "log_distance"),
    path_names=("length", "travel_time_s"),
    filter_cfg=FilterConfig(),
)

_SCALER = Scaler(
    point_min=np.zeros(N_PT),
    point_max=np.ones(N_PT),
    path_min=np.zeros(N_PA),
    path_max=np.ones(N_PA),
    point_bias_mask=np.zeros(N_PT, dtype=bool),
    path_bias_mask=np.zeros(N_PA, dtype=bool),
)


def model_with(omega, mu) -> CrfModel:
    from crfmatch.lattice import LatticeConfig

    return CrfModel(
        omega=np.asarray(omega, dtype=float),
        mu=np.asarray(mu, dtype=float),
        catalog=_CATALOG,
        scaler=_SCALER,
        lattice_cfg=LatticeConfig(),
    )


def _dummy_state(i: int) -> RoadState:
    return RoadState(edge_id=i + 1, offset_m=0.0, point=PlanePoint(0.0, 0.0),
                     dist_m=float(i), road_bearing=0.0)


def random_featurized(rng: np.random.Generator, max_layers: int = 4,
                      max_cands: int = 3, max_paths: int = 3) -> FeaturizedLattice:
    """Random small lattice with random features; (0, 0) pairs guarantee one
    compatible assignment through candidate 0 of every layer."""
    n_layers = int(rng.integers(1, max_layers + 1))
    n_cands = [int(rng.integers(1, max_cands + 1)) for _ in range(n_layers)]
    observations = tuple(
        make_obs(0.0, 0.0, timestamp=1_270_080_000 + 60 * t) for t in range(n_layers)
    )
    point_layers = tuple(tuple(_dummy_state(i) for i in range(k)) for k in n_cands)
    point_feats = [rng.uniform(-1.0, 1.0, size=(k, N_PT)) for k in n_cands]

    gap_feats, gpi, gpj, gstart, gpairs, gmap, path_layers = [], [], [], [], [], [], []
    for t in range(n_layers - 1):
        pairs = {(0, 0)}
        for i in range(n_cands[t]):
            for j in range(n_cands[t + 1]):
                if rng.random() < 0.6:
                    pairs.add((i, j))
        rows, pi, pj, starts, plist = [], [], [], [], []
        pair_map = {}
        layer_paths = {}
        for (i, j) in sorted(pairs):
            count = int(rng.integers(1, max_paths + 1))
            starts.append(len(rows))
            plist.append((i, j))
            pair_map[(i, j)] = (len(rows), count)
            layer_paths[(i, j)] = tuple(None for _ in range(count))
            for _ in range(count):
                rows.append(rng.uniform(-1.0, 1.0, size=N_PA))
                pi.append(i)
                pj.append(j)
        gap_feats.append(np.array(rows).reshape(len(rows), N_PA))
        gpi.append(np.array(pi, dtype=int))
        gpj.append(np.array(pj, dtype=int))
        gstart.append(np.array(starts, dtype=int))
        gpairs.append(np.array(plist, dtype=int).reshape(len(plist), 2))
        gmap.append(pair_map)
        path_layers.append(layer_paths)

    lattice = Lattice(
        car_id=1,
        observations=observations,
        obs_indices=tuple(range(n_layers)),
        point_layers=point_layers,
        path_layers=tuple(path_layers),
        dropped_observations=(),
    )
    return FeaturizedLattice(
        lattice=lattice,
        point_feats=point_feats,
        gap_feats=gap_feats,
        gap_pair_i=gpi,
        gap_pair_j=gpj,
        gap_group_start=gstart,
        gap_group_pairs=gpairs,
        gap_pair_map=gmap,
    )


def enumerate_assignments(fl: FeaturizedLattice):
    """All compatible assignments in lexicographic (candidates, then ranks) order."""
    n = len(fl.point_feats)
    for cand in itertools.product(*[range(m.shape[0]) for m in fl.point_feats]):
        entries = []
        ok = True
        for t in range(n - 1):
            entry = fl.gap_pair_map[t].get((cand[t], cand[t + 1]))
            if entry is None:
                ok = False
                break
            entries.append(entry)
        if not ok:
            continue
        for ranks in itertools.product(*[range(count) for _, count in entries]):
            yield Assignment(
                point_idx=cand,
                path_choice=tuple(
                    ((cand[t], cand[t + 1]), ranks[t]) for t in range(n - 1)
                ),
            )


def assignment_score(fl: FeaturizedLattice, omega, mu, a: Assignment) -> float:
    total = 0.0
    for t, c in enumerate(a.point_idx):
        total += float(fl.point_feats[t][c] @ omega)
    for t, (pair, rank) in enumerate(a.path_choice):
        start, _ = fl.gap_pair_map[t][tuple(pair)]
        total += float(fl.gap_feats[t][start + rank] @ mu)
    return total


def label_all_zero(fl: FeaturizedLattice) -> LabeledLattice:
    """The always-compatible all-zeros assignment as a ground-truth label."""
    n = len(fl.point_feats)
    return LabeledLattice(
        lattice=fl.lattice,
        point_label_idx=tuple(0 for _ in range(n)),
        path_label=tuple(((0, 0), 0) for _ in range(n - 1)),
        missing_label=False,
        true_point_edges=tuple(1 for _ in range(n)),
        true_gap_paths=tuple((1,) for _ in range(n - 1)),
    )
