"""End-to-end experiment pipeline: generate, split, train, match, evaluate.

`run_protocol` reproduces the benchmark recipe at desk scale: a seeded grid
network, noisy trajectories downsampled to a target interval, a trajectory-
level train/test split, per-method training (with holdout lambda selection),
and a method-by-method error table including a nearest-candidate baseline.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace

from .crf_engine import (
    CrfModel,
    MatchResult,
    TrainConfig,
    TrainReport,
    decode_pieces,
    featurize_lattice,
    train,
)
from .evaluation import EvalReport, MethodRow, error_rates
from .features import CATALOGS, FeatureCatalog, FilterConfig
from .lattice import Lattice, LatticeConfig, build_lattice, label_lattice
from .road_network import RoadNetwork
from .synthgen import GenConfig, gen_dataset, gen_network
from .trajectory_io import (
    GroundTruth,
    Trajectory,
    downsample_even_indices,
    downsample_ground_truth,
    split_train_test,
)

DEFAULT_METHODS = (
    ("base_simple", "base_simple", "l2"),
    ("base_complex", "base_complex", "l2"),
    ("crfs_l2", "default", "l2"),
    ("crfs_l1", "default", "l1"),
)


def nearest_baseline_match(
    traj: Trajectory,
    net: RoadNetwork,
    lattice_cfg: LatticeConfig,
    pieces: list[Lattice] | None = None,
) -> MatchResult:
    """Pick the nearest candidate per observation, shortest path per gap."""
    if pieces is None:
        pieces = build_lattice(traj, net, lattice_cfg)
    point_edges: list[int | None] = [None] * len(traj)
    gap_preds: dict[tuple[int, int], tuple[int, ...]] = {}
    if pieces:
        dropped = pieces[0].dropped_observations
    else:
        dropped = tuple(range(len(traj)))
    for piece in pieces:
        for t, layer in enumerate(piece.point_layers):
            point_edges[piece.obs_indices[t]] = layer[0].edge_id
        for t, layer in enumerate(piece.path_layers):
            paths = layer.get((0, 0))
            if paths:
                a, b = piece.obs_indices[t], piece.obs_indices[t + 1]
                gap_preds[(a, b)] = paths[0].edge_ids
    return MatchResult(
        car_id=traj.car_id,
        n_obs=len(traj),
        point_edges=tuple(point_edges),
        gap_preds=gap_preds,
        piece_log_scores=(),
        dropped_observations=dropped,
        lattices=tuple(pieces),
        assignments=(),
    )


def downsample_with_truth(
    traj: Trajectory, truth: GroundTruth, target_interval_s: float
) -> tuple[Trajectory, GroundTruth]:
    kept = downsample_even_indices(traj, target_interval_s)
    new_traj = Trajectory(traj.car_id, tuple(traj.observations[i] for i in kept))
    return new_traj, downsample_ground_truth(truth, kept)


@dataclass(eq=False)
class ProtocolResult:
    net: RoadNetwork
    train_trajs: list[Trajectory]
    test_trajs: list[Trajectory]
    truths: dict[int, GroundTruth]
    pieces_by_car: dict[int, list[Lattice]]
    models: dict[str, tuple[CrfModel, TrainReport]]
    matches: dict[tuple[str, str], list[MatchResult]]
    reports: dict[tuple[str, str], EvalReport]
    rows: list[MethodRow]


def run_protocol(
    gen_cfg: GenConfig,
    n_traj: int = 60,
    route_len_edges: int = 25,
    target_interval_s: float = 120.0,
    ratio_train: float = 0.7,
    lattice_cfg: LatticeConfig | None = None,
    train_cfg: TrainConfig | None = None,
    filter_cfg: FilterConfig | None = None,
    methods: tuple[tuple[str, str, str], ...] = DEFAULT_METHODS,
    include_baseline: bool = True,
) -> ProtocolResult:
    """Run the full synthetic benchmark and build the method/error table."""
    lattice_cfg = lattice_cfg or LatticeConfig()
    train_cfg = train_cfg or TrainConfig(seed=gen_cfg.seed)
    filter_cfg = filter_cfg or FilterConfig()

    net = gen_network(gen_cfg)
    raw_trajs, raw_truths = gen_dataset(net, gen_cfg, n_traj, route_len_edges)
    trajs = []
    truths: dict[int, GroundTruth] = {}
    for traj in raw_trajs:
        dt, dtruth = downsample_with_truth(traj, raw_truths[traj.car_id], target_interval_s)
        trajs.append(dt)
        truths[dt.car_id] = dtruth
    train_trajs, test_trajs = split_train_test(trajs, ratio_train, gen_cfg.seed)

    pieces_by_car = {t.car_id: build_lattice(t, net, lattice_cfg) for t in trajs}
    train_labeled = [
        label_lattice(piece, truths[t.car_id])
        for t in train_trajs
        for piece in pieces_by_car[t.car_id]
    ]

    models: dict[str, tuple[CrfModel, TrainReport]] = {}
    matches: dict[tuple[str, str], list[MatchResult]] = {}
    reports: dict[tuple[str, str], EvalReport] = {}
    rows: list[MethodRow] = []
    splits = (("train", train_trajs), ("test", test_trajs))
    for name, catalog_name, regularizer in methods:
        catalog = CATALOGS[catalog_name](filter_cfg)
        cfg_m = replace(train_cfg, regularizer=regularizer)
        model, report = train(train_labeled, net, catalog, cfg_m, lattice_cfg)
        models[name] = (model, report)
        for split_name, split in splits:
            results = [
                decode_pieces(t.car_id, len(t), pieces_by_car[t.car_id], net, model)
                for t in split
            ]
            matches[(name, split_name)] = results
            reports[(name, split_name)] = error_rates(results, truths)
        rows.append(
            MethodRow(
                method=name,
                feature_count=model.nonzero_count(),
                train_point=reports[(name, "train")].point_error_rate,
                train_path=reports[(name, "train")].path_error_rate,
                test_point=reports[(name, "test")].point_error_rate,
                test_path=reports[(name, "test")].path_error_rate,
            )
        )
    if include_baseline:
        for split_name, split in splits:
            results = [
                nearest_baseline_match(t, net, lattice_cfg, pieces_by_car[t.car_id])
                for t in split
            ]
            matches[("nearest", split_name)] = results
            reports[("nearest", split_name)] = error_rates(results, truths)
        rows.append(
            MethodRow(
                method="nearest",
                feature_count=0,
                train_point=reports[("nearest", "train")].point_error_rate,
                train_path=reports[("nearest", "train")].path_error_rate,
                test_point=reports[("nearest", "test")].point_error_rate,
                test_path=reports[("nearest", "test")].path_error_rate,
            )
        )
    return ProtocolResult(
        net=net,
        train_trajs=train_trajs,
        test_trajs=test_trajs,
        truths=truths,
        pieces_by_car=pieces_by_car,
        models=models,
        matches=matches,
        reports=reports,
        rows=rows,
    )


# ---------------------------------------------------------------------------
# feature-matrix export

def export_feature_matrices(
    trajs: list[Trajectory],
    net: RoadNetwork,
    catalog: FeatureCatalog,
    lattice_cfg: LatticeConfig,
) -> tuple[str, str]:
    """Raw feature matrices as two CSV documents (point rows, path rows)."""
    point_buf = io.StringIO()
    path_buf = io.StringIO()
    pw = csv.writer(point_buf)
    gw = csv.writer(path_buf)
    pw.writerow(["car_id", "piece", "layer", "candidate", "edge_id", *catalog.point_names])
    gw.writerow(["car_id", "piece", "gap", "cand_i", "cand_j", "path_rank", *catalog.path_names])
    for traj in trajs:
        for p, piece in enumerate(build_lattice(traj, net, lattice_cfg)):
            fl = featurize_lattice(piece, net, catalog)
            for t, matrix in enumerate(fl.point_feats):
                for c, row in enumerate(matrix):
                    pw.writerow(
                        [
                            traj.car_id,
                            p,
                            t,
                            c,
                            piece.point_layers[t][c].edge_id,
                            *[repr(float(x)) for x in row],
                        ]
                    )
            for t, matrix in enumerate(fl.gap_feats):
                for r, row in enumerate(matrix):
                    i = int(fl.gap_pair_i[t][r])
                    j = int(fl.gap_pair_j[t][r])
                    start, _ = fl.gap_pair_map[t][(i, j)]
                    gw.writerow(
                        [traj.car_id, p, t, i, j, r - start, *[repr(float(x)) for x in row]]
                    )
    return point_buf.getvalue(), path_buf.getvalue()
