import csv
import io

import pytest

from crfmatch.crf_engine import TrainConfig, featurize_lattice
from crfmatch.features import CATALOGS, FilterConfig
from crfmatch.lattice import LatticeConfig, build_lattice
from crfmatch.pipeline import (
    DEFAULT_METHODS,
    downsample_with_truth,
    export_feature_matrices,
    nearest_baseline_match,
    run_protocol,
)
from crfmatch.synthgen import GenConfig
from crfmatch.trajectory_io import GroundTruth, Trajectory

from conftest import make_obs

CFG = LatticeConfig()


def test_default_method_table():
    assert DEFAULT_METHODS == (
        ("base_simple", "base_simple", "l2"),
        ("base_complex", "base_complex", "l2"),
        ("crfs_l2", "default", "l2"),
        ("crfs_l1", "default", "l1"),
    )
    assert all(name in CATALOGS for _, name, _ in DEFAULT_METHODS)


# ---------------------------------------------------------------------------
# nearest-candidate baseline

def test_nearest_baseline_follows_first_candidates(grid5_net):
    traj = Trajectory(1, (
        make_obs(50, 0, direction=90, timestamp=1000),
        make_obs(250, 0, direction=90, timestamp=1010),
        make_obs(450, 0, direction=90, timestamp=1020),
    ))
    pieces = build_lattice(traj, grid5_net, CFG)
    result = nearest_baseline_match(traj, grid5_net, CFG)
    (piece,) = pieces
    expect_points = tuple(layer[0].edge_id for layer in piece.point_layers)
    assert result.point_edges == expect_points
    for t, layer in enumerate(piece.path_layers):
        key = (piece.obs_indices[t], piece.obs_indices[t + 1])
        assert result.gap_preds[key] == layer[(0, 0)][0].edge_ids
    assert result.car_id == 1
    assert result.n_obs == 3
    assert result.dropped_observations == ()
    assert result.assignments == ()


def test_nearest_baseline_with_no_pieces(grid5_net):
    traj = Trajectory(7, (make_obs(50, 0, car_id=7),))
    result = nearest_baseline_match(traj, grid5_net, CFG, pieces=[])
    assert result.point_edges == (None,)
    assert result.gap_preds == {}
    assert result.dropped_observations == (0,)


# ---------------------------------------------------------------------------
# truth-preserving downsampling

def test_downsample_with_truth_joins_gaps():
    obs = tuple(make_obs(10 * i, 0, timestamp=1000 + 10 * i) for i in range(25))
    traj = Trajectory(1, obs)
    truth = GroundTruth((1,) * 25, ((1,),) * 24)
    new_traj, new_truth = downsample_with_truth(traj, truth, 120.0)
    assert [o.timestamp for o in new_traj.observations] == [1000, 1120, 1240]
    assert new_traj.car_id == 1
    assert new_truth.point_labels == (1, 1, 1)
    assert new_truth.gap_paths == ((1,), (1,))


def test_downsample_with_truth_identity():
    obs = tuple(make_obs(10 * i, 0, timestamp=1000 + 10 * i) for i in range(3))
    traj = Trajectory(1, obs)
    truth = GroundTruth((1, 1, 1), ((1,), (1,)))
    new_traj, new_truth = downsample_with_truth(traj, truth, 10.0)
    assert new_traj.observations == traj.observations
    assert new_truth == truth


# ---------------------------------------------------------------------------
# protocol smoke test

@pytest.fixture(scope="module")
def protocol_small():
    gen_cfg = GenConfig(rows=3, cols=3, seed=1)
    return run_protocol(
        gen_cfg,
        n_traj=8,
        route_len_edges=6,
        target_interval_s=30.0,
        train_cfg=TrainConfig(lambda_=0.1, seed=1),
        methods=(("crfs_l2", "default", "l2"), ("crfs_l1", "default", "l1")),
    )


def test_protocol_shapes(protocol_small):
    res = protocol_small
    assert len(res.train_trajs) + len(res.test_trajs) == 8
    assert set(res.truths) == {t.car_id for t in res.train_trajs + res.test_trajs}
    assert set(res.models) == {"crfs_l2", "crfs_l1"}
    for name in ("crfs_l2", "crfs_l1", "nearest"):
        for split in ("train", "test"):
            assert (name, split) in res.matches
            report = res.reports[(name, split)]
            assert 0.0 <= report.point_error_rate <= 1.0
            assert 0.0 <= report.path_error_rate <= 1.0


def test_protocol_rows_follow_method_order(protocol_small):
    res = protocol_small
    assert [r.method for r in res.rows] == ["crfs_l2", "crfs_l1", "nearest"]
    l2_row = res.rows[0]
    model, report = res.models["crfs_l2"]
    assert report.converged
    assert l2_row.feature_count == model.nonzero_count()
    assert l2_row.test_point == res.reports[("crfs_l2", "test")].point_error_rate
    nearest = res.rows[-1]
    assert nearest.feature_count == 0


def test_protocol_without_baseline():
    res = run_protocol(
        GenConfig(rows=3, cols=3, seed=2),
        n_traj=4,
        route_len_edges=4,
        target_interval_s=10.0,
        train_cfg=TrainConfig(lambda_=0.1, seed=2),
        methods=(("crfs_l2", "default", "l2"),),
        include_baseline=False,
    )
    assert [r.method for r in res.rows] == ["crfs_l2"]
    assert ("nearest", "test") not in res.reports


def test_trained_model_beats_baseline_on_train_split(protocol_small):
    res = protocol_small
    crf = res.reports[("crfs_l2", "train")]
    base = res.reports[("nearest", "train")]
    assert crf.point_error_rate <= base.point_error_rate + 1e-12


# ---------------------------------------------------------------------------
# feature export

def test_export_feature_matrices(grid5_net):
    traj = Trajectory(1, (
        make_obs(50, 0, direction=90, timestamp=1000),
        make_obs(250, 0, direction=90, timestamp=1010),
    ))
    catalog = CATALOGS["default"](FilterConfig())
    point_csv, path_csv = export_feature_matrices([traj], grid5_net, catalog, CFG)

    point_rows = list(csv.reader(io.StringIO(point_csv)))
    path_rows = list(csv.reader(io.StringIO(path_csv)))
    assert point_rows[0] == ["car_id", "piece", "layer", "candidate", "edge_id",
                             *catalog.point_names]
    assert path_rows[0] == ["car_id", "piece", "gap", "cand_i", "cand_j",
                            "path_rank", *catalog.path_names]

    (piece,) = build_lattice(traj, grid5_net, CFG)
    fl = featurize_lattice(piece, grid5_net, catalog)
    n_points = sum(len(layer) for layer in piece.point_layers)
    n_paths = sum(m.shape[0] for m in fl.gap_feats)
    assert len(point_rows) == 1 + n_points
    assert len(path_rows) == 1 + n_paths

    first = point_rows[1]
    assert first[:4] == ["1", "0", "0", "0"]
    assert int(first[4]) == piece.point_layers[0][0].edge_id
    got = [float(x) for x in first[5:]]
    assert got == pytest.approx(list(fl.point_feats[0][0]), abs=1e-12)

    ranks = [int(r[5]) for r in path_rows[1:]]
    assert min(ranks) == 0
    assert all(r >= 0 for r in ranks)
