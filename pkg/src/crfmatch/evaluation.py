"""Error rates, error-cause taxonomy, and tabular report emission.

Point error: predicted edge differs from the true edge (dropped observations
count as errors). Path error: the predicted edge sequence for a gap differs
from the true sequence; gaps with no single-gap prediction (piece boundaries,
dropped neighbors) count as wrong. Every error instance is assigned exactly
one cause by a fixed priority order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

from .crf_engine import MatchResult
from .geometry import bearing_diff, to_plane
from .lattice import label_lattice
from .road_network import RoadNetwork, project_to_edge
from .trajectory_io import GroundTruth

TAXONOMY_CATEGORIES = (
    "missing_label",
    "position_outlier",
    "start_end_point",
    "u_turn",
    "parallel_roads",
    "other",
)

REPORT_VERSION = 1


@dataclass(frozen=True)
class EvalReport:
    n_points: int
    n_point_errors: int
    n_paths: int
    n_path_errors: int
    n_dropped: int

    @property
    def point_error_rate(self) -> float:
        return self.n_point_errors / self.n_points if self.n_points else 0.0

    @property
    def path_error_rate(self) -> float:
        return self.n_path_errors / self.n_paths if self.n_paths else 0.0

    def to_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "n_point_errors": self.n_point_errors,
            "n_paths": self.n_paths,
            "n_path_errors": self.n_path_errors,
            "n_dropped": self.n_dropped,
            "point_error_rate": self.point_error_rate,
            "path_error_rate": self.path_error_rate,
        }


@dataclass(frozen=True)
class ErrorTaxonomy:
    counts: dict[str, int]

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    @property
    def fractions(self) -> dict[str, float]:
        total = self.total
        if total == 0:
            return {k: 0.0 for k in self.counts}
        return {k: v / total for k, v in self.counts.items()}

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "fractions": self.fractions}


def error_rates(
    results: list[MatchResult], truths: dict[int, GroundTruth]
) -> EvalReport:
    """Aggregate point/path error rates over matched trajectories."""
    n_points = n_point_err = n_paths = n_path_err = n_dropped = 0
    for result in results:
        truth = truths.get(result.car_id)
        if truth is None or len(truth.point_labels) != result.n_obs:
            raise ValueError(f"alignment mismatch for trajectory {result.car_id}")
        n_dropped += len(result.dropped_observations)
        for i, true_edge in enumerate(truth.point_labels):
            n_points += 1
            if result.point_edges[i] != true_edge:
                n_point_err += 1
        for g, true_seq in enumerate(truth.gap_paths):
            n_paths += 1
            if result.gap_preds.get((g, g + 1)) != true_seq:
                n_path_err += 1
    if n_points == 0:
        raise ValueError("no points to evaluate")
    return EvalReport(n_points, n_point_err, n_paths, n_path_err, n_dropped)


def _has_new_reversal(
    net: RoadNetwork, pred_seq: tuple[int, ...], true_seq: tuple[int, ...]
) -> bool:
    def reversals(seq):
        return {
            (a, b) for a, b in zip(seq, seq[1:]) if net.is_reverse_pair(a, b)
        }

    return bool(reversals(pred_seq) - reversals(true_seq))


def _parallel(
    net: RoadNetwork,
    obs_plane,
    pred_edge: int,
    true_edge: int,
    dist_m: float,
    bearing_deg: float,
) -> bool:
    sp = project_to_edge(net.edges[pred_edge], obs_plane)
    st = project_to_edge(net.edges[true_edge], obs_plane)
    gap = ((sp.point.x - st.point.x) ** 2 + (sp.point.y - st.point.y) ** 2) ** 0.5
    return gap <= dist_m and bearing_diff(sp.road_bearing, st.road_bearing) < bearing_deg


def categorize_errors(
    results: list[MatchResult],
    truths: dict[int, GroundTruth],
    net: RoadNetwork,
    radius_m: float = 50.0,
    parallel_dist_m: float = 30.0,
    parallel_bearing_deg: float = 20.0,
) -> ErrorTaxonomy:
    """Assign each mispredicted point/path exactly one cause.

    Priority: missing_label (truth eliminated from the candidate or path
    set), position_outlier (observation dropped or far from its true edge),
    start_end_point (first/last layer of a piece), u_turn (predicted reversal
    absent from truth; paths only), parallel_roads (wrong edge close to and
    aligned with the true edge), other.
    """
    counts = {k: 0 for k in TAXONOMY_CATEGORIES}
    for result in results:
        truth = truths.get(result.car_id)
        if truth is None or len(truth.point_labels) != result.n_obs:
            raise ValueError(f"alignment mismatch for trajectory {result.car_id}")
        labeled = [label_lattice(piece, truth) for piece in result.lattices]
        # observation index -> (piece index, layer index)
        where: dict[int, tuple[int, int]] = {}
        for p, piece in enumerate(result.lattices):
            for t, i in enumerate(piece.obs_indices):
                where[i] = (p, t)

        obs_by_index = {}
        for piece in result.lattices:
            for t, i in enumerate(piece.obs_indices):
                obs_by_index[i] = piece.observations[t]

        for i, true_edge in enumerate(truth.point_labels):
            pred = result.point_edges[i]
            if pred == true_edge:
                continue
            loc = where.get(i)
            dropped = loc is None
            if not dropped and labeled[loc[0]].point_label_idx[loc[1]] is None:
                counts["missing_label"] += 1
                continue
            if dropped:
                counts["position_outlier"] += 1
                continue
            p, t = loc
            obs_plane = to_plane(obs_by_index[i].pos, net.projection)
            if project_to_edge(net.edges[true_edge], obs_plane).dist_m > radius_m:
                counts["position_outlier"] += 1
                continue
            piece = result.lattices[p]
            if t == 0 or t == len(piece.point_layers) - 1:
                counts["start_end_point"] += 1
                continue
            if pred is not None and _parallel(
                net, obs_plane, pred, true_edge, parallel_dist_m, parallel_bearing_deg
            ):
                counts["parallel_roads"] += 1
                continue
            counts["other"] += 1

        for g, true_seq in enumerate(truth.gap_paths):
            pred_seq = result.gap_preds.get((g, g + 1))
            if pred_seq == true_seq:
                continue
            loc_a, loc_b = where.get(g), where.get(g + 1)
            covered = (
                loc_a is not None
                and loc_b is not None
                and loc_a[0] == loc_b[0]
                and loc_b[1] == loc_a[1] + 1
            )
            if not covered:
                counts["missing_label"] += 1
                continue
            p, t = loc_a
            if labeled[p].path_label[t] is None:
                counts["missing_label"] += 1
                continue
            outlier = False
            for i, true_edge in ((g, truth.point_labels[g]), (g + 1, truth.point_labels[g + 1])):
                obs_plane = to_plane(obs_by_index[i].pos, net.projection)
                if project_to_edge(net.edges[true_edge], obs_plane).dist_m > radius_m:
                    outlier = True
            if outlier:
                counts["position_outlier"] += 1
                continue
            piece = result.lattices[p]
            if t == 0 or t == len(piece.path_layers) - 1:
                counts["start_end_point"] += 1
                continue
            if pred_seq is not None and _has_new_reversal(net, pred_seq, true_seq):
                counts["u_turn"] += 1
                continue
            parallel = False
            for i, true_edge in ((g, truth.point_labels[g]), (g + 1, truth.point_labels[g + 1])):
                pred_edge = result.point_edges[i]
                if pred_edge is not None and pred_edge != true_edge:
                    obs_plane = to_plane(obs_by_index[i].pos, net.projection)
                    if _parallel(
                        net, obs_plane, pred_edge, true_edge, parallel_dist_m, parallel_bearing_deg
                    ):
                        parallel = True
            if parallel:
                counts["parallel_roads"] += 1
                continue
            counts["other"] += 1
    return ErrorTaxonomy(counts)


# ---------------------------------------------------------------------------
# report emission

@dataclass(frozen=True)
class MethodRow:
    method: str
    feature_count: int
    train_point: float
    train_path: float
    test_point: float
    test_path: float


REPORT_COLUMNS = ["method", "feature_count", "train_point", "train_path", "test_point", "test_path"]


def emit_report(rows: list[MethodRow], fmt: str = "csv") -> str:
    """Render method rows as a CSV or JSON table."""
    if not rows:
        raise ValueError("no report rows")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row.method,
                    row.feature_count,
                    repr(row.train_point),
                    repr(row.train_path),
                    repr(row.test_point),
                    repr(row.test_path),
                ]
            )
        return buf.getvalue()
    if fmt == "json":
        doc = {
            "version": REPORT_VERSION,
            "rows": [
                {
                    "method": r.method,
                    "feature_count": r.feature_count,
                    "train_point": r.train_point,
                    "train_path": r.train_path,
                    "test_point": r.test_point,
                    "test_path": r.test_path,
                }
                for r in rows
            ],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"
    raise ValueError("format must be 'csv' or 'json'")
