"""GPS trajectory and ground-truth parsing, cleaning, downsampling, splitting.

observations CSV  header ``car_id,longitude,latitude,speed,direction,occ,timestamp``
                  with timestamp ``YYYY-MM-DD HH:MM:SS`` (wall clock, no zone math).
ground truth      per trajectory a block
                  ``traj <car_id> <n_points>`` then
                  ``point <index> <edge_id>`` x n_points then
                  ``gap <index> <edge_id>[ <edge_id>...]`` x (n_points - 1).
"""

from __future__ import annotations

import calendar
import csv
import math
import statistics
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from .geometry import GeoPoint, valid_lon_lat
from .road_network import _open_lines

OBS_HEADER = ["car_id", "longitude", "latitude", "speed", "direction", "occ", "timestamp"]
_TS_FORMAT = "%Y-%m-%d %H:%M:%S"

REASON_MALFORMED = "malformed row"
REASON_COORDS = "invalid coordinates"
REASON_SPEED = "invalid speed"
REASON_DIRECTION = "invalid direction"
REASON_TIMESTAMP = "invalid timestamp"
REASON_DUPLICATE = "duplicate timestamp"


class TrajectoryFormatError(ValueError):
    """Raised for malformed observation or ground-truth files."""


@dataclass(frozen=True)
class Observation:
    car_id: int
    pos: GeoPoint
    speed_kmh: float
    direction: int
    occupied: bool
    timestamp: int


@dataclass(frozen=True)
class Trajectory:
    car_id: int
    observations: tuple[Observation, ...]

    def __post_init__(self):
        for a, b in zip(self.observations, self.observations[1:]):
            if b.timestamp <= a.timestamp:
                raise ValueError(f"trajectory {self.car_id}: timestamps not strictly increasing")
        for obs in self.observations:
            if obs.car_id != self.car_id:
                raise ValueError(f"trajectory {self.car_id}: mixed car ids")

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)


@dataclass(frozen=True)
class GroundTruth:
    """True edge per observation and true edge sequence per gap."""

    point_labels: tuple[int, ...]
    gap_paths: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        n = len(self.point_labels)
        if len(self.gap_paths) != max(0, n - 1):
            raise ValueError(
                f"label count: {n} points need {max(0, n - 1)} gaps, got {len(self.gap_paths)}"
            )
        for t, gap in enumerate(self.gap_paths):
            if not gap:
                raise ValueError(f"inconsistent gap {t}: empty edge sequence")
            if gap[0] != self.point_labels[t] or gap[-1] != self.point_labels[t + 1]:
                raise ValueError(
                    f"inconsistent gap {t}: endpoints {gap[0]},{gap[-1]} do not match "
                    f"point labels {self.point_labels[t]},{self.point_labels[t + 1]}"
                )


@dataclass
class CleaningReport:
    rows_total: int = 0
    rows_kept: int = 0
    dropped: dict[str, int] = field(default_factory=dict)

    def drop(self, reason: str) -> None:
        self.dropped[reason] = self.dropped.get(reason, 0) + 1


def _parse_timestamp(text: str) -> int:
    dt = datetime.strptime(text.strip(), _TS_FORMAT)
    return int(calendar.timegm(dt.timetuple()))


def format_timestamp(epoch_s: int) -> str:
    return datetime.fromtimestamp(epoch_s, tz=timezone.utc).strftime(_TS_FORMAT)


def parse_observations(source) -> tuple[list[Trajectory], CleaningReport]:
    """Read, validate and group raw observations.

    Invalid rows are dropped and counted by reason; rows are grouped by car
    and time-sorted; among rows of one car sharing a timestamp the first in
    file order is kept. Trajectories come back in ascending car_id order.
    """
    rows = list(csv.reader(_open_lines(source)))
    if not rows or [c.strip() for c in rows[0]] != OBS_HEADER:
        raise TrajectoryFormatError(
            f"observations file: malformed header, expected {','.join(OBS_HEADER)}"
        )
    report = CleaningReport()
    by_car: dict[int, list[Observation]] = {}
    for row in rows[1:]:
        if not row:
            continue
        report.rows_total += 1
        if len(row) != 7:
            report.drop(REASON_MALFORMED)
            continue
        try:
            car_id = int(row[0])
            lon = float(row[1])
            lat = float(row[2])
            speed = float(row[3])
            direction = int(row[4])
            occ = row[5].strip()
        except ValueError:
            report.drop(REASON_MALFORMED)
            continue
        if occ not in ("0", "1"):
            report.drop(REASON_MALFORMED)
            continue
        if not valid_lon_lat(lon, lat):
            report.drop(REASON_COORDS)
            continue
        if not (math.isfinite(speed) and speed >= 0.0):
            report.drop(REASON_SPEED)
            continue
        if not (0 <= direction <= 359):
            report.drop(REASON_DIRECTION)
            continue
        try:
            ts = _parse_timestamp(row[6])
        except ValueError:
            report.drop(REASON_TIMESTAMP)
            continue
        by_car.setdefault(car_id, []).append(
            Observation(car_id, GeoPoint(lon, lat), speed, direction, occ == "1", ts)
        )
    trajectories = []
    for car_id in sorted(by_car):
        obs = sorted(by_car[car_id], key=lambda o: o.timestamp)
        deduped = [obs[0]]
        for o in obs[1:]:
            if o.timestamp == deduped[-1].timestamp:
                report.drop(REASON_DUPLICATE)
            else:
                deduped.append(o)
        report.rows_kept += len(deduped)
        trajectories.append(Trajectory(car_id, tuple(deduped)))
    return trajectories, report


# ---------------------------------------------------------------------------
# downsampling

def downsample_even_indices(traj: Trajectory, target_interval_s: float) -> list[int]:
    """Kept-observation indices under greedy fixed-stride selection by time."""
    if target_interval_s <= 0:
        raise ValueError("target interval must be positive")
    n = len(traj)
    if n >= 2:
        gaps = [b.timestamp - a.timestamp for a, b in zip(traj.observations, traj.observations[1:])]
        if target_interval_s < statistics.median(gaps):
            raise ValueError(
                f"cannot upsample: target {target_interval_s} below native median interval"
            )
    kept = [0]
    for i in range(1, n):
        if traj.observations[i].timestamp - traj.observations[kept[-1]].timestamp >= target_interval_s:
            kept.append(i)
    return kept


def downsample_even(traj: Trajectory, target_interval_s: float) -> Trajectory:
    kept = downsample_even_indices(traj, target_interval_s)
    return Trajectory(traj.car_id, tuple(traj.observations[i] for i in kept))


def downsample_ground_truth(truth: GroundTruth, kept_indices: list[int]) -> GroundTruth:
    """Truth for the downsampled trajectory: kept labels, gap paths joined.

    The gap between kept observations i < j concatenates the native gaps
    i..j-1, dropping each successor's first edge (shared boundary).
    """
    labels = tuple(truth.point_labels[i] for i in kept_indices)
    gaps = []
    for i, j in zip(kept_indices, kept_indices[1:]):
        merged = list(truth.gap_paths[i])
        for t in range(i + 1, j):
            nxt = truth.gap_paths[t]
            if nxt[0] != merged[-1]:
                raise ValueError(f"inconsistent gap {t}: cannot join across downsampling")
            merged.extend(nxt[1:])
        gaps.append(tuple(merged))
    return GroundTruth(labels, tuple(gaps))


def split_train_test(
    trajs: list[Trajectory], ratio_train: float, seed: int
) -> tuple[list[Trajectory], list[Trajectory]]:
    """Seed-deterministic shuffle, then round(ratio * count) into train."""
    if not (0.0 < ratio_train < 1.0):
        raise ValueError("ratio_train must lie in (0, 1)")
    if len(trajs) < 2:
        raise ValueError("need at least 2 trajectories to split")
    perm = np.random.default_rng(seed).permutation(len(trajs))
    n_train = int(ratio_train * len(trajs) + 0.5)
    train = [trajs[i] for i in perm[:n_train]]
    test = [trajs[i] for i in perm[n_train:]]
    return train, test


# ---------------------------------------------------------------------------
# ground truth files

def _parse_truth_blocks(source) -> dict[int, GroundTruth]:
    lines = [ln.strip() for ln in _open_lines(source)]
    lines = [ln for ln in lines if ln]
    blocks: dict[int, GroundTruth] = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 3 or parts[0] != "traj":
            raise TrajectoryFormatError(f"ground truth line {i + 1}: expected 'traj <car_id> <n_points>'")
        try:
            car_id, n_points = int(parts[1]), int(parts[2])
        except ValueError as exc:
            raise TrajectoryFormatError(f"ground truth line {i + 1}: {exc}") from exc
        if n_points < 1:
            raise TrajectoryFormatError(f"ground truth line {i + 1}: n_points must be >= 1")
        if car_id in blocks:
            raise TrajectoryFormatError(f"ground truth line {i + 1}: duplicate trajectory {car_id}")
        i += 1
        labels = []
        for k in range(n_points):
            if i >= len(lines):
                raise TrajectoryFormatError(f"ground truth: trajectory {car_id} truncated")
            parts = lines[i].split()
            if len(parts) != 3 or parts[0] != "point" or int(parts[1]) != k:
                raise TrajectoryFormatError(f"ground truth line {i + 1}: expected 'point {k} <edge_id>'")
            labels.append(int(parts[2]))
            i += 1
        gaps = []
        for k in range(n_points - 1):
            if i >= len(lines):
                raise TrajectoryFormatError(f"ground truth: trajectory {car_id} truncated")
            parts = lines[i].split()
            if len(parts) < 3 or parts[0] != "gap" or int(parts[1]) != k:
                raise TrajectoryFormatError(f"ground truth line {i + 1}: expected 'gap {k} <edge_id>...'")
            gaps.append(tuple(int(tok) for tok in parts[2:]))
            i += 1
        try:
            blocks[car_id] = GroundTruth(tuple(labels), tuple(gaps))
        except ValueError as exc:
            raise TrajectoryFormatError(f"ground truth trajectory {car_id}: {exc}") from exc
    return blocks


def load_ground_truth_all(source) -> dict[int, GroundTruth]:
    return _parse_truth_blocks(source)


def load_ground_truth(source, traj: Trajectory) -> GroundTruth:
    blocks = _parse_truth_blocks(source)
    if traj.car_id not in blocks:
        raise TrajectoryFormatError(f"ground truth: no block for trajectory {traj.car_id}")
    truth = blocks[traj.car_id]
    if len(truth.point_labels) != len(traj):
        raise TrajectoryFormatError(
            f"label count: trajectory {traj.car_id} has {len(traj)} points, "
            f"truth has {len(truth.point_labels)}"
        )
    return truth


def write_observations_csv(path, trajs: list[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(OBS_HEADER)
        for traj in trajs:
            for o in traj.observations:
                writer.writerow([
                    o.car_id,
                    repr(float(o.pos.lon)),
                    repr(float(o.pos.lat)),
                    repr(float(o.speed_kmh)),
                    o.direction,
                    int(o.occupied),
                    format_timestamp(o.timestamp),
                ])


def write_ground_truth(path, items: list[tuple[int, GroundTruth]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for car_id, truth in items:
            fh.write(f"traj {car_id} {len(truth.point_labels)}\n")
            for k, edge_id in enumerate(truth.point_labels):
                fh.write(f"point {k} {edge_id}\n")
            for k, gap in enumerate(truth.gap_paths):
                fh.write(f"gap {k} {' '.join(str(e) for e in gap)}\n")
