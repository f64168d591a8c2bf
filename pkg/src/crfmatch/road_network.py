"""Directed road graph: loading, spatial candidate lookup, routing, turns.

The network is immutable after :func:`load_network`; every query here is
read-only and deterministic (ties always break toward the smaller edge id).

File formats
------------
nodes CSV   header ``node_id,lon,lat``
edges CSV   header ``edge_id,from_node,to_node,speed_limit_kmh,oneway,geometry``
            with ``oneway`` in {0,1} and ``geometry`` a semicolon-separated
            ``lon lat`` vertex list. A two-way row (oneway=0) expands into two
            directed edges: the forward edge keeps the file id (which must be
            a positive integer), the reverse edge gets the negated id and a
            reversed polyline; the two record each other in ``pair_id``.
"""

from __future__ import annotations

import csv
import heapq
import io
import math
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Iterable, Sequence, TextIO

import numpy as np

from .geometry import (
    GeoPoint,
    PlanePoint,
    Projection,
    bearing,
    signed_heading_change,
    to_plane,
    valid_lon_lat,
)

NODES_HEADER = ["node_id", "lon", "lat"]
EDGES_HEADER = ["edge_id", "from_node", "to_node", "speed_limit_kmh", "oneway", "geometry"]

MAX_SPEED_KMH = 200.0
_GEO_TOL_DEG = 1e-9


class NetworkFormatError(ValueError):
    """Raised for malformed or inconsistent network files."""


@dataclass(frozen=True)
class RoadNode:
    id: int
    pos: GeoPoint


@dataclass(frozen=True, eq=False)
class RoadEdge:
    """One directed edge with its projected geometry.

    ``xy`` is the polyline in plane coordinates, ``cum`` the cumulative arc
    length per vertex (cum[-1] == length_m).
    """

    id: int
    from_node: int
    to_node: int
    polyline: tuple[GeoPoint, ...]
    xy: np.ndarray
    cum: np.ndarray
    length_m: float
    speed_limit_kmh: float
    oneway: bool
    pair_id: int | None

    def point_at(self, offset_m: float) -> PlanePoint:
        i = self._segment_index(offset_m)
        seg_len = self.cum[i + 1] - self.cum[i]
        t = (offset_m - self.cum[i]) / seg_len
        x0, y0 = self.xy[i]
        x1, y1 = self.xy[i + 1]
        return PlanePoint(x0 + t * (x1 - x0), y0 + t * (y1 - y0))

    def bearing_at(self, offset_m: float) -> float:
        i = self._segment_index(offset_m)
        return bearing(PlanePoint(*self.xy[i]), PlanePoint(*self.xy[i + 1]))

    @property
    def first_bearing(self) -> float:
        return bearing(PlanePoint(*self.xy[0]), PlanePoint(*self.xy[1]))

    @property
    def last_bearing(self) -> float:
        return bearing(PlanePoint(*self.xy[-2]), PlanePoint(*self.xy[-1]))

    def slice_xy(self, off0: float, off1: float) -> np.ndarray:
        """Polyline points covering [off0, off1] along the edge (off0 <= off1)."""
        off0 = min(max(off0, 0.0), self.length_m)
        off1 = min(max(off1, 0.0), self.length_m)
        p0 = self.point_at(off0)
        p1 = self.point_at(off1)
        inner = [
            self.xy[i]
            for i in range(len(self.cum))
            if off0 < self.cum[i] < off1
        ]
        return np.array([tuple(p0), *map(tuple, inner), tuple(p1)], dtype=float)

    def _segment_index(self, offset_m: float) -> int:
        i = int(np.searchsorted(self.cum, offset_m, side="right")) - 1
        return min(max(i, 0), len(self.cum) - 2)


@dataclass(frozen=True)
class RoadState:
    """A candidate match: a directed edge plus the closest point on it."""

    edge_id: int
    offset_m: float
    point: PlanePoint
    dist_m: float
    road_bearing: float


@dataclass(frozen=True, eq=False)
class Path:
    """A direction-legal route between two road states.

    ``edge_ids`` is the traversed edge sequence; partial first/last edges are
    delimited by ``start_offset_m`` / ``end_offset_m``. The first and last id
    may coincide (leave the edge and re-enter it).
    """

    edge_ids: tuple[int, ...]
    start_offset_m: float
    end_offset_m: float
    length_m: float
    geometry: np.ndarray

    def straight_line_m(self) -> float:
        dx = self.geometry[-1, 0] - self.geometry[0, 0]
        dy = self.geometry[-1, 1] - self.geometry[0, 1]
        return math.hypot(dx, dy)


@dataclass
class RoadNetwork:
    nodes: dict[int, RoadNode]
    edges: dict[int, RoadEdge]
    adjacency: dict[int, tuple[RoadEdge, ...]]
    projection: Projection
    cell_size_m: float
    grid: dict[tuple[int, int], tuple[int, ...]]
    _route_cache: dict = field(default_factory=dict, repr=False)

    def edge(self, edge_id: int) -> RoadEdge:
        return self.edges[edge_id]

    def node_plane(self, node_id: int) -> PlanePoint:
        return to_plane(self.nodes[node_id].pos, self.projection)

    def is_reverse_pair(self, e1_id: int, e2_id: int) -> bool:
        """True when e2 is the opposite direction of the same physical road."""
        e1 = self.edges[e1_id]
        if e1.pair_id == e2_id:
            return True
        e2 = self.edges[e2_id]
        if e1.from_node != e2.to_node or e1.to_node != e2.from_node:
            return False
        if len(e1.xy) != len(e2.xy):
            return False
        return bool(np.allclose(e1.xy, e2.xy[::-1], atol=1e-6))

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_route_cache"] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)


# ---------------------------------------------------------------------------
# loading

def _open_lines(source: str | FsPath | TextIO | Iterable[str]) -> Iterable[str]:
    if isinstance(source, (str, FsPath)):
        try:
            return FsPath(source).read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise NetworkFormatError(f"cannot read {source}: {exc}") from exc
    if isinstance(source, io.TextIOBase) or hasattr(source, "read"):
        return source.read().splitlines()
    return source


def _check_header(row: list[str] | None, expected: list[str], what: str) -> None:
    if row is None or [c.strip() for c in row] != expected:
        raise NetworkFormatError(f"{what} file: malformed header, expected {','.join(expected)}")


def _parse_geometry(text: str, line_no: int) -> list[GeoPoint]:
    points: list[GeoPoint] = []
    for chunk in text.strip().split(";"):
        parts = chunk.split()
        if len(parts) != 2:
            raise NetworkFormatError(f"edges line {line_no}: bad geometry vertex {chunk!r}")
        try:
            lon, lat = float(parts[0]), float(parts[1])
        except ValueError as exc:
            raise NetworkFormatError(f"edges line {line_no}: bad geometry vertex {chunk!r}") from exc
        if not valid_lon_lat(lon, lat):
            raise NetworkFormatError(f"edges line {line_no}: geometry vertex out of range")
        points.append(GeoPoint(lon, lat))
    if len(points) < 2:
        raise NetworkFormatError(f"edges line {line_no}: geometry needs at least 2 vertices")
    return points


def _build_edge(
    edge_id: int,
    from_node: int,
    to_node: int,
    polyline: Sequence[GeoPoint],
    speed: float,
    oneway: bool,
    pair_id: int | None,
    proj: Projection,
    line_no: int,
) -> RoadEdge:
    xy_pts = [to_plane(p, proj) for p in polyline]
    # drop consecutive duplicate vertices; they carry no geometry
    kept: list[PlanePoint] = [xy_pts[0]]
    kept_geo: list[GeoPoint] = [polyline[0]]
    for gp, pp in zip(polyline[1:], xy_pts[1:]):
        if pp.x != kept[-1].x or pp.y != kept[-1].y:
            kept.append(pp)
            kept_geo.append(gp)
    if len(kept) < 2:
        raise NetworkFormatError(f"edges line {line_no}: zero-length edge {edge_id}")
    xy = np.array(kept, dtype=float)
    seg = np.hypot(np.diff(xy[:, 0]), np.diff(xy[:, 1]))
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    length = float(cum[-1])
    if length <= 0.0:
        raise NetworkFormatError(f"edges line {line_no}: zero-length edge {edge_id}")
    return RoadEdge(
        id=edge_id,
        from_node=from_node,
        to_node=to_node,
        polyline=tuple(kept_geo),
        xy=xy,
        cum=cum,
        length_m=length,
        speed_limit_kmh=speed,
        oneway=oneway,
        pair_id=pair_id,
    )


def load_network(
    nodes_source,
    edges_source,
    cell_size_m: float = 50.0,
) -> RoadNetwork:
    """Load and validate a network; build the spatial grid index.

    Raises :class:`NetworkFormatError` naming the offending line for dangling
    node references, duplicate ids, zero-length edges and bad speeds.
    """
    node_reader = csv.reader(_open_lines(nodes_source))
    rows = list(node_reader)
    _check_header(rows[0] if rows else None, NODES_HEADER, "nodes")
    nodes: dict[int, RoadNode] = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise NetworkFormatError(f"nodes line {line_no}: expected 3 fields")
        try:
            node_id = int(row[0])
            lon, lat = float(row[1]), float(row[2])
        except ValueError as exc:
            raise NetworkFormatError(f"nodes line {line_no}: {exc}") from exc
        if node_id in nodes:
            raise NetworkFormatError(f"nodes line {line_no}: duplicate node id {node_id}")
        if not valid_lon_lat(lon, lat):
            raise NetworkFormatError(f"nodes line {line_no}: coordinates out of range")
        nodes[node_id] = RoadNode(node_id, GeoPoint(lon, lat))
    if not nodes:
        raise NetworkFormatError("nodes file: no nodes")

    origin = GeoPoint(
        sum(n.pos.lon for n in nodes.values()) / len(nodes),
        sum(n.pos.lat for n in nodes.values()) / len(nodes),
    )
    proj = Projection(origin)

    edge_reader = csv.reader(_open_lines(edges_source))
    rows = list(edge_reader)
    _check_header(rows[0] if rows else None, EDGES_HEADER, "edges")
    edges: dict[int, RoadEdge] = {}
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 6:
            raise NetworkFormatError(f"edges line {line_no}: expected 6 fields")
        try:
            edge_id = int(row[0])
            from_node = int(row[1])
            to_node = int(row[2])
            speed = float(row[3])
            oneway_raw = row[4].strip()
        except ValueError as exc:
            raise NetworkFormatError(f"edges line {line_no}: {exc}") from exc
        if edge_id <= 0:
            raise NetworkFormatError(f"edges line {line_no}: edge id must be positive")
        if edge_id in edges or -edge_id in edges:
            raise NetworkFormatError(f"edges line {line_no}: duplicate edge id {edge_id}")
        for node_id in (from_node, to_node):
            if node_id not in nodes:
                raise NetworkFormatError(
                    f"edges line {line_no}: edge {edge_id} references missing node {node_id}"
                )
        if not (0.0 < speed <= MAX_SPEED_KMH):
            raise NetworkFormatError(
                f"edges line {line_no}: speed limit {speed} outside (0, {MAX_SPEED_KMH:g}]"
            )
        if oneway_raw not in ("0", "1"):
            raise NetworkFormatError(f"edges line {line_no}: oneway must be 0 or 1")
        oneway = oneway_raw == "1"
        polyline = _parse_geometry(row[5], line_no)
        for label, gp, node_id in (("first", polyline[0], from_node), ("last", polyline[-1], to_node)):
            np_pos = nodes[node_id].pos
            if abs(gp.lon - np_pos.lon) > _GEO_TOL_DEG or abs(gp.lat - np_pos.lat) > _GEO_TOL_DEG:
                raise NetworkFormatError(
                    f"edges line {line_no}: {label} geometry vertex does not coincide with node {node_id}"
                )
        pair = None if oneway else -edge_id
        edges[edge_id] = _build_edge(
            edge_id, from_node, to_node, polyline, speed, oneway, pair, proj, line_no
        )
        if not oneway:
            edges[-edge_id] = _build_edge(
                -edge_id, to_node, from_node, list(reversed(polyline)), speed, oneway,
                edge_id, proj, line_no,
            )

    adjacency: dict[int, list[RoadEdge]] = {nid: [] for nid in nodes}
    for edge in edges.values():
        adjacency[edge.from_node].append(edge)
    adj = {nid: tuple(sorted(lst, key=lambda e: e.id)) for nid, lst in adjacency.items()}

    grid = _build_grid(edges, cell_size_m)
    return RoadNetwork(
        nodes=nodes,
        edges=edges,
        adjacency=adj,
        projection=proj,
        cell_size_m=cell_size_m,
        grid=grid,
    )


def write_network_csv(nodes_rows, edges_rows, nodes_path, edges_path) -> None:
    """Write pre-expansion network rows in the documented CSV formats.

    ``nodes_rows``: iterable of (node_id, lon, lat).
    ``edges_rows``: iterable of (edge_id, from_node, to_node, speed_limit_kmh,
    oneway, [GeoPoint, ...]).
    """
    with open(nodes_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(NODES_HEADER)
        for node_id, lon, lat in nodes_rows:
            writer.writerow([node_id, repr(float(lon)), repr(float(lat))])
    with open(edges_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(EDGES_HEADER)
        for edge_id, from_node, to_node, speed, oneway, geometry in edges_rows:
            geom = ";".join(f"{repr(float(p.lon))} {repr(float(p.lat))}" for p in geometry)
            writer.writerow([edge_id, from_node, to_node, repr(float(speed)), int(oneway), geom])


# ---------------------------------------------------------------------------
# spatial index

def _cell_of(x: float, y: float, cell: float) -> tuple[int, int]:
    return (int(math.floor(x / cell)), int(math.floor(y / cell)))


def _build_grid(
    edges: dict[int, RoadEdge], cell_size_m: float
) -> dict[tuple[int, int], tuple[int, ...]]:
    cells: dict[tuple[int, int], set[int]] = {}
    for edge in edges.values():
        xy = edge.xy
        for i in range(len(xy) - 1):
            x0, x1 = sorted((xy[i, 0], xy[i + 1, 0]))
            y0, y1 = sorted((xy[i, 1], xy[i + 1, 1]))
            ci0, cj0 = _cell_of(x0, y0, cell_size_m)
            ci1, cj1 = _cell_of(x1, y1, cell_size_m)
            for ci in range(ci0, ci1 + 1):
                for cj in range(cj0, cj1 + 1):
                    cells.setdefault((ci, cj), set()).add(edge.id)
    return {key: tuple(sorted(ids)) for key, ids in cells.items()}


def project_to_edge(edge: RoadEdge, p: PlanePoint) -> RoadState:
    """Closest point on the edge polyline, as a RoadState."""
    xy = edge.xy
    ax, ay = xy[:-1, 0], xy[:-1, 1]
    bx, by = xy[1:, 0], xy[1:, 1]
    abx, aby = bx - ax, by - ay
    seg_len_sq = abx * abx + aby * aby
    t = ((p.x - ax) * abx + (p.y - ay) * aby) / seg_len_sq
    t = np.clip(t, 0.0, 1.0)
    cx = ax + t * abx
    cy = ay + t * aby
    d = np.hypot(p.x - cx, p.y - cy)
    i = int(np.argmin(d))
    offset = float(edge.cum[i] + t[i] * math.sqrt(seg_len_sq[i]))
    return RoadState(
        edge_id=edge.id,
        offset_m=offset,
        point=PlanePoint(float(cx[i]), float(cy[i])),
        dist_m=float(d[i]),
        road_bearing=bearing(PlanePoint(float(ax[i]), float(ay[i])), PlanePoint(float(bx[i]), float(by[i]))),
    )


def nearest_road_states(
    net: RoadNetwork, p: PlanePoint, radius_m: float, max_k: int
) -> list[RoadState]:
    """Up to ``max_k`` distinct-edge candidates within ``radius_m``, nearest first."""
    if radius_m <= 0:
        raise ValueError("radius_m must be positive")
    if max_k < 1:
        raise ValueError("max_k must be >= 1")
    cell = net.cell_size_m
    ci0, cj0 = _cell_of(p.x - radius_m, p.y - radius_m, cell)
    ci1, cj1 = _cell_of(p.x + radius_m, p.y + radius_m, cell)
    candidate_ids: set[int] = set()
    for ci in range(ci0, ci1 + 1):
        for cj in range(cj0, cj1 + 1):
            candidate_ids.update(net.grid.get((ci, cj), ()))
    states = []
    for edge_id in sorted(candidate_ids):
        state = project_to_edge(net.edges[edge_id], p)
        if state.dist_m <= radius_m:
            states.append(state)
    states.sort(key=lambda s: (s.dist_m, s.edge_id))
    return states[:max_k]


# ---------------------------------------------------------------------------
# routing

def _dijkstra(
    net: RoadNetwork,
    s: int,
    t: int,
    banned_edges: frozenset[int] | set[int],
    banned_nodes: frozenset[int] | set[int],
) -> tuple[float, tuple[int, ...]] | None:
    """Shortest edge path s->t by length; None when unreachable."""
    if s in banned_nodes or t in banned_nodes:
        return None
    dist: dict[int, float] = {s: 0.0}
    prev: dict[int, RoadEdge] = {}
    heap: list[tuple[float, int]] = [(0.0, s)]
    settled: set[int] = set()
    while heap:
        d, node = heapq.heappop(heap)
        if node in settled:
            continue
        settled.add(node)
        if node == t:
            route: list[int] = []
            cur = node
            while cur != s:
                edge = prev[cur]
                route.append(edge.id)
                cur = edge.from_node
            return d, tuple(reversed(route))
        for edge in net.adjacency.get(node, ()):
            if edge.id in banned_edges or edge.to_node in banned_nodes:
                continue
            nd = d + edge.length_m
            if nd < dist.get(edge.to_node, math.inf):
                dist[edge.to_node] = nd
                prev[edge.to_node] = edge
                heapq.heappush(heap, (nd, edge.to_node))
    return None


def _route_nodes(net: RoadNetwork, s: int, edge_ids: Sequence[int]) -> list[int]:
    nodes = [s]
    for eid in edge_ids:
        nodes.append(net.edges[eid].to_node)
    return nodes


def _yen_k_shortest(net: RoadNetwork, s: int, t: int, k: int) -> list[tuple[float, tuple[int, ...]]]:
    first = _dijkstra(net, s, t, frozenset(), frozenset())
    if first is None:
        return []
    accepted = [first]
    seen = {first[1]}
    candidates: list[tuple[float, tuple[int, ...]]] = []
    while len(accepted) < k:
        base_len, base = accepted[-1]
        base_nodes = _route_nodes(net, s, base)
        root_len = 0.0
        for i in range(len(base)):
            root = base[:i]
            spur_node = base_nodes[i]
            banned_edges = {
                path[i]
                for _, path in accepted
                if len(path) > i and path[:i] == root
            }
            banned_nodes = set(base_nodes[:i])
            spur = _dijkstra(net, spur_node, t, banned_edges, banned_nodes)
            if spur is not None:
                cand = root + spur[1]
                if cand not in seen:
                    seen.add(cand)
                    candidates.append((root_len + spur[0], cand))
            root_len += net.edges[base[i]].length_m
        if not candidates:
            break
        candidates.sort(key=lambda item: (item[0], item[1]))
        accepted.append(candidates.pop(0))
    return accepted


def _k_shortest_cycles(net: RoadNetwork, s: int, k: int) -> list[tuple[float, tuple[int, ...]]]:
    """Empty route plus shortest cycles through s, branching on the first edge."""
    routes: list[tuple[float, tuple[int, ...]]] = [(0.0, ())]
    cycles = []
    for edge in net.adjacency.get(s, ()):
        back = _dijkstra(net, edge.to_node, s, frozenset(), frozenset())
        if back is not None:
            cycles.append((edge.length_m + back[0], (edge.id,) + back[1]))
    cycles.sort(key=lambda item: (item[0], item[1]))
    routes.extend(cycles[: max(0, k - 1)])
    return routes


def k_shortest_routes(
    net: RoadNetwork, s: int, t: int, k: int
) -> list[tuple[float, tuple[int, ...]]]:
    """k shortest loop-free node-to-node routes, cached on the network."""
    key = (s, t, k)
    cached = net._route_cache.get(key)
    if cached is None:
        if s == t:
            cached = _k_shortest_cycles(net, s, k)
        else:
            cached = _yen_k_shortest(net, s, t, k)
        net._route_cache[key] = cached
    return cached


def _concat_geometry(parts: list[np.ndarray]) -> np.ndarray:
    points: list[tuple[float, float]] = []
    for part in parts:
        for x, y in part:
            if points and points[-1][0] == x and points[-1][1] == y:
                continue
            points.append((float(x), float(y)))
    if len(points) == 1:
        points.append(points[0])
    return np.array(points, dtype=float)


def _make_path(
    net: RoadNetwork, edge_ids: tuple[int, ...], start_off: float, end_off: float, length: float
) -> Path:
    if len(edge_ids) == 1:
        geom = net.edges[edge_ids[0]].slice_xy(start_off, end_off)
    else:
        parts = [net.edges[edge_ids[0]].slice_xy(start_off, net.edges[edge_ids[0]].length_m)]
        parts.extend(net.edges[eid].xy for eid in edge_ids[1:-1])
        parts.append(net.edges[edge_ids[-1]].slice_xy(0.0, end_off))
        geom = _concat_geometry(parts)
    return Path(
        edge_ids=edge_ids,
        start_offset_m=start_off,
        end_offset_m=end_off,
        length_m=length,
        geometry=geom,
    )


def feasible_paths(
    net: RoadNetwork,
    from_state: RoadState,
    to_state: RoadState,
    k_max: int,
    length_cap_m: float,
) -> list[Path]:
    """Up to ``k_max`` direction-legal routes from one road state to the next.

    Routes leave via the from-edge's end node and arrive via the to-edge's
    start node; the same-edge forward path is included when applicable. The
    intermediate node route is loop-free. Sorted ascending by length, ties by
    edge-id sequence; every result is <= ``length_cap_m``.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    if length_cap_m <= 0:
        raise ValueError("length_cap_m must be positive")
    eps = 1e-9
    ea = net.edges[from_state.edge_id]
    eb = net.edges[to_state.edge_id]
    found: list[tuple[float, tuple[int, ...]]] = []
    if ea.id == eb.id and to_state.offset_m >= from_state.offset_m - eps:
        direct_len = max(0.0, to_state.offset_m - from_state.offset_m)
        if direct_len <= length_cap_m:
            found.append((direct_len, (ea.id,)))
    head = ea.length_m - from_state.offset_m
    tail = to_state.offset_m
    if head + tail <= length_cap_m + eps:
        for route_len, route in k_shortest_routes(net, ea.to_node, eb.from_node, k_max):
            total = head + route_len + tail
            if total > length_cap_m + eps:
                break
            found.append((total, (ea.id,) + route + (eb.id,)))
    found.sort(key=lambda item: (item[0], item[1]))
    paths = [
        _make_path(net, seq, from_state.offset_m, to_state.offset_m, length)
        for length, seq in found[:k_max]
    ]
    return paths


def count_turns(
    net: RoadNetwork,
    path: Path,
    turn_min_deg: float = 30.0,
    u_turn_min_deg: float = 150.0,
) -> tuple[int, int, int]:
    """(left, right, u_turn) counts over the path's interior junctions.

    Signed heading change d at a junction: d in [turn_min, u_turn_min] is a
    right turn, d in [-u_turn_min, -turn_min] a left turn, |d| > u_turn_min a
    U-turn, anything else straight. Bearings are clockwise-from-north, so
    positive d turns right.
    """
    left = right = u_turn = 0
    for prev_id, next_id in zip(path.edge_ids, path.edge_ids[1:]):
        d = signed_heading_change(net.edges[prev_id].last_bearing, net.edges[next_id].first_bearing)
        if abs(d) > u_turn_min_deg:
            u_turn += 1
        elif turn_min_deg <= d <= u_turn_min_deg:
            right += 1
        elif -u_turn_min_deg <= d <= -turn_min_deg:
            left += 1
    return left, right, u_turn
