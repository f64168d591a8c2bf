"""Planar projection of WGS84 coordinates and primitive spatial math.

All metric computation in the package happens in a local equirectangular
plane anchored at the road network's centroid. At city scale the projection
error is negligible and every downstream operation (distance, bearing,
segment projection) becomes closed-form planar geometry.
"""

from __future__ import annotations

import math
from typing import NamedTuple

EARTH_RADIUS_M = 6_371_000.0


class GeoPoint(NamedTuple):
    """WGS84 coordinate in degrees. lon in [-180, 180], lat in [-90, 90]."""

    lon: float
    lat: float


class PlanePoint(NamedTuple):
    """Local planar coordinate: meters east (x) / north (y) of the origin."""

    x: float
    y: float


class Projection(NamedTuple):
    """Equirectangular projection anchored at ``origin``."""

    origin: GeoPoint
    earth_radius: float = EARTH_RADIUS_M


def valid_lon_lat(lon: float, lat: float) -> bool:
    return (
        math.isfinite(lon)
        and math.isfinite(lat)
        and -180.0 <= lon <= 180.0
        and -90.0 <= lat <= 90.0
    )


def to_plane(p: GeoPoint, proj: Projection) -> PlanePoint:
    """Project a geographic point onto the local plane.

    x = R * (lon - lon0) * cos(lat0), y = R * (lat - lat0), angles in radians.
    """
    lon0, lat0 = proj.origin
    r = proj.earth_radius
    x = r * math.radians(p.lon - lon0) * math.cos(math.radians(lat0))
    y = r * math.radians(p.lat - lat0)
    return PlanePoint(x, y)


def from_plane(p: PlanePoint, proj: Projection) -> GeoPoint:
    """Algebraic inverse of :func:`to_plane` (used by the synthetic generator)."""
    lon0, lat0 = proj.origin
    r = proj.earth_radius
    lon = lon0 + math.degrees(p.x / (r * math.cos(math.radians(lat0))))
    lat = lat0 + math.degrees(p.y / r)
    return GeoPoint(lon, lat)


def distance(a: PlanePoint, b: PlanePoint) -> float:
    return math.hypot(b.x - a.x, b.y - a.y)


def bearing(a: PlanePoint, b: PlanePoint) -> float:
    """Clockwise angle from north of the vector a->b, in [0, 360)."""
    dx = b.x - a.x
    dy = b.y - a.y
    if dx == 0.0 and dy == 0.0:
        raise ValueError("degenerate bearing: coincident points")
    return math.degrees(math.atan2(dx, dy)) % 360.0


def bearing_diff(b1: float, b2: float) -> float:
    """Smallest angle between two bearings, in [0, 180]."""
    d = abs(b1 - b2) % 360.0
    return min(d, 360.0 - d)


def signed_heading_change(incoming: float, outgoing: float) -> float:
    """Signed turn angle from ``incoming`` to ``outgoing`` in (-180, 180].

    Positive = clockwise (a right turn for clockwise-from-north bearings).
    """
    d = (outgoing - incoming) % 360.0
    if d > 180.0:
        d -= 360.0
    return d


def project_onto_segment(
    p: PlanePoint, a: PlanePoint, b: PlanePoint
) -> tuple[PlanePoint, float, float]:
    """Closest point on segment [a, b] to p.

    Returns (closest, offset_m, dist_m) where offset_m is measured along a->b
    and clamped to [0, |ab|].
    """
    abx = b.x - a.x
    aby = b.y - a.y
    seg_len_sq = abx * abx + aby * aby
    if seg_len_sq == 0.0:
        raise ValueError("zero-length segment")
    t = ((p.x - a.x) * abx + (p.y - a.y) * aby) / seg_len_sq
    t = min(1.0, max(0.0, t))
    closest = PlanePoint(a.x + t * abx, a.y + t * aby)
    offset = t * math.sqrt(seg_len_sq)
    return closest, offset, distance(p, closest)
