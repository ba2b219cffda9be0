"""Registration quality metrics: pose error statistics and normalized chamfer distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, cKDTree

from vicet.cloud import PointCloud
from vicet.geometry import TH0, X0, euler_to_rotation, rotation_to_euler

COMPONENTS = (
    ("x", "m"),
    ("y", "m"),
    ("z", "m"),
    ("forward", "m"),
    ("roll", "deg"),
    ("pitch", "deg"),
    ("yaw", "deg"),
)


class DegenerateReportError(ValueError):
    pass


@dataclass(frozen=True)
class ChamferReport:
    normalized: float  # m^2 per surviving point
    used: int
    rejected: int
    inflation: float

    @property
    def total(self) -> int:
        return self.used + self.rejected


@dataclass(frozen=True)
class ErrorStats:
    mean: dict
    std: dict
    n: int

    def rows(self):
        for name, unit in COMPONENTS:
            yield name, unit, self.mean[name], self.std[name]


def hull_centroid(hull: ConvexHull) -> np.ndarray:
    """Volume centroid of a 3-D convex hull (fan of tetrahedra from an interior point)."""
    pts = hull.points[hull.vertices]
    apex = pts.mean(axis=0)
    tri = hull.points[hull.simplices]
    vol = np.abs(np.einsum("ij,ij->i", tri[:, 0] - apex, np.cross(tri[:, 1] - apex, tri[:, 2] - apex))) / 6.0
    cent = (tri.sum(axis=1) + apex) / 4.0
    return (vol[:, None] * cent).sum(axis=0) / vol.sum()


class MapIndex:
    """Nearest-neighbour tree and convex hull of a map, built once and reused across scans."""

    def __init__(self, map_cloud):
        self.points = np.asarray(getattr(map_cloud, "positions", map_cloud), dtype=float)
        if len(self.points) == 0:
            raise DegenerateReportError("map cloud is empty")
        self.tree = cKDTree(self.points)
        self._hull = None

    def _hull_planes(self):
        if self._hull is None:
            hull = ConvexHull(self.points)
            self._hull = (hull.equations[:, :3], hull.equations[:, 3], hull_centroid(hull))
        return self._hull

    def inside(self, points, inflation: float, tol: float = 1e-9) -> np.ndarray:
        """Mask of points inside the hull scaled by ``1 + inflation`` about its centroid."""
        points = np.asarray(points, dtype=float)
        if not np.isfinite(inflation):
            return np.ones(len(points), dtype=bool)
        n, b, c = self._hull_planes()
        # facet n.x + b <= 0 scaled about c: n.y - n.c + k (n.c + b) <= 0
        nc = n @ c
        lhs = points @ n.T - nc + (1.0 + inflation) * (nc + b)
        return np.all(lhs <= tol, axis=1)


def inside_inflated_hull(points, hull_points, inflation: float) -> np.ndarray:
    return MapIndex(hull_points).inside(points, inflation)


def chamfer(scan_registered: PointCloud, map_cloud, inflation: float = 0.05) -> ChamferReport:
    """Mean squared nearest-map-point distance over scan points inside the inflated map hull.

    ``map_cloud`` may be a :class:`MapIndex` to reuse its tree and hull.
    Pass ``inflation=float('inf')`` to keep every point.
    """
    scan = np.asarray(getattr(scan_registered, "positions", scan_registered), dtype=float)
    if len(scan) == 0:
        raise DegenerateReportError("scan cloud is empty")
    index = map_cloud if isinstance(map_cloud, MapIndex) else MapIndex(map_cloud)
    keep = index.inside(scan, inflation)
    if not np.any(keep):
        raise DegenerateReportError("every scan point lies outside the inflated map hull")
    d, _ = index.tree.query(scan[keep])
    return ChamferReport(float(np.sum(d**2) / keep.sum()), int(keep.sum()), int((~keep).sum()), float(inflation))


def pose_errors(estimate, truth, forward_axis=(1.0, 0.0, 0.0)) -> dict:
    """Start-of-scan pose error of one estimate: translations in m, angles in degrees."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    axis = np.asarray(forward_axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    dt = est[X0] - tru[X0]
    R_err = euler_to_rotation(tru[TH0]).T @ euler_to_rotation(est[TH0])
    roll, pitch, yaw = np.rad2deg(rotation_to_euler(R_err))
    return dict(x=dt[0], y=dt[1], z=dt[2], forward=float(dt @ axis), roll=roll, pitch=pitch, yaw=yaw)


def error_stats(results, truths, forward_axis=(1.0, 0.0, 0.0)) -> ErrorStats:
    """Mean and sample standard deviation of pose errors over a batch.

    ``results`` may hold :class:`RegistrationResult` objects or bare state
    vectors.
    """
    if len(results) != len(truths):
        raise ValueError(f"{len(results)} results but {len(truths)} truths")
    if len(results) == 0:
        raise ValueError("error statistics need at least one sample")
    rows = [pose_errors(getattr(r, "state", r), t, forward_axis) for r, t in zip(results, truths)]
    mean, std = {}, {}
    for name, _ in COMPONENTS:
        v = np.array([row[name] for row in rows])
        mean[name] = float(v.mean())
        std[name] = float(v.std(ddof=1)) if len(v) > 1 else float("nan")
    return ErrorStats(mean, std, len(rows))
