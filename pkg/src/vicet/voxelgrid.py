"""Sensor-centred spherical voxels and the per-voxel statistics the solver consumes.

The grid lives in the frame of the current sensor estimate at scan start:
origin at ``x0`` and azimuth zero along the sensor's scan-start axis. Azimuth
bins therefore begin exactly at 0, so the start and the end of a sweep never
share a voxel, and a voxel's azimuthal midpoint maps directly to a scan time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vicet.cloud import scaled_time_from_azimuth

MIN_VOXELS = 5


class EmptyGridError(ValueError):
    pass


class UnderConstrainedError(ValueError):
    pass


@dataclass(frozen=True)
class SphericalGridSpec:
    azimuth_bins: int = 36
    elevation_bins: int = 10
    elevation_min: float = float(np.deg2rad(-31.5))
    elevation_max: float = float(np.deg2rad(16.5))
    radial_edges: tuple = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
    min_points: int = 10
    tau: float = 0.5
    cov_floor: float = 1e-8

    def __post_init__(self):
        edges = tuple(float(e) for e in self.radial_edges)
        object.__setattr__(self, "radial_edges", edges)
        if self.azimuth_bins < 1 or self.elevation_bins < 1:
            raise ValueError("bin counts must be positive")
        if len(edges) < 2 or np.any(np.diff(edges) <= 0) or edges[0] < 0:
            raise ValueError("radial_edges must be non-negative and strictly increasing")
        if not self.elevation_min < self.elevation_max:
            raise ValueError("elevation_min must be below elevation_max")
        if self.min_points < 4:
            raise ValueError("min_points must be at least 4")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def azimuth_width(self) -> float:
        return 2 * np.pi / self.azimuth_bins

    @property
    def elevation_width(self) -> float:
        return (self.elevation_max - self.elevation_min) / self.elevation_bins

    @property
    def radial_bins(self) -> int:
        return len(self.radial_edges) - 1

    def unflatten(self, ids):
        ids = np.asarray(ids)
        ir = ids % self.radial_bins
        ie = (ids // self.radial_bins) % self.elevation_bins
        ia = ids // (self.radial_bins * self.elevation_bins)
        return np.stack([ia, ie, ir], axis=-1)


@dataclass(frozen=True)
class GridFrame:
    """Placement of the grid in the map: origin and rotation (grid axes -> map)."""

    origin: np.ndarray
    rotation: np.ndarray

    def key(self) -> bytes:
        return np.ascontiguousarray(self.origin).tobytes() + np.ascontiguousarray(self.rotation).tobytes()


def spherical_coordinates(points, frame: GridFrame):
    """Range, azimuth in ``[0, 2*pi)`` and elevation of map points in the grid frame."""
    q = (np.asarray(points, dtype=float) - frame.origin) @ frame.rotation
    r = np.linalg.norm(q, axis=1)
    az = np.mod(np.arctan2(q[:, 1], q[:, 0]), 2 * np.pi)
    # mod can round a tiny negative angle up to exactly 2*pi
    az = np.where(az >= 2 * np.pi, 0.0, az)
    with np.errstate(invalid="ignore", divide="ignore"):
        el = np.arcsin(np.clip(q[:, 2] / r, -1.0, 1.0))
    return r, az, el


def voxel_ids(points, spec: SphericalGridSpec, frame: GridFrame) -> np.ndarray:
    """Flat voxel id for each point, ``-1`` where the point falls outside the grid."""
    r, az, el = spherical_coordinates(points, frame)
    ia = np.minimum((az / spec.azimuth_width).astype(np.int64), spec.azimuth_bins - 1)
    ie = np.floor((el - spec.elevation_min) / spec.elevation_width)
    ir = np.searchsorted(spec.radial_edges, r, side="right") - 1
    ok = (ie >= 0) & (ie < spec.elevation_bins) & (ir >= 0) & (ir < spec.radial_bins) & (r > 0)
    ids = (ia * spec.elevation_bins + np.where(ok, ie, 0).astype(np.int64)) * spec.radial_bins + ir
    return np.where(ok, ids, -1)


@dataclass(frozen=True)
class Moments:
    """Sample mean and covariance (``n - 1`` normalization) per occupied voxel."""

    ids: np.ndarray
    counts: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


def _grouped_moments(points, ids, extra=()):
    """Moments of ``points`` grouped by ``ids`` (already filtered to valid ids).

    ``extra`` arrays are averaged per group too. Groups come out sorted by id,
    so the result does not depend on point order.
    """
    uniq, inv, counts = np.unique(ids, return_inverse=True, return_counts=True)
    n = len(uniq)
    means = np.stack([np.bincount(inv, points[:, k], n) for k in range(3)], axis=1) / counts[:, None]
    d = points - means[inv]
    covs = np.empty((n, 3, 3))
    for i in range(3):
        for j in range(i, 3):
            c = np.bincount(inv, d[:, i] * d[:, j], n)
            covs[:, i, j] = c
            covs[:, j, i] = c
    with np.errstate(invalid="ignore", divide="ignore"):
        covs /= np.maximum(counts - 1, 1)[:, None, None]
    extras = [np.stack([np.bincount(inv, e[:, k], n) for k in range(e.shape[1])], axis=1) / counts[:, None] for e in extra]
    return uniq, counts, means, covs, inv, extras


def voxelize(points, spec: SphericalGridSpec, frame: GridFrame) -> Moments:
    """Per-voxel moments of a map-frame cloud; voxels under ``min_points`` are dropped."""
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        raise EmptyGridError("cannot voxelize an empty cloud")
    ids = voxel_ids(points, spec, frame)
    ok = ids >= 0
    if not np.any(ok):
        raise EmptyGridError("no point falls inside the grid")
    uniq, counts, means, covs, _, _ = _grouped_moments(points[ok], ids[ok])
    keep = counts >= spec.min_points
    if not np.any(keep):
        raise EmptyGridError(f"no voxel holds at least {spec.min_points} points")
    return Moments(uniq[keep], counts[keep], means[keep], covs[keep])


@dataclass(frozen=True)
class VoxelStats:
    """Matched map/scan statistics for the ``J`` voxels used in one solve.

    ``mu_scan_body`` is the mean of the raw measurements; ``mu_scan_mapped``
    is the mean of the same points after mapping through the current state.
    ``cov_scan`` is expressed in the sensor frame at ``s_mid`` so that
    ``R(s_mid) @ cov_scan @ R(s_mid).T`` is the mapped-point covariance.
    ``retained`` holds the kept eigen-directions of ``cov_map`` as columns,
    zero-padded to three; ``k`` counts them.
    """

    ids: np.ndarray
    index: np.ndarray
    mu_map: np.ndarray
    cov_map: np.ndarray
    n_map: np.ndarray
    mu_scan_body: np.ndarray
    mu_scan_mapped: np.ndarray
    cov_scan: np.ndarray
    n_scan: np.ndarray
    s_mid: np.ndarray
    retained: np.ndarray
    k: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def projectors(self) -> np.ndarray:
        return np.einsum("jik,jlk->jil", self.retained, self.retained)

    def select(self, mask) -> "VoxelStats":
        return VoxelStats(**{name: getattr(self, name)[mask] for name in self.__dataclass_fields__})


def voxel_midpoint_time(ids, spec: SphericalGridSpec) -> np.ndarray:
    ia = spec.unflatten(ids)[..., 0]
    return scaled_time_from_azimuth((ia + 0.5) * spec.azimuth_width)


def associate(
    map_moments: Moments,
    scan_body,
    scan_mapped,
    s_rotations,
    spec: SphericalGridSpec,
    frame: GridFrame,
) -> VoxelStats:
    """Pair map voxels with scan voxels holding at least ``min_points`` each.

    ``scan_mapped`` decides membership; ``scan_body`` supplies the raw means.
    ``s_rotations`` is a callable returning the sensor rotations at an array
    of times, used to express the scan covariance at each voxel's midpoint.
    Extended directions are suppressed before returning.
    """
    scan_body = np.asarray(scan_body, dtype=float)
    scan_mapped = np.asarray(scan_mapped, dtype=float)
    ids = voxel_ids(scan_mapped, spec, frame)
    ok = ids >= 0
    if not np.any(ok):
        raise UnderConstrainedError("no scan point falls inside the grid")
    uniq, counts, mapped_means, mapped_covs, _, (body_means,) = _grouped_moments(
        scan_mapped[ok], ids[ok], extra=(scan_body[ok],)
    )
    keep = counts >= spec.min_points
    common, i_map, i_scan = np.intersect1d(map_moments.ids, uniq[keep], assume_unique=True, return_indices=True)
    i_scan = np.flatnonzero(keep)[i_scan]
    if len(common) < MIN_VOXELS:
        raise UnderConstrainedError(f"only {len(common)} voxels shared by map and scan (need {MIN_VOXELS})")

    s_mid = voxel_midpoint_time(common, spec)
    R_mid = s_rotations(s_mid)
    cov_scan = np.einsum("jki,jkl,jlm->jim", R_mid, mapped_covs[i_scan], R_mid)
    stats = VoxelStats(
        ids=common,
        index=spec.unflatten(common),
        mu_map=map_moments.means[i_map],
        cov_map=map_moments.covs[i_map],
        n_map=map_moments.counts[i_map],
        mu_scan_body=body_means[i_scan],
        mu_scan_mapped=mapped_means[i_scan],
        cov_scan=cov_scan,
        n_scan=counts[i_scan],
        s_mid=s_mid,
        retained=np.zeros((len(common), 3, 3)),
        k=np.zeros(len(common), dtype=int),
    )
    stats = suppress_extended_surfaces(stats, spec, frame)
    stats = stats.select(stats.k > 0)
    if len(stats) < MIN_VOXELS:
        raise UnderConstrainedError(f"only {len(stats)} voxels left after surface suppression")
    return stats


def boundary_distances(points, ids, directions, spec: SphericalGridSpec, frame: GridFrame) -> np.ndarray:
    """Distance from each point to its voxel boundary along ``+/-`` each direction.

    ``points`` is ``(J, 3)``, ``directions`` is ``(J, 3, D)`` with unit
    columns in the map frame; returns ``(J, D)``, the nearer of the two
    exits. The cell is treated locally as a box with radial thickness,
    azimuthal arc and elevation arc evaluated at the point's own range.
    """
    idx = spec.unflatten(ids)
    r, az, el = spherical_coordinates(points, frame)
    edges = np.asarray(spec.radial_edges)
    a0 = idx[:, 0] * spec.azimuth_width
    e0 = spec.elevation_min + idx[:, 1] * spec.elevation_width
    r0, r1 = edges[idx[:, 2]], edges[idx[:, 2] + 1]
    horiz = r * np.cos(el)
    # (J, 3 local axes, 2 sides): room to move toward the lower / upper bound
    room = np.stack(
        [
            np.stack([r - r0, r1 - r], axis=-1),
            np.stack([(az - a0) * horiz, (a0 + spec.azimuth_width - az) * horiz], axis=-1),
            np.stack([(el - e0) * r, (e0 + spec.elevation_width - el) * r], axis=-1),
        ],
        axis=1,
    )
    room = np.maximum(room, 0.0)

    q = (points - frame.origin) @ frame.rotation
    e_r = q / r[:, None]
    e_az = np.stack([-np.sin(az), np.cos(az), np.zeros_like(az)], axis=1)
    e_el = np.cross(e_r, e_az)
    local = np.stack([e_r, e_az, e_el], axis=1)  # (J, 3 axes, 3 grid coords)
    comps = np.einsum("jag,gm,jmd->jad", local, frame.rotation.T, directions)

    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.where(comps > 0, room[:, :, 1:2] / comps, np.where(comps < 0, room[:, :, 0:1] / -comps, np.inf))
        down = np.where(comps > 0, room[:, :, 0:1] / comps, np.where(comps < 0, room[:, :, 1:2] / -comps, np.inf))
    return np.minimum(up.min(axis=1), down.min(axis=1))


def suppress_extended_surfaces(stats: VoxelStats, spec: SphericalGridSpec, frame: GridFrame) -> VoxelStats:
    """Drop eigen-directions of the map covariance that run into the voxel walls.

    A direction is suppressed when its standard deviation exceeds ``tau``
    times the distance from the map mean to the cell boundary along it. With
    the default ``tau = 0.5`` that is a two-sigma ellipsoid crossing the
    boundary: walls keep only their normal, edges keep two directions.
    """
    evals, evecs = np.linalg.eigh(stats.cov_map)
    sigma = np.sqrt(np.maximum(evals, 0.0))
    reach = boundary_distances(stats.mu_map, stats.ids, evecs, spec, frame)
    keep = sigma <= spec.tau * reach
    retained = np.where(keep[:, None, :], evecs, 0.0)
    # move kept columns to the front so retained[:, :, :k] is the basis
    order = np.argsort(~keep, axis=1, kind="stable")
    retained = np.take_along_axis(retained, order[:, None, :], axis=2)
    fields = dict(stats.__dict__)
    fields.update(retained=retained, k=keep.sum(axis=1))
    return VoxelStats(**fields)
