"""Ray-cast a spinning LIDAR inside a box room while the sensor moves.

Each azimuth step ``k`` of ``N`` fires all elevation channels at the same
scaled time ``s = k / N``. The beam azimuth is fixed in the stator frame and
the stator pose at that instant comes from :func:`vicet.geometry.pose_at_time`,
so a moving sensor produces a raw cloud that is warped when read as a single
rigid frame. Unwarping with the true state recovers the room exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from vicet.cloud import PointCloud, unwarp
from vicet.geometry import make_state, pose_at_time, zero_distortion
from vicet.keyvalue import ConfigError, floats, read_keyvalue

SLAB_EPS = 1e-12


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        h = tuple(float(v) for v in self.half_extents)
        if len(c) != 3 or len(h) != 3 or min(h) <= 0:
            raise ValueError("box needs a 3-vector center and positive half extents")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extents", h)


@dataclass(frozen=True)
class RoomScene:
    """Axis-aligned room centered on the origin, with optional box obstacles."""

    half_extents: tuple = (5.0, 5.0, 5.0)
    obstacles: tuple = ()

    def __post_init__(self):
        h = tuple(float(v) for v in self.half_extents)
        if len(h) != 3 or min(h) <= 0:
            raise ValueError("room half extents must be three positive numbers")
        object.__setattr__(self, "half_extents", h)
        object.__setattr__(self, "obstacles", tuple(self.obstacles))

    def contains(self, point) -> bool:
        p = np.asarray(point, dtype=float)
        if np.any(np.abs(p) >= self.half_extents):
            return False
        for box in self.obstacles:
            if np.all(np.abs(p - box.center) <= box.half_extents):
                return False
        return True


def _default_elevations():
    return tuple(np.deg2rad(np.linspace(-30.0, 15.0, 16)))


@dataclass(frozen=True)
class BeamPattern:
    azimuth_steps: int = 360
    elevation_angles: tuple = field(default_factory=_default_elevations)

    def __post_init__(self):
        el = tuple(float(e) for e in np.atleast_1d(self.elevation_angles))
        if int(self.azimuth_steps) < 8:
            raise ValueError("need at least 8 azimuth steps per revolution")
        if not el or any(abs(e) >= np.pi / 2 for e in el):
            raise ValueError("elevation angles must lie strictly inside (-pi/2, pi/2)")
        object.__setattr__(self, "azimuth_steps", int(self.azimuth_steps))
        object.__setattr__(self, "elevation_angles", el)

    @classmethod
    def uniform(cls, azimuth_steps: int, el_min_deg: float, el_max_deg: float, count: int):
        return cls(azimuth_steps, tuple(np.deg2rad(np.linspace(el_min_deg, el_max_deg, count))))


def _room_exit_distance(origins, dirs, half):
    # Inside the room every ray leaves through the face it points toward.
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (np.sign(dirs) * half - origins) / dirs
    t = np.where(np.abs(dirs) > SLAB_EPS, t, np.inf)
    return t.min(axis=1)


def _box_entry_distance(origins, dirs, box: Box):
    c = np.asarray(box.center)
    h = np.asarray(box.half_extents)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (c - h - origins) / dirs
        t2 = (c + h - origins) / dirs
    parallel = np.abs(dirs) <= SLAB_EPS
    inside_slab = np.abs(origins - c) <= h
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_near <= t_far + SLAB_EPS) & (t_near > SLAB_EPS)
    return np.where(hit, t_near, np.inf)


def cast_rays(scene: RoomScene, origins, dirs) -> np.ndarray:
    """Distance to the nearest surface along each unit ray (``inf`` on a miss)."""
    t = _room_exit_distance(origins, dirs, np.asarray(scene.half_extents))
    for box in scene.obstacles:
        t = np.minimum(t, _box_entry_distance(origins, dirs, box))
    return t


def _check_trajectory(scene: RoomScene, X):
    start = pose_at_time(X, 0.0)[1]
    end = pose_at_time(X, 1.0)[1]
    for label, point in (("start", start), ("end", end)):
        if not scene.contains(point):
            raise SimulationError(f"sensor {label} position {point} is outside the free space of the room")
    # the straight path must also clear every obstacle
    path = start[None, :] + np.linspace(0.0, 1.0, 257)[:, None] * (end - start)
    for p in path:
        if not scene.contains(p):
            raise SimulationError("sensor trajectory passes through an obstacle")


def simulate_scan(
    scene: RoomScene,
    X_true,
    pattern: BeamPattern | None = None,
    noise_sigma: float = 0.0,
    noise_model: str = "isotropic",
    rng=None,
    period: float = 0.1,
) -> PointCloud:
    """Raw body-frame scan taken while the sensor follows ``X_true``.

    Points are ordered by (time, elevation). Each point is the measurement
    in the stator frame at its own time. ``noise_model`` is ``"isotropic"``
    (3-D Gaussian on each point) or ``"range"`` (Gaussian along the beam).
    """
    pattern = pattern or BeamPattern()
    X_true = np.asarray(X_true, dtype=float)
    _check_trajectory(scene, X_true)

    n_az = pattern.azimuth_steps
    el = np.asarray(pattern.elevation_angles)
    s_steps = np.arange(n_az) / n_az
    az = 2 * np.pi * s_steps
    # (n_az, n_el, 3) beam directions in the stator frame
    d_body = np.stack(
        [
            np.cos(el)[None, :] * np.cos(az)[:, None],
            np.cos(el)[None, :] * np.sin(az)[:, None],
            np.broadcast_to(np.sin(el)[None, :], (n_az, len(el))),
        ],
        axis=-1,
    )
    R, m = pose_at_time(X_true, s_steps)
    d_world = np.einsum("kij,kej->kei", R, d_body).reshape(-1, 3)
    origins = np.repeat(m, len(el), axis=0)
    ranges = cast_rays(scene, origins, d_world)

    d_body = d_body.reshape(-1, 3)
    s = np.repeat(s_steps, len(el))
    keep = np.isfinite(ranges)
    ranges, d_body, s = ranges[keep], d_body[keep], s[keep]

    if noise_sigma > 0:
        rng = np.random.default_rng(rng)
        if noise_model == "range":
            ranges = ranges + rng.normal(0.0, noise_sigma, size=ranges.shape)
            points = ranges[:, None] * d_body
        elif noise_model == "isotropic":
            points = ranges[:, None] * d_body + rng.normal(0.0, noise_sigma, size=d_body.shape)
        else:
            raise ValueError(f"unknown noise model {noise_model!r}")
    else:
        points = ranges[:, None] * d_body

    if len(points) == 0:
        raise SimulationError("no beam hit any surface")
    return PointCloud(points, s, "body", period)


def simulate_map(scene: RoomScene, pattern: BeamPattern | None = None, poses=None) -> PointCloud:
    """Undistorted map: union of static scans from one or more vantage poses.

    Each pose is a state vector (only its rigid part is used) or a 6-vector
    ``[x, y, z, roll, pitch, yaw]``. Map points carry ``s = 0``.
    """
    pattern = pattern or BeamPattern()
    if poses is None:
        poses = [np.zeros(12)]
    elif np.ndim(poses) == 1:
        poses = [poses]
    parts = []
    for pose in poses:
        pose = np.asarray(pose, dtype=float)
        X = make_state(x0=pose[:3], theta0=pose[3:6]) if pose.size == 6 else zero_distortion(pose)
        parts.append(unwarp(simulate_scan(scene, X, pattern), X).positions)
    pts = np.concatenate(parts)
    return PointCloud(pts, np.zeros(len(pts)), "map")


def _box_surface_distance(points, center, half):
    q = np.abs(points - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.abs(np.minimum(q.max(axis=1), 0.0))
    return outside + inside


def plane_residuals(cloud: PointCloud, scene: RoomScene) -> np.ndarray:
    """Distance from each map-frame point to the nearest scene surface."""
    pts = cloud.positions
    d = _box_surface_distance(pts, np.zeros(3), np.asarray(scene.half_extents))
    for box in scene.obstacles:
        d = np.minimum(d, _box_surface_distance(pts, np.asarray(box.center), np.asarray(box.half_extents)))
    return d


@dataclass
class SceneFile:
    """Contents of a scene description file."""

    scene: RoomScene
    pattern: BeamPattern
    state: np.ndarray | None = None
    noise_sigma: float = 0.0
    noise_model: str = "isotropic"
    seed: int | None = None
    period: float = 0.1
    map_poses: list = field(default_factory=list)
    map_pattern: BeamPattern = field(default_factory=BeamPattern)


def _pattern_from(fields: dict, prefix: str, default: BeamPattern) -> BeamPattern:
    keys = [prefix + k for k in ("azimuth_steps", "elevation_min_deg", "elevation_max_deg", "elevation_count")]
    if not any(k in fields for k in keys) and prefix + "elevation_angles_deg" not in fields:
        return default
    n_az = int(fields.get(keys[0], default.azimuth_steps))
    if prefix + "elevation_angles_deg" in fields:
        el = np.deg2rad(floats(fields[prefix + "elevation_angles_deg"], name="elevation_angles_deg"))
        return BeamPattern(n_az, tuple(el))
    el_default = np.rad2deg(default.elevation_angles)
    return BeamPattern.uniform(
        n_az,
        float(fields.get(keys[1], el_default.min())),
        float(fields.get(keys[2], el_default.max())),
        int(fields.get(keys[3], len(el_default))),
    )


def load_scene(path) -> SceneFile:
    """Read a scene file.

    Recognized keys: ``half_extents``, ``obstacle`` (repeatable,
    ``cx, cy, cz, hx, hy, hz``), ``azimuth_steps``, ``elevation_min_deg``,
    ``elevation_max_deg``, ``elevation_count`` or ``elevation_angles_deg``,
    ``state`` (12 numbers, radians for angles), ``noise_sigma``,
    ``noise_model``, ``seed``, ``period``, ``map_pose`` (repeatable 6-vector)
    and ``map_``-prefixed pattern keys for the map's denser pattern.
    """
    fields = read_keyvalue(path, repeatable=("obstacle", "map_pose"))
    known = {
        "half_extents", "obstacle", "azimuth_steps", "elevation_min_deg", "elevation_max_deg",
        "elevation_count", "elevation_angles_deg", "state", "noise_sigma", "noise_model", "seed",
        "period", "map_pose", "map_azimuth_steps", "map_elevation_min_deg", "map_elevation_max_deg",
        "map_elevation_count", "map_elevation_angles_deg",
    }
    unknown = set(fields) - known
    if unknown:
        raise ConfigError(f"unknown scene keys: {', '.join(sorted(unknown))}")
    try:
        obstacles = []
        for spec in fields.get("obstacle", []):
            v = floats(spec, 6, "obstacle")
            obstacles.append(Box(v[:3], v[3:]))
        scene = RoomScene(tuple(floats(fields.get("half_extents", "5 5 5"), 3, "half_extents")), tuple(obstacles))
        pattern = _pattern_from(fields, "", BeamPattern())
        map_pattern = _pattern_from(fields, "map_", pattern)
        state = np.array(floats(fields["state"], 12, "state")) if "state" in fields else None
        return SceneFile(
            scene=scene,
            pattern=pattern,
            state=state,
            noise_sigma=float(fields.get("noise_sigma", 0.0)),
            noise_model=fields.get("noise_model", "isotropic"),
            seed=int(fields["seed"]) if "seed" in fields else None,
            period=float(fields.get("period", 0.1)),
            map_poses=[np.array(floats(p, 6, "map_pose")) for p in fields.get("map_pose", [])],
            map_pattern=map_pattern,
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
