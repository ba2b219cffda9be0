"""Scan-to-map estimators: VICET (12 states), NDT (6 rigid states) and point-to-point ICP.

VICET and NDT share one pipeline. Each iteration maps the raw scan through
the current state, voxelizes map and scan on a spherical grid centred on the
sensor, and solves a weighted least-squares problem for a state correction
from the differences of voxel means. NDT is the same pipeline with the
motion-change columns removed, so its change states stay at zero.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from vicet.cloud import PointCloud
from vicet.geometry import (
    DTH,
    DX,
    RIGID_COLUMNS,
    TH0,
    X0,
    apply_state,
    euler_to_rotation,
    jacobian_block,
    make_state,
    pose_at_time,
    retract,
    rotation_to_euler,
    skew,
    zero_distortion,
)
from vicet.keyvalue import ConfigError, floats, read_keyvalue
from vicet.voxelgrid import (
    GridFrame,
    Moments,
    SphericalGridSpec,
    UnderConstrainedError,
    VoxelStats,
    associate,
    voxel_ids,
    voxelize,
)

ALL_COLUMNS = np.arange(12)
METHODS = ("vicet", "ndt", "icp")


class ConditioningError(ValueError):
    """The normal matrix is too close to singular to trust a solution.

    ``direction`` is the (unit, state-space) eigenvector belonging to the
    smallest eigenvalue, i.e. the combination of states the data cannot
    separate.
    """

    def __init__(self, message: str, condition: float, direction: np.ndarray):
        super().__init__(message)
        self.condition = condition
        self.direction = direction


@dataclass(frozen=True)
class RegistrationConfig:
    method: str = "vicet"
    grid: SphericalGridSpec = field(default_factory=SphericalGridSpec)
    max_iterations: int = 60
    translation_tol: float = 1e-4
    rotation_tol: float = 1e-5
    lm_lambda0: float = 1e-3
    lm_up: float = 10.0
    lm_down: float = 3.0
    lm_lambda_max: float = 1e8
    cond_limit: float = 1e10
    min_time_spread: float = 0.05
    icp_gate: float = 2.0
    seed_with_ndt: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.translation_tol <= 0 or self.rotation_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class RegistrationResult:
    state: np.ndarray
    predicted_covariance: np.ndarray
    iterations: int
    converged: bool
    cost: float
    method: str = "vicet"
    trace: tuple = ()

    @property
    def rigid_only(self) -> bool:
        return self.predicted_covariance.shape == (6, 6)

    def covariance12(self) -> np.ndarray:
        """Predicted covariance in the 12-state layout (zeros for frozen states)."""
        if not self.rigid_only:
            return self.predicted_covariance
        full = np.zeros((12, 12))
        full[np.ix_(RIGID_COLUMNS, RIGID_COLUMNS)] = self.predicted_covariance
        return full


@dataclass(frozen=True)
class LinearSystem:
    """Stacked per-voxel blocks: ``H`` is ``(3J, 12)``, ``y`` is ``(3J,)``.

    ``W`` keeps only the ``(J, 3, 3)`` diagonal blocks of the block-diagonal
    weight matrix; :meth:`dense_weight` expands it.
    """

    H: np.ndarray
    y: np.ndarray
    W: np.ndarray
    stats: VoxelStats

    @property
    def J(self) -> int:
        return len(self.W)

    def dense_weight(self) -> np.ndarray:
        from scipy.linalg import block_diag

        return block_diag(*self.W)

    def blocks(self):
        return self.H.reshape(self.J, 3, 12), self.y.reshape(self.J, 3)


class MapGrid:
    """Map cloud plus a small cache of its voxel moments keyed by grid placement."""

    def __init__(self, cloud: PointCloud, spec: SphericalGridSpec, cache_size: int = 4):
        self.points = np.asarray(cloud.positions if isinstance(cloud, PointCloud) else cloud, dtype=float)
        self.spec = spec
        self._cache: dict = {}
        self._cache_size = cache_size

    def moments(self, frame: GridFrame) -> Moments:
        key = frame.key()
        hit = self._cache.get(key)
        if hit is None:
            hit = voxelize(self.points, self.spec, frame)
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = hit
        return hit


def grid_frame(X) -> GridFrame:
    X = np.asarray(X, dtype=float)
    return GridFrame(X[X0].copy(), euler_to_rotation(X[TH0]))


def weight_blocks(stats: VoxelStats, R_mid, cov_floor: float = 1e-8) -> np.ndarray:
    """Inverse covariance of each voxel's mean difference, inside its retained subspace.

    Returns ``V (V^T C V)^-1 V^T`` per voxel with
    ``C = Sigma_map / n_map + R Sigma_scan R^T / n_scan``.
    """
    floor = cov_floor * np.eye(3)
    C = (stats.cov_map + floor) / stats.n_map[:, None, None]
    C = C + np.einsum("jik,jkl,jml->jim", R_mid, stats.cov_scan + floor, R_mid) / stats.n_scan[:, None, None]
    V = stats.retained
    padded = (np.arange(3)[None, :] >= stats.k[:, None]).astype(float)
    inner = np.einsum("jki,jkl,jlm->jim", V, C, V) + padded[:, :, None] * np.eye(3)
    W = np.einsum("jik,jkl,jml->jim", V, np.linalg.inv(inner), V)
    return 0.5 * (W + np.transpose(W, (0, 2, 1)))


def build_system(map_grid: MapGrid, scan: PointCloud, X) -> LinearSystem:
    """Linearize the voxel-mean residuals about the state ``X``.

    The residual of voxel ``j`` is the map mean minus the mean of the scan
    points mapped through ``X``; its Jacobian uses the pose at the voxel's
    midpoint time. Both are projected onto the voxel's retained directions.
    """
    X = np.asarray(X, dtype=float)
    if len(scan) == 0:
        raise UnderConstrainedError("empty scan")
    frame = grid_frame(X)
    mapped = apply_state(scan.positions, scan.s, X)
    stats = associate(
        map_grid.moments(frame),
        scan.positions,
        mapped,
        lambda s: pose_at_time(X, s)[0],
        map_grid.spec,
        frame,
    )
    R_mid, m_mid = pose_at_time(X, stats.s_mid)
    lever = np.einsum("jik,jk->ji", R_mid, stats.mu_scan_body)
    Hj = jacobian_block(lever + m_mid, stats.s_mid, m_mid)
    yj = stats.mu_map - stats.mu_scan_mapped
    P = stats.projectors
    Hj = P @ Hj
    yj = np.einsum("jik,jk->ji", P, yj)
    W = weight_blocks(stats, R_mid, map_grid.spec.cov_floor)
    return LinearSystem(Hj.reshape(-1, 12), yj.reshape(-1), W, stats)


def normal_equations(system: LinearSystem, columns=ALL_COLUMNS):
    Hj, yj = system.blocks()
    Hj = Hj[:, :, columns]
    WH = system.W @ Hj
    N = np.einsum("jki,jkl->il", Hj, WH)
    g = np.einsum("jki,jk->i", WH, yj)
    return 0.5 * (N + N.T), g


def weighted_cost(system: LinearSystem) -> float:
    _, yj = system.blocks()
    return float(np.einsum("ji,jik,jk->", yj, system.W, yj))


def frozen_cost(system: LinearSystem, map_grid: MapGrid, scan: PointCloud, X):
    """Cost as a function of the state with the association of ``system`` held fixed.

    ``system`` must have been built at ``X``. The returned callable re-maps the
    same scan points of each paired voxel and keeps the map means and weights,
    so it is smooth in the state and equals :func:`weighted_cost` at ``X``.
    Re-binning, by contrast, makes the cost jump whenever a point changes voxel.
    """
    stats = system.stats
    ids = voxel_ids(apply_state(scan.positions, scan.s, X), map_grid.spec, grid_frame(X))
    slot = np.searchsorted(stats.ids, ids).clip(0, len(stats.ids) - 1)
    member = (ids >= 0) & (stats.ids[slot] == ids)
    slot, pts, s = slot[member], scan.positions[member], scan.s[member]
    counts = np.bincount(slot, minlength=len(stats.ids))[:, None]
    P = stats.projectors

    def cost(X_try) -> float:
        mapped = apply_state(pts, s, X_try)
        means = np.stack([np.bincount(slot, mapped[:, c], len(stats.ids)) for c in range(3)], axis=1) / counts
        y = np.einsum("jik,jk->ji", P, stats.mu_map - means)
        return float(np.einsum("ji,jik,jk->", y, system.W, y))

    return cost


def _equilibrate(N):
    d = np.sqrt(np.clip(np.diag(N), np.finfo(float).tiny, None))
    return N / np.outer(d, d), d


def weakest_direction(N, lam: float = 0.0) -> np.ndarray:
    """Unit state-space direction with the least information in ``N + lam*diag(N)``."""
    A = N + lam * np.diag(np.diag(N))
    Ae, d = _equilibrate(A)
    _, vecs = np.linalg.eigh(Ae)
    z = vecs[:, 0] / d
    return z / np.linalg.norm(z)


def time_spread(system: LinearSystem) -> float:
    """Information-weighted standard deviation of the voxel midpoint times."""
    w = np.trace(system.W, axis1=1, axis2=2)
    s = system.stats.s_mid
    mean = np.average(s, weights=w)
    return float(np.sqrt(np.average((s - mean) ** 2, weights=w)))


def check_conditioning(
    system: LinearSystem,
    N,
    columns=ALL_COLUMNS,
    cond_limit: float = 1e10,
    min_time_spread: float = 0.05,
    lam: float = 0.0,
) -> float:
    """Raise :class:`ConditioningError` for a system that cannot separate its states.

    Two tests: the condition number of the Jacobi-scaled normal matrix, and,
    when the change states are solved for, the spread of voxel times. A
    narrow spread makes ``x0`` and ``dx`` (and ``theta0`` and ``dtheta``)
    nearly interchangeable long before the matrix is numerically singular.
    Returns the condition number.
    """
    Ne, _ = _equilibrate(N)
    cond = float(np.linalg.cond(Ne))
    if not np.isfinite(cond) or cond > cond_limit:
        raise ConditioningError(
            f"normal matrix condition number {cond:.3g} exceeds {cond_limit:.3g}",
            cond,
            _embed(weakest_direction(N, lam), columns),
        )
    if np.isin(DX.start, columns):
        spread = time_spread(system)
        if spread < min_time_spread:
            raise ConditioningError(
                f"voxel times span too little of the sweep (std {spread:.3g} < {min_time_spread:.3g});"
                " start and change states are not separable",
                cond,
                _embed(weakest_direction(N, lam), columns),
            )
    return cond


def _embed(sub, columns) -> np.ndarray:
    full = np.zeros(12)
    full[columns] = sub
    return full


def solve_wls(
    system: LinearSystem,
    lam: float = 0.0,
    columns=ALL_COLUMNS,
    cond_limit: float = 1e10,
    min_time_spread: float = 0.05,
) -> np.ndarray:
    """Damped weighted least-squares correction ``(N + lam*diag(N))^-1 H^T W y``.

    ``lam = 0`` is the plain weighted least-squares solution. Returns a
    12-vector with zeros in columns that are not solved for.
    """
    columns = np.asarray(columns)
    N, g = normal_equations(system, columns)
    check_conditioning(system, N, columns, cond_limit, min_time_spread, lam)
    A = N + lam * np.diag(np.diag(N))
    return _embed(np.linalg.solve(A, g), columns)


def _step_small(delta, cfg: RegistrationConfig) -> bool:
    return (
        np.linalg.norm(delta[X0]) < cfg.translation_tol
        and np.linalg.norm(delta[DX]) < cfg.translation_tol
        and np.linalg.norm(delta[TH0]) < cfg.rotation_tol
        and np.linalg.norm(delta[DTH]) < cfg.rotation_tol
    )


def _levenberg_marquardt(map_grid: MapGrid, scan: PointCloud, init, cfg: RegistrationConfig, columns, method):
    X = np.asarray(init, dtype=float).copy()
    system = build_system(map_grid, scan, X)
    cost = weighted_cost(system)
    lam = cfg.lm_lambda0
    trace = [dict(iteration=0, cost=cost, lam=lam, accepted=True, step=0.0, voxels=system.J)]
    converged = False
    last = None
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        delta = solve_wls(system, lam, columns, cfg.cond_limit, cfg.min_time_spread)
        X_try = retract(X, delta)
        # Judge the step on the association it was linearized with; re-binning
        # only happens once a step is taken.
        local = frozen_cost(system, map_grid, scan, X)
        before, after = local(X), local(X_try)
        accepted = after <= before * (1 + 1e-12) + 1e-12
        if accepted:
            try:
                system = build_system(map_grid, scan, X_try)
            except UnderConstrainedError:
                accepted = False
            else:
                X, cost = X_try, weighted_cost(system)
        if accepted:
            lam /= cfg.lm_down
        else:
            lam *= cfg.lm_up
        trace.append(
            dict(
                iteration=it,
                cost=cost,
                lam=lam,
                accepted=accepted,
                step=float(np.linalg.norm(delta)),
                voxels=system.J,
                local_before=before,
                local_after=after,
            )
        )
        if accepted:
            # two steps that cancel mean the optimum sits on a voxel boundary
            if _step_small(delta, cfg) or (last is not None and _step_small(delta + last, cfg)):
                converged = True
                break
            last = delta
        if lam > cfg.lm_lambda_max:
            break

    N, _ = normal_equations(system, columns)
    cov = np.linalg.inv(N)
    cov = 0.5 * (cov + cov.T)
    return RegistrationResult(X, cov, it, converged, cost, method, tuple(trace))


def vicet_register(map_cloud: PointCloud, scan: PointCloud, init, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Solve jointly for the start pose and the in-scan motion of a raw scan.

    ``init`` is a 12-state (or 6-element rigid ``[x0, theta0]``) guess that
    should lie within about half a voxel of the answer; change states are
    normally seeded with zero.
    """
    cfg = cfg or RegistrationConfig()
    map_grid = map_cloud if isinstance(map_cloud, MapGrid) else MapGrid(map_cloud, cfg.grid)
    return _levenberg_marquardt(map_grid, scan, _as_state(init), cfg, ALL_COLUMNS, "vicet")


def ndt_register(map_cloud: PointCloud, scan: PointCloud, init, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Rigid-only version of :func:`vicet_register`; change states are held at zero."""
    cfg = cfg or RegistrationConfig(method="ndt")
    map_grid = map_cloud if isinstance(map_cloud, MapGrid) else MapGrid(map_cloud, cfg.grid)
    return _levenberg_marquardt(map_grid, scan, zero_distortion(_as_state(init)), cfg, RIGID_COLUMNS, "ndt")


def _as_state(init) -> np.ndarray:
    init = np.asarray(init, dtype=float).reshape(-1)
    if init.size == 6:
        return make_state(x0=init[:3], theta0=init[3:])
    if init.size == 12:
        return init.copy()
    raise ValueError("initial guess needs 6 (x0, theta0) or 12 numbers")


def best_fit_transform(src, dst):
    """Least-squares rotation and translation taking ``src`` onto ``dst`` (SVD method)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    Hm = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(Hm)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return R, cd - R @ cs


def icp_register(map_cloud: PointCloud, scan: PointCloud, init, cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Point-to-point ICP treating the raw scan as rigid.

    Correspondences are exact nearest neighbours in the map, discarding
    pairs farther apart than ``cfg.icp_gate``. The predicted covariance is
    the residual variance times the inverse Gauss-Newton information of the
    final correspondences.
    """
    cfg = cfg or RegistrationConfig(method="icp")
    map_pts = np.asarray(map_cloud.positions, dtype=float)
    tree = cKDTree(map_pts)
    X = zero_distortion(_as_state(init))
    R = euler_to_rotation(X[TH0])
    t = X[X0].copy()
    body = scan.positions
    converged = False
    trace = []
    it = 0
    cost = np.inf
    for it in range(1, cfg.max_iterations + 1):
        moved = body @ R.T + t
        dist, idx = tree.query(moved, distance_upper_bound=cfg.icp_gate)
        ok = np.isfinite(dist)
        if ok.sum() < 3:
            raise UnderConstrainedError("fewer than three ICP correspondences inside the gate")
        cost = float(np.sum(dist[ok] ** 2))
        dR, dt = best_fit_transform(moved[ok], map_pts[idx[ok]])
        R = dR @ R
        t = dR @ t + dt
        angle = np.arccos(np.clip((np.trace(dR) - 1) / 2, -1.0, 1.0))
        trace.append(dict(iteration=it, cost=cost, correspondences=int(ok.sum()), step=float(np.linalg.norm(dt))))
        if np.linalg.norm(dt) < cfg.translation_tol and angle < cfg.rotation_tol:
            converged = True
            break

    moved = body @ R.T + t
    dist, idx = tree.query(moved, distance_upper_bound=cfg.icp_gate)
    ok = np.isfinite(dist)
    cost = float(np.sum(dist[ok] ** 2))
    lever = moved[ok] - t
    Jr = np.concatenate([np.broadcast_to(np.eye(3), (ok.sum(), 3, 3)), -skew(lever)], axis=2).reshape(-1, 6)
    sigma2 = cost / max(3 * ok.sum() - 6, 1)
    cov = sigma2 * np.linalg.pinv(Jr.T @ Jr)
    state = make_state(x0=t, theta0=rotation_to_euler(R))
    return RegistrationResult(state, 0.5 * (cov + cov.T), it, converged, cost, "icp", tuple(trace))


def register(map_cloud: PointCloud, scan: PointCloud, init, cfg: RegistrationConfig) -> RegistrationResult:
    """Dispatch on ``cfg.method``; VICET is seeded by NDT unless ``seed_with_ndt`` is off."""
    if cfg.method == "icp":
        return icp_register(map_cloud, scan, init, cfg)
    map_grid = MapGrid(map_cloud, cfg.grid)
    if cfg.method == "ndt":
        return ndt_register(map_grid, scan, init, cfg)
    start = _as_state(init)
    if cfg.seed_with_ndt:
        seed = ndt_register(map_grid, scan, start, replace(cfg, method="ndt"))
        start = seed.state
    return vicet_register(map_grid, scan, start, cfg)


_CONFIG_FLOATS = ("translation_tol", "rotation_tol", "lm_lambda0", "lm_up", "lm_down", "lm_lambda_max", "cond_limit", "min_time_spread", "icp_gate")
_GRID_KEYS = ("azimuth_bins", "elevation_bins", "elevation_min_deg", "elevation_max_deg", "radial_edges", "min_points", "tau", "cov_floor")


def load_config(path=None, **overrides) -> RegistrationConfig:
    """Read a flat ``key = value`` registration config.

    Solver keys mirror :class:`RegistrationConfig`; grid keys are
    ``azimuth_bins``, ``elevation_bins``, ``elevation_min_deg``,
    ``elevation_max_deg``, ``radial_edges``, ``min_points``, ``tau`` and
    ``cov_floor``.
    """
    fields = read_keyvalue(path) if path is not None else {}
    known = set(_CONFIG_FLOATS) | set(_GRID_KEYS) | {"method", "max_iterations", "seed_with_ndt"}
    unknown = set(fields) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    try:
        grid_kwargs = {}
        for key in ("azimuth_bins", "elevation_bins", "min_points"):
            if key in fields:
                grid_kwargs[key] = int(fields[key])
        for key in ("tau", "cov_floor"):
            if key in fields:
                grid_kwargs[key] = float(fields[key])
        if "elevation_min_deg" in fields:
            grid_kwargs["elevation_min"] = float(np.deg2rad(float(fields["elevation_min_deg"])))
        if "elevation_max_deg" in fields:
            grid_kwargs["elevation_max"] = float(np.deg2rad(float(fields["elevation_max_deg"])))
        if "radial_edges" in fields:
            grid_kwargs["radial_edges"] = tuple(floats(fields["radial_edges"], name="radial_edges"))
        kwargs = {k: float(fields[k]) for k in _CONFIG_FLOATS if k in fields}
        if "max_iterations" in fields:
            kwargs["max_iterations"] = int(fields["max_iterations"])
        if "method" in fields:
            kwargs["method"] = fields["method"]
        if "seed_with_ndt" in fields:
            kwargs["seed_with_ndt"] = fields["seed_with_ndt"].lower() in ("1", "true", "yes", "on")
        kwargs.update(overrides)
        return RegistrationConfig(grid=SphericalGridSpec(**grid_kwargs), **kwargs)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


RESULT_TAG = "vicet-result v1"


def write_result(result: RegistrationResult, path) -> None:
    """Text result: state, row-major 12x12 covariance, iterations, converged flag, cost."""
    cov = result.covariance12()
    lines = [
        f"{RESULT_TAG} method={result.method}",
        "state " + " ".join(f"{v:.17g}" for v in result.state),
        "covariance",
        *(" ".join(f"{v:.17g}" for v in row) for row in cov),
        f"iterations {result.iterations}",
        f"converged {int(result.converged)}",
        f"cost {result.cost:.17g}",
    ]
    with open(os.fspath(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")


class ResultFormatError(ValueError):
    pass


def read_result(path) -> RegistrationResult:
    with open(os.fspath(path)) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.lstrip().startswith("#")]
    try:
        if not lines or not lines[0].startswith(RESULT_TAG):
            raise ResultFormatError(f"{path}: missing '{RESULT_TAG}' header")
        method = dict(tok.split("=", 1) for tok in lines[0][len(RESULT_TAG):].split()).get("method", "vicet")
        state = np.array(floats(lines[1].removeprefix("state"), 12, "state"))
        if lines[2] != "covariance":
            raise ResultFormatError(f"{path}: expected 'covariance' on record 3")
        cov = np.array([floats(row, 12, "covariance row") for row in lines[3:15]])
        tail = dict(ln.split(None, 1) for ln in lines[15:18])
        iterations = int(tail["iterations"])
        converged = bool(int(tail["converged"]))
        cost = float(tail["cost"])
    except (IndexError, KeyError, ValueError) as exc:
        if isinstance(exc, ResultFormatError):
            raise
        raise ResultFormatError(f"{path}: malformed result file ({exc})") from None
    if method in ("ndt", "icp"):
        cov = cov[np.ix_(RIGID_COLUMNS, RIGID_COLUMNS)]
    return RegistrationResult(state, cov, iterations, converged, cost, method)
