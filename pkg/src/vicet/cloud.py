"""Point-cloud container, scan timing, and the ``vicet-cloud v1`` text format."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from vicet.geometry import apply_state, pose_at_time

FRAMES = ("body", "map")
HEADER_TAG = "vicet-cloud v1"


class CloudFormatError(ValueError):
    """A cloud file could not be parsed; ``line`` is 1-based."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class HeaderError(CloudFormatError):
    pass


class RecordError(CloudFormatError):
    pass


class CountMismatchError(CloudFormatError):
    pass


@dataclass(frozen=True)
class PointCloud:
    """Ordered points with a per-point scaled scan time.

    ``positions`` is ``(N, 3)`` in meters, ``s`` is ``(N,)``. Map clouds are
    timeless and carry ``s = 0``. ``period`` is the scan duration in seconds
    and is informational only.
    """

    positions: np.ndarray
    s: np.ndarray = None
    frame: str = "body"
    period: float = 0.1

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1, 3)
        s = np.zeros(len(pos)) if self.s is None else np.array(self.s, dtype=float).reshape(-1)
        if len(s) != len(pos):
            raise ValueError(f"{len(pos)} positions but {len(s)} times")
        if self.frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}, got {self.frame!r}")
        if not np.all(np.isfinite(pos)):
            raise ValueError("positions must be finite")
        if np.any(~np.isfinite(s)) or np.any(s < 0) or np.any(s >= 1):
            raise ValueError("scaled times must lie in [0, 1)")
        pos.flags.writeable = False
        s.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "period", float(self.period))

    def __len__(self) -> int:
        return len(self.positions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return (
            self.frame == other.frame
            and self.period == other.period
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.s, other.s)
        )

    __hash__ = None

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.positions[mask], self.s[mask], self.frame, self.period)


def scaled_time_from_azimuth(azimuth):
    """Fraction of the sweep elapsed when the beam points at ``azimuth``.

    Azimuth is measured counterclockwise from the scan-start axis. Values
    outside ``[0, 2*pi)`` are aberrant and come back as NaN so callers can
    drop them. Accepts scalars or arrays.
    """
    a = np.asarray(azimuth, dtype=float)
    s = np.where((a >= 0.0) & (a < 2 * np.pi), a / (2 * np.pi), np.nan)
    return float(s) if s.ndim == 0 else s


def unwarp(cloud: PointCloud, X) -> PointCloud:
    """Move every raw measurement to the map frame using the pose at its own time."""
    if cloud.frame != "body":
        raise ValueError("unwarp expects a body-frame cloud")
    mapped = apply_state(cloud.positions, cloud.s, X)
    return PointCloud(mapped, cloud.s, "map", cloud.period)


def rewarp(cloud: PointCloud, X) -> PointCloud:
    """Inverse of :func:`unwarp`: express map points in the sensor frame at each point's time."""
    R, m = pose_at_time(X, cloud.s)
    body = np.einsum("nji,nj->ni", R, cloud.positions - m)
    return PointCloud(body, cloud.s, "body", cloud.period)


def write_cloud(cloud: PointCloud, path) -> None:
    lines = [f"{HEADER_TAG} frame={cloud.frame} period={cloud.period!r} count={len(cloud)}"]
    for (x, y, z), s in zip(cloud.positions.tolist(), cloud.s.tolist()):
        lines.append(f"{x:.17g} {y:.17g} {z:.17g} {s:.17g}")
    with open(os.fspath(path), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _parse_header(text: str, lineno: int):
    if not text.startswith(HEADER_TAG + " "):
        raise HeaderError(f"expected '{HEADER_TAG} frame=... period=... count=...'", lineno)
    fields = {}
    for token in text[len(HEADER_TAG):].split():
        key, sep, value = token.partition("=")
        if not sep:
            raise HeaderError(f"header token {token!r} is not key=value", lineno)
        fields[key] = value
    missing = {"frame", "period", "count"} - fields.keys()
    if missing:
        raise HeaderError(f"header missing {', '.join(sorted(missing))}", lineno)
    if fields["frame"] not in FRAMES:
        raise HeaderError(f"unknown frame {fields['frame']!r}", lineno)
    try:
        period = float(fields["period"])
        count = int(fields["count"])
    except ValueError:
        raise HeaderError("period and count must be numeric", lineno) from None
    if count < 0:
        raise HeaderError("count must be non-negative", lineno)
    return fields["frame"], period, count


def read_cloud(path) -> PointCloud:
    header = None
    records = []
    with open(os.fspath(path)) as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.strip()
            if not text or text.startswith("#"):
                continue
            if header is None:
                header = _parse_header(text, lineno)
                continue
            parts = text.split()
            if len(parts) != 4:
                raise RecordError(f"expected 4 fields 'x y z s', got {len(parts)}", lineno)
            try:
                records.append([float(v) for v in parts])
            except ValueError:
                raise RecordError(f"non-numeric record {text!r}", lineno) from None
            if len(records) > header[2]:
                raise CountMismatchError(
                    f"header declares {header[2]} points but more records follow", lineno
                )
    if header is None:
        raise HeaderError("file has no header", 1)
    frame, period, count = header
    if len(records) != count:
        raise CountMismatchError(f"header declares {count} points, found {len(records)}", lineno)
    data = np.array(records, dtype=float).reshape(-1, 4)
    try:
        return PointCloud(data[:, :3], data[:, 3], frame, period)
    except ValueError as exc:
        raise RecordError(str(exc), lineno) from None
