"""Track tables, lane geometry and the lane-aligned coordinate frame."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.ndimage import uniform_filter1d

from onramp import errors
from onramp.errors import GeometryError, InputError, SchemaError, TrackRejection
from onramp.io import read_json, write_csv, write_json

logger = logging.getLogger(__name__)


# =============================================================================
# Constants
# =============================================================================

DEFAULT_SAMPLING_HZ = 10
DEFAULT_GAP_M = 130.0
MIN_TRACK_FRAMES = 10
SPACING_TOLERANCE_MS = 1.0
PROJECTION_CHUNK = 4096

TRACK_COLUMNS = [
    "track_id", "frame_id", "timestamp_ms", "agent_type",
    "x", "y", "vx", "vy", "psi_rad", "length", "width",
]

GEOMETRY_KEYS = [
    "acceleration_lane_centerline", "target_lane_centerline", "boundary_line",
    "acceleration_lane_end_s", "ramp_length_m", "lane_count", "default_gap_m",
]


class AgentType(str, enum.Enum):
    CAR = "car"
    TRUCK = "truck"
    OTHER = "other"

    @classmethod
    def parse(cls, raw: object) -> AgentType:
        """Map dataset labels onto the three classes the pipeline cares about."""
        label = str(raw).strip().lower()
        if label == "car":
            return cls.CAR
        if label in ("truck", "truck_bus", "bus"):
            return cls.TRUCK
        return cls.OTHER


# =============================================================================
# Geometry
# =============================================================================

class Polyline:
    """Piecewise-linear curve with arc-length parameterization."""

    def __init__(self, vertices):
        pts = np.asarray(vertices, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise GeometryError("polyline needs at least 2 vertices of [x, y]")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("polyline has non-finite vertices")
        # Repeated vertices would create zero-length segments
        keep = np.concatenate([[True], np.any(np.diff(pts, axis=0) != 0.0, axis=1)])
        pts = pts[keep]
        if len(pts) < 2:
            raise GeometryError("degenerate zero-length polyline")
        self.vertices = pts
        self._start = pts[:-1]
        self._delta = np.diff(pts, axis=0)
        self._seg_len2 = np.einsum("ij,ij->i", self._delta, self._delta)
        self._seg_len = np.sqrt(self._seg_len2)
        self.cumulative = np.concatenate([[0.0], np.cumsum(self._seg_len)])

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    def __len__(self) -> int:
        return len(self.vertices)

    def point_at(self, s: float) -> np.ndarray:
        s = float(np.clip(s, 0.0, self.length))
        k = int(np.clip(np.searchsorted(self.cumulative, s, side="right") - 1, 0, len(self._seg_len) - 1))
        t = (s - self.cumulative[k]) / self._seg_len[k]
        return self._start[k] + t * self._delta[k]

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Project points onto the polyline.

        Returns (s, e, segment) where e is the raw signed offset, positive to
        the left of the direction of travel. Beyond either end s clamps and e
        is the perpendicular offset to the extended end segment; elsewhere
        |e| is the Euclidean distance to the foot point.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        s_out = np.empty(len(pts))
        e_out = np.empty(len(pts))
        k_out = np.empty(len(pts), dtype=np.int64)
        for lo in range(0, len(pts), PROJECTION_CHUNK):
            chunk = pts[lo:lo + PROJECTION_CHUNK]
            s_out[lo:lo + len(chunk)], e_out[lo:lo + len(chunk)], k_out[lo:lo + len(chunk)] = (
                self._project_chunk(chunk)
            )
        return s_out, e_out, k_out

    def _project_chunk(self, pts: np.ndarray):
        rel = pts[:, None, :] - self._start[None, :, :]
        t_raw = np.einsum("psk,sk->ps", rel, self._delta) / self._seg_len2
        t = np.clip(t_raw, 0.0, 1.0)
        foot = self._start[None] + t[..., None] * self._delta[None]
        dist2 = np.einsum("psk,psk->ps", pts[:, None, :] - foot, pts[:, None, :] - foot)
        k = np.argmin(dist2, axis=1)
        rows = np.arange(len(pts))
        tk = t[rows, k]
        tk_raw = t_raw[rows, k]
        s = self.cumulative[k] + tk * self._seg_len[k]
        d = self._delta[k]
        r = rel[rows, k]
        cross = (d[:, 0] * r[:, 1] - d[:, 1] * r[:, 0]) / self._seg_len[k]
        dist = np.sqrt(dist2[rows, k])
        last = len(self._seg_len) - 1
        beyond = ((k == 0) & (tk_raw < 0.0)) | ((k == last) & (tk_raw > 1.0))
        at_vertex = ((tk_raw <= 0.0) | (tk_raw >= 1.0)) & ~beyond
        e = np.where(at_vertex, np.where(cross >= 0.0, dist, -dist), cross)
        return s, e, k

    def tangent(self, segment) -> np.ndarray:
        segment = np.asarray(segment)
        return self._delta[segment] / self._seg_len[segment][..., None]

    def resample(self, step: float) -> np.ndarray:
        """Vertices every ``step`` meters of arc length (endpoints included)."""
        n = max(int(np.ceil(self.length / step)), 1)
        return np.array([self.point_at(s) for s in np.linspace(0.0, self.length, n + 1)])


@dataclass(frozen=True)
class LaneGeometry:
    acceleration_lane_centerline: Polyline
    target_lane_centerline: Polyline
    boundary_line: Polyline
    acceleration_lane_end_s: float
    ramp_length_m: float
    lane_count: int
    default_gap_m: float = DEFAULT_GAP_M

    def __post_init__(self):
        if not 0.0 <= self.acceleration_lane_end_s <= self.acceleration_lane_centerline.length + 1e-9:
            raise GeometryError(
                f"acceleration_lane_end_s={self.acceleration_lane_end_s} exceeds centerline "
                f"length {self.acceleration_lane_centerline.length:.3f}"
            )
        if self.default_gap_m <= 0:
            raise GeometryError(f"default_gap_m must be > 0 (got {self.default_gap_m})")
        if self.ramp_length_m <= 0 or self.lane_count < 1:
            raise GeometryError("ramp_length_m must be > 0 and lane_count >= 1")

    @cached_property
    def sides(self) -> dict[str, float]:
        """Sign that turns each polyline's raw left-offset into 'toward target lane'."""
        acc, tgt, bnd = (self.acceleration_lane_centerline, self.target_lane_centerline,
                         self.boundary_line)
        tgt_mid = tgt.point_at(tgt.length / 2)
        acc_mid = acc.point_at(acc.length / 2)
        sides = {
            "acceleration": _side_sign(acc, tgt_mid),
            "boundary": _side_sign(bnd, tgt_mid),
            "target": -_side_sign(tgt, acc_mid),
        }
        return sides

    def offset(self, points, line: str) -> tuple[np.ndarray, np.ndarray]:
        """(s, e) of points against one of the three polylines, e toward target."""
        poly = {
            "acceleration": self.acceleration_lane_centerline,
            "target": self.target_lane_centerline,
            "boundary": self.boundary_line,
        }[line]
        s, e, _ = poly.project(points)
        return s, e * self.sides[line]

    @classmethod
    def from_dict(cls, data: dict) -> LaneGeometry:
        missing = [k for k in GEOMETRY_KEYS if k not in data and k != "default_gap_m"]
        if missing:
            raise GeometryError(f"geometry is missing keys: {', '.join(missing)}")
        return cls(
            acceleration_lane_centerline=Polyline(data["acceleration_lane_centerline"]),
            target_lane_centerline=Polyline(data["target_lane_centerline"]),
            boundary_line=Polyline(data["boundary_line"]),
            acceleration_lane_end_s=float(data["acceleration_lane_end_s"]),
            ramp_length_m=float(data["ramp_length_m"]),
            lane_count=int(data["lane_count"]),
            default_gap_m=float(data.get("default_gap_m", DEFAULT_GAP_M)),
        )

    def to_dict(self) -> dict:
        return {
            "acceleration_lane_centerline": self.acceleration_lane_centerline.vertices,
            "target_lane_centerline": self.target_lane_centerline.vertices,
            "boundary_line": self.boundary_line.vertices,
            "acceleration_lane_end_s": self.acceleration_lane_end_s,
            "ramp_length_m": self.ramp_length_m,
            "lane_count": self.lane_count,
            "default_gap_m": self.default_gap_m,
        }


def _side_sign(poly: Polyline, probe: np.ndarray) -> float:
    _, e, _ = poly.project(probe)
    if e[0] == 0.0:
        raise GeometryError("target lane centerline coincides with a reference line")
    return 1.0 if e[0] > 0 else -1.0


def project_to_lane(position, centerline: Polyline, side: float = 1.0) -> tuple[float, float]:
    """Arc length and signed lateral offset of one point (positive toward target)."""
    if not isinstance(centerline, Polyline):
        centerline = Polyline(centerline)
    s, e, _ = centerline.project(np.asarray(position, dtype=float)[None, :])
    return float(s[0]), float(e[0] * side)


def signed_lane_velocity(frame: TrackFrame, centerline: Polyline,
                         side: float = 1.0) -> tuple[float, float]:
    """Rotate a frame's velocity into (lateral, longitudinal) of the local lane frame."""
    if not isinstance(centerline, Polyline):
        centerline = Polyline(centerline)
    _, _, k = centerline.project(np.array([[frame.x, frame.y]]))
    u = centerline.tangent(k[0])
    v = np.array([frame.vx, frame.vy])
    lateral = side * (u[0] * v[1] - u[1] * v[0])
    longitudinal = float(u @ v)
    return float(lateral), longitudinal


# =============================================================================
# Tracks
# =============================================================================

@dataclass(frozen=True)
class TrackFrame:
    frame_index: int
    timestamp_ms: int
    x: float
    y: float
    vx: float
    vy: float
    heading: float
    agent_type: AgentType


@dataclass(frozen=True, eq=False)
class Track:
    """One vehicle's record, stored column-wise for vectorized work."""
    track_id: int
    agent_type: AgentType
    frame_index: np.ndarray
    timestamp_ms: np.ndarray
    position: np.ndarray  # (n, 2)
    velocity: np.ndarray  # (n, 2)
    heading: np.ndarray
    length_m: float
    width_m: float

    def __len__(self) -> int:
        return len(self.frame_index)

    def frame(self, i: int) -> TrackFrame:
        return TrackFrame(
            frame_index=int(self.frame_index[i]),
            timestamp_ms=int(self.timestamp_ms[i]),
            x=float(self.position[i, 0]),
            y=float(self.position[i, 1]),
            vx=float(self.velocity[i, 0]),
            vy=float(self.velocity[i, 1]),
            heading=float(self.heading[i]),
            agent_type=self.agent_type,
        )

    @property
    def frames(self) -> list[TrackFrame]:
        return [self.frame(i) for i in range(len(self))]

    @property
    def first_frame(self) -> int:
        return int(self.frame_index[0])

    @property
    def last_frame(self) -> int:
        return int(self.frame_index[-1])

    def row_of(self, frame_index: int) -> int:
        """Row position of a frame index (frames are contiguous after validation)."""
        row = int(frame_index) - self.first_frame
        if not 0 <= row < len(self):
            raise InputError(f"track {self.track_id} has no frame {frame_index}")
        return row

    def has_frame(self, frame_index: int) -> bool:
        return self.first_frame <= frame_index <= self.last_frame


@dataclass(frozen=True, eq=False)
class Scene:
    tracks: dict[int, Track]
    geometry: LaneGeometry
    sampling_hz: int = DEFAULT_SAMPLING_HZ
    rejections: tuple[TrackRejection, ...] = field(default_factory=tuple)

    @property
    def dt(self) -> float:
        return 1.0 / self.sampling_hz

    def track_ids(self) -> list[int]:
        return sorted(self.tracks)


def validate_track_rows(track_id: int, frames: np.ndarray, timestamps: np.ndarray,
                        sampling_hz: int = DEFAULT_SAMPLING_HZ,
                        min_frames: int = MIN_TRACK_FRAMES) -> TrackRejection | None:
    """Return a rejection record for an invalid track, or None when it passes."""
    if len(np.unique(frames)) != len(frames):
        return TrackRejection(track_id, errors.DUPLICATE_FRAME, "repeated frame_id")
    if np.any(np.diff(timestamps) <= 0):
        return TrackRejection(track_id, errors.NON_MONOTONE_TIMESTAMP,
                              "timestamps not strictly increasing")
    period_ms = 1000.0 / sampling_hz
    if np.any(np.diff(frames) != 1) or np.any(np.abs(np.diff(timestamps) - period_ms) > SPACING_TOLERANCE_MS):
        return TrackRejection(track_id, errors.IRREGULAR_SAMPLING,
                              f"frame spacing differs from {period_ms:.0f} ms")
    if len(frames) < min_frames:
        return TrackRejection(track_id, errors.TOO_FEW_FRAMES,
                              f"{len(frames)} frames < {min_frames}")
    return None


def load_geometry(path: Path) -> LaneGeometry:
    return LaneGeometry.from_dict(read_json(path))


def load_scene(track_table: Path, geometry: Path | LaneGeometry,
               sampling_hz: int = DEFAULT_SAMPLING_HZ,
               min_frames: int = MIN_TRACK_FRAMES) -> Scene:
    """Load and validate a track table plus lane geometry.

    Tracks failing validation are logged, recorded in ``Scene.rejections``
    and skipped. A missing required column raises SchemaError.
    """
    track_table = Path(track_table)
    if not track_table.exists():
        raise InputError(f"track table not found: {track_table}")
    geom = geometry if isinstance(geometry, LaneGeometry) else load_geometry(Path(geometry))

    try:
        df = pd.read_csv(track_table, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise SchemaError(TRACK_COLUMNS[0], str(track_table))
    except pd.errors.ParserError as e:
        raise InputError(f"malformed track table {track_table} ({e})") from e
    for column in TRACK_COLUMNS:
        if column not in df.columns:
            raise SchemaError(column, str(track_table))

    tracks: dict[int, Track] = {}
    rejections: list[TrackRejection] = []
    for track_id, group in df.groupby("track_id", sort=True):
        track_id = int(track_id)
        group = group.sort_values("frame_id", kind="stable")
        frames = group["frame_id"].to_numpy(dtype=np.int64)
        timestamps = group["timestamp_ms"].to_numpy(dtype=np.int64)
        rejection = validate_track_rows(track_id, frames, timestamps, sampling_hz, min_frames)
        if rejection is not None:
            logger.warning("Rejected track %s: %s (%s)", track_id, rejection.reason, rejection.detail)
            rejections.append(rejection)
            continue
        first = group.iloc[0]
        tracks[track_id] = Track(
            track_id=track_id,
            agent_type=AgentType.parse(first["agent_type"]),
            frame_index=frames,
            timestamp_ms=timestamps,
            position=group[["x", "y"]].to_numpy(dtype=float),
            velocity=group[["vx", "vy"]].to_numpy(dtype=float),
            heading=group["psi_rad"].to_numpy(dtype=float),
            length_m=float(first["length"]),
            width_m=float(first["width"]),
        )
    logger.info("Loaded %d tracks (%d rejected) from %s", len(tracks), len(rejections), track_table)
    return Scene(tracks=tracks, geometry=geom, sampling_hz=sampling_hz, rejections=tuple(rejections))


def scene_rows(scene: Scene) -> list[dict]:
    rows = []
    for track_id in scene.track_ids():
        track = scene.tracks[track_id]
        for i in range(len(track)):
            rows.append({
                "track_id": track_id,
                "frame_id": int(track.frame_index[i]),
                "timestamp_ms": int(track.timestamp_ms[i]),
                "agent_type": track.agent_type.value,
                "x": float(track.position[i, 0]),
                "y": float(track.position[i, 1]),
                "vx": float(track.velocity[i, 0]),
                "vy": float(track.velocity[i, 1]),
                "psi_rad": float(track.heading[i]),
                "length": track.length_m,
                "width": track.width_m,
            })
    return rows


def write_scene(scene: Scene, track_table: Path, geometry: Path) -> None:
    """Serialize a scene in the exact formats ``load_scene`` consumes."""
    write_csv(scene_rows(scene), TRACK_COLUMNS, Path(track_table))
    write_json(scene.geometry.to_dict(), Path(geometry))


# =============================================================================
# Lane-frame kinematics
# =============================================================================

@dataclass(frozen=True, eq=False)
class LaneKinematics:
    """Per-frame lane-frame state of one track (x = lateral, y = longitudinal)."""
    s: np.ndarray
    e: np.ndarray
    v_x: np.ndarray
    v_y: np.ndarray
    acc_x: np.ndarray
    acc_y: np.ndarray

    def behavior(self, lo: int, hi: int) -> np.ndarray:
        """Rows lo..hi inclusive as a (T, 4) series of (v_x, v_y, acc_x, acc_y)."""
        return np.column_stack([self.v_x, self.v_y, self.acc_x, self.acc_y])[lo:hi + 1]


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    """Centered moving average; edges repeat the boundary sample."""
    if window <= 1:
        return np.asarray(values, dtype=float)
    return uniform_filter1d(np.asarray(values, dtype=float), size=window, mode="nearest")


def lane_kinematics(track: Track, geometry: LaneGeometry, sampling_hz: int = DEFAULT_SAMPLING_HZ,
                    smoothing_window: int = 5) -> LaneKinematics:
    """Lane-frame velocities from the table and smoothed finite-difference accelerations."""
    poly = geometry.acceleration_lane_centerline
    side = geometry.sides["acceleration"]
    s, e_raw, k = poly.project(track.position)
    u = poly.tangent(k)
    v = track.velocity
    v_y = np.einsum("ij,ij->i", u, v)
    v_x = side * (u[:, 0] * v[:, 1] - u[:, 1] * v[:, 0])
    dt = 1.0 / sampling_hz
    if len(track) >= 2:
        acc_x = smooth(np.gradient(v_x, dt), smoothing_window)
        acc_y = smooth(np.gradient(v_y, dt), smoothing_window)
    else:
        acc_x = np.zeros_like(v_x)
        acc_y = np.zeros_like(v_y)
    return LaneKinematics(s=s, e=e_raw * side, v_x=v_x, v_y=v_y, acc_x=acc_x, acc_y=acc_y)
