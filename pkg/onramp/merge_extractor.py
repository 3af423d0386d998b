"""Merging-event extraction: crossings, bounds, neighbors, covariates, truck filter."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import argrelextrema

from onramp import errors
from onramp.errors import Discard, DiscardError, InputError
from onramp.trajectory_store import (
    AgentType,
    LaneGeometry,
    LaneKinematics,
    Scene,
    Track,
    lane_kinematics,
)

logger = logging.getLogger(__name__)


# =============================================================================
# Constants
# =============================================================================

BEHAVIOR_NAMES = ("v_x", "v_y", "acc_x", "acc_y")
COVARIATE_NAMES = ("dx_f", "dx_r", "dx_ft", "dx_rt", "l", "d")
ROLES = ("f", "r", "ft", "rt")

LANE_NONE = -1
LANE_ACCELERATION = 0
LANE_TARGET = 1

# Floor for a neighbor level with the subject (equal arc length); keeps gaps > 0
MIN_GAP_M = 0.1


@dataclass(frozen=True)
class ExtractionConfig:
    peak_floor: float = 0.1
    lane_width_m: float = 3.5
    min_event_frames: int = 10
    smoothing_window: int = 5

    @property
    def half_width(self) -> float:
        return self.lane_width_m / 2.0


# =============================================================================
# Data Classes
# =============================================================================

@dataclass(frozen=True, eq=False)
class MergeEvent:
    """One merging process: behavior series O (T, 4) and covariates X (T, 6)."""
    event_id: str
    vehicle_id: int
    t_cross: int
    t_start: int
    t_end: int
    O: np.ndarray
    X: np.ndarray
    neighbor_ids: tuple[dict[str, int | None], ...] = field(default_factory=tuple)

    @property
    def T(self) -> int:
        return len(self.O)

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.t_start, self.t_start + self.T)

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "vehicle_id": self.vehicle_id,
            "t_cross": self.t_cross,
            "t_start": self.t_start,
            "t_end": self.t_end,
            "O": self.O,
            "X": self.X,
            "neighbor_ids": [dict(n) for n in self.neighbor_ids],
        }

    @classmethod
    def from_dict(cls, data: dict) -> MergeEvent:
        try:
            O = np.asarray(data["O"], dtype=float).reshape(-1, len(BEHAVIOR_NAMES))
            X = np.asarray(data["X"], dtype=float).reshape(-1, len(COVARIATE_NAMES))
            return cls(
                event_id=str(data["event_id"]),
                vehicle_id=int(data["vehicle_id"]),
                t_cross=int(data["t_cross"]),
                t_start=int(data["t_start"]),
                t_end=int(data["t_end"]),
                O=O,
                X=X,
                neighbor_ids=tuple(data.get("neighbor_ids", ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"malformed event record ({e})") from e


@dataclass(frozen=True)
class NeighborMatch:
    ids: dict[str, int | None]
    gaps: dict[str, float]


@dataclass
class ExtractionResult:
    events: list[MergeEvent]
    discards: list[Discard]


# =============================================================================
# Scene index
# =============================================================================

class SceneIndex:
    """Per-frame lookup of every vehicle's lane-frame position and lane."""

    def __init__(self, scene: Scene, lane_width_m: float = 3.5):
        self.scene = scene
        self.geometry = scene.geometry
        half = lane_width_m / 2.0
        ids, frames, s_all, lanes, trucks = [], [], [], [], []
        for track_id in scene.track_ids():
            track = scene.tracks[track_id]
            s, e_acc = self.geometry.offset(track.position, "acceleration")
            _, e_tgt = self.geometry.offset(track.position, "target")
            ids.append(np.full(len(track), track_id, dtype=np.int64))
            frames.append(track.frame_index)
            s_all.append(s)
            lanes.append(classify_lane(e_acc, e_tgt, half))
            trucks.append(np.full(len(track), track.agent_type is AgentType.TRUCK))
        if ids:
            ids_a = np.concatenate(ids)
            frames_a = np.concatenate(frames)
            order = np.lexsort((ids_a, frames_a))
            self.ids = ids_a[order]
            self.frame = frames_a[order]
            self.s = np.concatenate(s_all)[order]
            self.lane = np.concatenate(lanes)[order]
            self.truck = np.concatenate(trucks)[order]
        else:
            self.ids = self.frame = np.empty(0, dtype=np.int64)
            self.s = np.empty(0)
            self.lane = np.empty(0, dtype=np.int64)
            self.truck = np.empty(0, dtype=bool)
        self._frames, self._starts = np.unique(self.frame, return_index=True)
        self._stops = np.append(self._starts[1:], len(self.frame))

    def at(self, frame: int) -> slice:
        pos = np.searchsorted(self._frames, frame)
        if pos >= len(self._frames) or self._frames[pos] != frame:
            return slice(0, 0)
        return slice(int(self._starts[pos]), int(self._stops[pos]))

    def position_of(self, vehicle_id: int, frame: int) -> int:
        sl = self.at(frame)
        hits = np.nonzero(self.ids[sl] == vehicle_id)[0]
        if len(hits) == 0:
            raise InputError(f"vehicle {vehicle_id} not present at frame {frame}")
        return sl.start + int(hits[0])


def classify_lane(e_acc: np.ndarray, e_tgt: np.ndarray, half_width: float) -> np.ndarray:
    """Lane code per point: nearer centerline within half a lane width, else none."""
    a, t = np.abs(e_acc), np.abs(e_tgt)
    lane = np.full(len(a), LANE_NONE, dtype=np.int64)
    lane[(a <= half_width) & (a <= t)] = LANE_ACCELERATION
    lane[(t <= half_width) & (t < a)] = LANE_TARGET
    return lane


# =============================================================================
# Steps 1-2: crossing and bounds
# =============================================================================

def detect_crossing(track: Track, geometry: LaneGeometry) -> list[int]:
    """Frames at which the signed offset to the boundary line changes sign."""
    if len(track) < 2:
        return []
    _, e = geometry.offset(track.position, "boundary")
    side = e > 0.0
    flips = np.nonzero(side[1:] != side[:-1])[0] + 1
    return [int(track.frame_index[i]) for i in flips]


def local_peaks(magnitude: np.ndarray, floor: float) -> np.ndarray:
    """Rows strictly greater than both neighbors and at or above the floor."""
    if len(magnitude) < 3:
        return np.empty(0, dtype=np.int64)
    (rows,) = argrelextrema(magnitude, np.greater)
    return rows[magnitude[rows] >= floor]


def find_merge_bounds(track: Track, t_cross: int, geometry: LaneGeometry,
                      kinematics: LaneKinematics | None = None,
                      config: ExtractionConfig | None = None,
                      sampling_hz: int = 10) -> tuple[int, int]:
    """Nearest lateral-acceleration peaks on either side of the crossing.

    Raises DiscardError with ``no_start_peak`` / ``no_end_peak``.
    """
    config = config or ExtractionConfig()
    if kinematics is None:
        kinematics = lane_kinematics(track, geometry, sampling_hz, config.smoothing_window)
    row_cross = track.row_of(t_cross)
    peaks = local_peaks(np.abs(kinematics.acc_x), config.peak_floor)
    before = peaks[peaks < row_cross]
    after = peaks[peaks > row_cross]
    if len(before) == 0:
        raise DiscardError(errors.NO_START_PEAK, f"no lateral-acceleration peak before frame {t_cross}")
    if len(after) == 0:
        raise DiscardError(errors.NO_END_PEAK, f"no lateral-acceleration peak after frame {t_cross}")
    return int(track.frame_index[before[-1]]), int(track.frame_index[after[0]])


# =============================================================================
# Steps 3-4: neighbors and covariates
# =============================================================================

def _nearest(index: SceneIndex, sl: slice, mask: np.ndarray, s_subject: float,
             ahead: bool, default_gap: float) -> tuple[int | None, float]:
    s = index.s[sl]
    ids = index.ids[sl]
    cand = mask & ((s > s_subject) if ahead else (s <= s_subject))
    if not np.any(cand):
        return None, default_gap
    gaps = np.abs(s[cand] - s_subject)
    cand_ids = ids[cand]
    best = np.lexsort((cand_ids, gaps))[0]
    if gaps[best] > default_gap:
        return None, default_gap
    return int(cand_ids[best]), max(float(gaps[best]), MIN_GAP_M)


def match_neighbors(scene: Scene, vehicle_id: int, t: int,
                    index: SceneIndex | None = None,
                    config: ExtractionConfig | None = None) -> NeighborMatch:
    """Lead/lag vehicles in the acceleration lane (f, r) and target lane (ft, rt)."""
    config = config or ExtractionConfig()
    index = index or SceneIndex(scene, config.lane_width_m)
    pos = index.position_of(vehicle_id, t)
    sl = index.at(t)
    s_subject = float(index.s[pos])
    others = index.ids[sl] != vehicle_id
    in_acc = others & (index.lane[sl] == LANE_ACCELERATION)
    in_tgt = others & (index.lane[sl] == LANE_TARGET)
    default_gap = scene.geometry.default_gap_m
    ids, gaps = {}, {}
    for role, mask, ahead in (("f", in_acc, True), ("r", in_acc, False),
                              ("ft", in_tgt, True), ("rt", in_tgt, False)):
        ids[role], gaps[role] = _nearest(index, sl, mask, s_subject, ahead, default_gap)
    return NeighborMatch(ids=ids, gaps=gaps)


def ramp_density(index: SceneIndex, frame: int, geometry: LaneGeometry,
                 merging_id: int | None = None) -> float:
    """Vehicles on the acceleration lane within [0, end_s] per meter per lane.

    The merging vehicle, when given, always counts as a ramp vehicle.
    """
    sl = index.at(frame)
    s = index.s[sl]
    on_ramp = (index.lane[sl] == LANE_ACCELERATION) & (s >= 0.0) & (s <= geometry.acceleration_lane_end_s)
    if merging_id is not None:
        on_ramp |= index.ids[sl] == merging_id
    return int(np.count_nonzero(on_ramp)) / (geometry.ramp_length_m * geometry.lane_count)


def compute_covariates(scene: Scene, vehicle_id: int, t_start: int, t_end: int,
                       index: SceneIndex | None = None,
                       config: ExtractionConfig | None = None,
                       ) -> tuple[np.ndarray, tuple[dict[str, int | None], ...]]:
    """Covariate series X (T, 6) and per-frame neighbor identities."""
    config = config or ExtractionConfig()
    index = index or SceneIndex(scene, config.lane_width_m)
    geometry = scene.geometry
    rows = []
    neighbors = []
    for t in range(t_start, t_end + 1):
        match = match_neighbors(scene, vehicle_id, t, index, config)
        s_subject = float(index.s[index.position_of(vehicle_id, t)])
        remaining = max(geometry.acceleration_lane_end_s - s_subject, 0.0)
        density = ramp_density(index, t, geometry, merging_id=vehicle_id)
        rows.append([match.gaps[r] for r in ROLES] + [remaining, density])
        neighbors.append(match.ids)
    return np.asarray(rows, dtype=float).reshape(-1, len(COVARIATE_NAMES)), tuple(neighbors)


# =============================================================================
# Steps 1-5
# =============================================================================

def _build_event(scene: Scene, index: SceneIndex, track: Track, kin: LaneKinematics,
                 t_cross: int, config: ExtractionConfig) -> MergeEvent:
    if track.agent_type is AgentType.TRUCK:
        raise DiscardError(errors.TRUCK_INVOLVED, "merging vehicle is a truck")
    t_start, t_end = find_merge_bounds(track, t_cross, scene.geometry, kin, config, scene.sampling_hz)
    n_frames = t_end - t_start + 1
    if n_frames < config.min_event_frames:
        raise DiscardError(errors.TOO_SHORT, f"{n_frames} frames < {config.min_event_frames}")
    X, neighbor_ids = compute_covariates(scene, track.track_id, t_start, t_end, index, config)
    for frame_ids in neighbor_ids:
        for role in ROLES:
            other = frame_ids[role]
            if other is not None and scene.tracks[other].agent_type is AgentType.TRUCK:
                raise DiscardError(errors.TRUCK_INVOLVED, f"neighbor {other} ({role}) is a truck")
    O = kin.behavior(track.row_of(t_start), track.row_of(t_end))
    return MergeEvent(
        event_id=f"{track.track_id}-{t_cross}",
        vehicle_id=track.track_id,
        t_cross=t_cross,
        t_start=t_start,
        t_end=t_end,
        O=O,
        X=X,
        neighbor_ids=neighbor_ids,
    )


def extract_events(scene: Scene, config: ExtractionConfig | None = None) -> ExtractionResult:
    """Run Steps 1-5 over every track; output ordered by (vehicle_id, t_cross)."""
    config = config or ExtractionConfig()
    index = SceneIndex(scene, config.lane_width_m)
    events: list[MergeEvent] = []
    discards: list[Discard] = []
    for track_id in scene.track_ids():
        track = scene.tracks[track_id]
        crossings = detect_crossing(track, scene.geometry)
        if not crossings:
            continue
        kin = lane_kinematics(track, scene.geometry, scene.sampling_hz, config.smoothing_window)
        for t_cross in crossings:
            try:
                events.append(_build_event(scene, index, track, kin, t_cross, config))
            except DiscardError as e:
                logger.info("Discarded crossing %s@%s: %s", track_id, t_cross, e)
                discards.append(Discard(track_id, t_cross, e.reason, e.detail))
    logger.info("Extracted %d events, %d discards", len(events), len(discards))
    return ExtractionResult(events=events, discards=discards)


def validate_event(event: MergeEvent, default_gap_m: float = 130.0,
                   min_frames: int = 10, l_tolerance: float = 0.5) -> list[str]:
    """Return the list of violated event invariants (empty when valid)."""
    problems = []
    if not event.t_start < event.t_cross < event.t_end:
        problems.append("bounds not ordered t_start < t_cross < t_end")
    if event.T != event.t_end - event.t_start + 1 or event.T < min_frames:
        problems.append(f"length {event.T} inconsistent or below {min_frames}")
    if event.X.shape != (event.T, len(COVARIATE_NAMES)) or event.O.shape != (event.T, len(BEHAVIOR_NAMES)):
        problems.append("series shapes do not match T")
        return problems
    gaps = event.X[:, :4]
    if np.any(gaps <= 0.0) or np.any(gaps > default_gap_m):
        problems.append("gap outside (0, default_gap_m]")
    remaining = event.X[:, 4]
    if np.any(remaining < 0.0):
        problems.append("negative remaining distance")
    if np.any(np.diff(remaining) > l_tolerance):
        problems.append("remaining distance increases")
    if np.any(event.X[:, 5] <= 0.0):
        problems.append("non-positive ramp density")
    return problems


def describe_variables(events: list[MergeEvent]) -> list[dict]:
    """Mean, SD, min and max of every behavior and covariate variable."""
    if not events:
        return []
    data = np.column_stack([
        np.concatenate([e.O for e in events]),
        np.concatenate([e.X for e in events]),
    ])
    rows = []
    for j, name in enumerate(BEHAVIOR_NAMES + COVARIATE_NAMES):
        col = data[:, j]
        rows.append({
            "variable": name,
            "mean": float(np.mean(col)),
            "sd": float(np.std(col, ddof=1)) if len(col) > 1 else 0.0,
            "min": float(np.min(col)),
            "max": float(np.max(col)),
        })
    return rows


def discard_rows(discards: list[Discard]) -> list[dict]:
    return [{"track_id": d.track_id, "t_cross": d.t_cross, "reason": d.reason} for d in discards]
