"""Synthetic scenes, NHMM sequences and primitive families with ground-truth ledgers.

Vehicles are scripted in the acceleration-lane frame (s along the lane, e
toward the target lane) and mapped to world coordinates, so every quantity
the extractor measures has an analytic counterpart in the ledger.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from onramp import errors
from onramp.errors import GenerationError, InputError
from onramp.merge_extractor import MIN_GAP_M, ROLES, MergeEvent
from onramp.nhmm import NhmmParams, transition_matrix_at
from onramp.rng import derive_seed, make_rng
from onramp.segmenter import Primitive
from onramp.trajectory_store import AgentType, LaneGeometry, Polyline, Scene, Track
from onramp.tskm import dtw_distance

logger = logging.getLogger(__name__)

GENERATOR_VERSION = 1
MERGE_START_OFFSET = 0.1
PEAK_EDGE_MARGIN = 5
VEHICLE_SIZE = {AgentType.CAR: (4.5, 1.8), AgentType.TRUCK: (12.0, 2.5), AgentType.OTHER: (2.0, 0.8)}


@dataclass
class SyntheticLedger:
    """Ground truth recorded by a generator; reproducible from (version, seed)."""
    kind: str
    seed: int
    truth: dict = field(default_factory=dict)
    generator_version: int = GENERATOR_VERSION

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "generator_version": self.generator_version,
            "truth": self.truth,
        }


# =============================================================================
# NHMM sequences
# =============================================================================

def gen_nhmm_sequences(params: NhmmParams, n_sequences: int, T: int, seed: int = 0,
                       covariates: np.ndarray | None = None) -> tuple[list[MergeEvent], SyntheticLedger]:
    """Forward-simulate the NHMM.

    Covariates default to iid standard normal per dimension and frame; a
    supplied (T, C) path is shared by every sequence, a (n, T, C) array gives
    one path per sequence.
    """
    params.validate()
    C = params.n_covariates
    if covariates is not None:
        covariates = np.asarray(covariates, dtype=float)
        if covariates.shape not in ((T, C), (n_sequences, T, C)):
            raise InputError(f"covariate path must have shape ({T}, {C}) or ({n_sequences}, {T}, {C})")
    N = params.n_states
    events: list[MergeEvent] = []
    states: list[np.ndarray] = []
    chol = [np.linalg.cholesky(params.sigma[k]) for k in range(N)]
    for i in range(n_sequences):
        rng = make_rng(derive_seed(seed, f"sequence-{i}"))
        if covariates is None:
            X = rng.standard_normal((T, C))
        else:
            X = covariates if covariates.ndim == 2 else covariates[i]
        q = np.empty(T, dtype=np.int64)
        q[0] = rng.choice(N, p=params.pi0)
        for t in range(1, T):
            q[t] = rng.choice(N, p=transition_matrix_at(params, X[t])[q[t - 1]])
        z = rng.standard_normal((T, params.mu.shape[1]))
        O = np.empty_like(z)
        for t in range(T):
            O[t] = params.mu[q[t]] + chol[q[t]] @ z[t]
        events.append(MergeEvent(
            event_id=f"syn-{i:04d}",
            vehicle_id=i,
            t_cross=T // 2,
            t_start=0,
            t_end=T - 1,
            O=O,
            X=np.array(X, dtype=float),
        ))
        states.append(q)
    ledger = SyntheticLedger(kind="nhmm", seed=seed, truth={"params": params.to_dict(), "states": states})
    return events, ledger


# =============================================================================
# Merging scenes
# =============================================================================

@dataclass(frozen=True)
class SceneLayout:
    shape: str = "straight"
    lane_width_m: float = 3.5
    ramp_length_m: float = 250.0
    road_length_m: float = 600.0
    lane_count: int = 1
    default_gap_m: float = 130.0
    sampling_hz: int = 10
    arc_radius_m: float = 1000.0
    arc_step_m: float = 2.0

    def __post_init__(self):
        if self.shape not in ("straight", "arc"):
            raise InputError(f"unknown layout shape {self.shape!r}")
        if not 0.0 < self.ramp_length_m <= self.road_length_m:
            raise InputError("ramp_length_m must be in (0, road_length_m]")

    @property
    def dt(self) -> float:
        return 1.0 / self.sampling_hz

    def _reference(self) -> tuple[np.ndarray, np.ndarray]:
        """Acceleration-lane centerline vertices and their left unit normals."""
        if self.shape == "straight":
            pts = np.array([[0.0, 0.0], [self.road_length_m, 0.0]])
            normals = np.array([[0.0, 1.0], [0.0, 1.0]])
            return pts, normals
        n = max(int(math.ceil(self.road_length_m / self.arc_step_m)), 1)
        theta = np.linspace(0.0, self.road_length_m / self.arc_radius_m, n + 1)
        pts = np.column_stack([self.arc_radius_m * np.sin(theta),
                               -self.arc_radius_m * (1.0 - np.cos(theta))])
        normals = np.column_stack([np.sin(theta), np.cos(theta)])
        return pts, normals

    def geometry(self) -> LaneGeometry:
        pts, normals = self._reference()
        W = self.lane_width_m
        return LaneGeometry(
            acceleration_lane_centerline=Polyline(pts),
            target_lane_centerline=Polyline(pts + W * normals),
            boundary_line=Polyline(pts + 0.5 * W * normals),
            acceleration_lane_end_s=self.ramp_length_m,
            ramp_length_m=self.ramp_length_m,
            lane_count=self.lane_count,
            default_gap_m=self.default_gap_m,
        )

    def to_world(self, s: np.ndarray, e: np.ndarray, poly: Polyline) -> tuple[np.ndarray, np.ndarray]:
        """World positions and unit tangents for lane-frame coordinates."""
        if self.shape == "straight":
            tangent = np.tile([1.0, 0.0], (len(s), 1))
            return np.column_stack([s, e]), tangent
        base = np.array([poly.point_at(v) for v in s])
        k = np.clip(np.searchsorted(poly.cumulative, s, side="right") - 1, 0, len(poly) - 2)
        tangent = poly.tangent(k)
        normal = np.column_stack([-tangent[:, 1], tangent[:, 0]])
        return base + e[:, None] * normal, tangent


@dataclass(frozen=True)
class ScriptedVehicle:
    """Constant longitudinal speed; optional sine-bump lane change of one lane width."""
    vehicle_id: int
    first_frame: int
    n_frames: int
    s0: float
    speed: float
    e0: float = 0.0
    lane_change_frame: int | None = None
    period_frames: int = 80
    agent_type: AgentType = AgentType.CAR

    @property
    def frames(self) -> np.ndarray:
        return np.arange(self.first_frame, self.first_frame + self.n_frames)

    @property
    def last_frame(self) -> int:
        return self.first_frame + self.n_frames - 1

    def longitudinal(self, dt: float) -> np.ndarray:
        return self.s0 + self.speed * (self.frames - self.first_frame) * dt

    def lateral(self, dt: float, width: float) -> tuple[np.ndarray, np.ndarray]:
        """Lateral offset and lateral speed per frame."""
        e = np.full(self.n_frames, float(self.e0))
        v = np.zeros(self.n_frames)
        if self.lane_change_frame is None:
            return e, v
        P = self.period_frames
        tau = (self.frames - self.lane_change_frame).astype(float)
        during = (tau >= 0) & (tau <= P)
        phase = 2.0 * math.pi * tau[during] / P
        e[during] = self.e0 + width * (tau[during] / P - np.sin(phase) / (2.0 * math.pi))
        v[during] = width / (P * dt) * (1.0 - np.cos(phase))
        e[tau > P] = self.e0 + width
        v[(tau == P)] = 0.0
        return e, v

    @property
    def peak_frames(self) -> tuple[int, int] | None:
        """Frames of the two lateral-acceleration extremes of the maneuver."""
        if self.lane_change_frame is None:
            return None
        return (self.lane_change_frame + self.period_frames // 4,
                self.lane_change_frame + 3 * self.period_frames // 4)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["agent_type"] = self.agent_type.value
        return data


def crossing_offset(width: float = 3.5, period_frames: int = 80, e0: float = MERGE_START_OFFSET) -> int:
    """Frames from maneuver start to the first frame past the lane boundary."""
    for tau in range(period_frames + 1):
        g = tau / period_frames - math.sin(2.0 * math.pi * tau / period_frames) / (2.0 * math.pi)
        if e0 + width * g - width / 2.0 > 0.0:
            return tau
    raise GenerationError("maneuver never crosses the boundary")


def _lane_of(e: np.ndarray, width: float) -> np.ndarray:
    half = width / 2.0
    a, t = np.abs(e), np.abs(e - width)
    lane = np.full(len(e), -1, dtype=np.int64)
    lane[(a <= half) & (a <= t)] = 0
    lane[(t <= half) & (t < a)] = 1
    return lane


def _peak_present(vehicle: ScriptedVehicle, peak: int) -> bool:
    before = peak - vehicle.first_frame
    after = vehicle.last_frame - peak
    if before >= PEAK_EDGE_MARGIN and after >= PEAK_EDGE_MARGIN:
        return True
    if before < 0 or after < 0:
        return False
    raise GenerationError(f"vehicle {vehicle.vehicle_id}: peak at {peak} too close to the track edge")


def _scene_truth(layout: SceneLayout, vehicles: Sequence[ScriptedVehicle],
                 min_event_frames: int = 10) -> dict:
    """Brute-force expected crossings, bounds, neighbors and covariates."""
    W = layout.lane_width_m
    state = {}
    for v in vehicles:
        e, _ = v.lateral(layout.dt, W)
        state[v.vehicle_id] = (v, v.longitudinal(layout.dt), e, _lane_of(e, W))

    def at(frame: int):
        for vid in sorted(state):
            v, s, e, lane = state[vid]
            if v.first_frame <= frame <= v.last_frame:
                row = frame - v.first_frame
                yield vid, float(s[row]), int(lane[row]), v.agent_type

    crossings, peaks, events, discards = {}, {}, [], []
    for vid in sorted(state):
        v, s, e, _ = state[vid]
        side = (e - W / 2.0) > 0.0
        flips = [int(f) for f in v.frames[1:][side[1:] != side[:-1]]]
        if not flips:
            continue
        crossings[vid] = flips
        if v.peak_frames is not None:
            peaks[vid] = list(v.peak_frames)
        for t_cross in flips:
            reason = None
            if v.agent_type is AgentType.TRUCK:
                reason = errors.TRUCK_INVOLVED
            elif v.peak_frames is None or not _peak_present(v, v.peak_frames[0]):
                reason = errors.NO_START_PEAK
            elif not _peak_present(v, v.peak_frames[1]):
                reason = errors.NO_END_PEAK
            elif v.peak_frames[1] - v.peak_frames[0] + 1 < min_event_frames:
                reason = errors.TOO_SHORT
            if reason is not None:
                discards.append({"vehicle_id": vid, "t_cross": t_cross, "reason": reason})
                continue
            t_start, t_end = v.peak_frames
            gaps, remaining, density, neighbor_ids = [], [], [], []
            truck_neighbor = False
            for frame in range(t_start, t_end + 1):
                s_subject = float(s[frame - v.first_frame])
                present = [p for p in at(frame) if p[0] != vid]
                row_ids, row_gaps = {}, {}
                for role, lane, ahead in (("f", 0, True), ("r", 0, False), ("ft", 1, True), ("rt", 1, False)):
                    cands = [(abs(ps - s_subject), pid, ptype) for pid, ps, plane, ptype in present
                             if plane == lane and ((ps > s_subject) if ahead else (ps <= s_subject))]
                    best = min(cands, default=None)
                    if best is None or best[0] > layout.default_gap_m:
                        row_ids[role], row_gaps[role] = None, layout.default_gap_m
                    else:
                        row_ids[role], row_gaps[role] = best[1], max(best[0], MIN_GAP_M)
                        truck_neighbor |= best[2] is AgentType.TRUCK
                on_ramp = 1 + sum(1 for pid, ps, plane, _ in present
                                  if plane == 0 and 0.0 <= ps <= layout.ramp_length_m)
                gaps.append([row_gaps[r] for r in ROLES])
                remaining.append(max(layout.ramp_length_m - s_subject, 0.0))
                density.append(on_ramp / (layout.ramp_length_m * layout.lane_count))
                neighbor_ids.append(row_ids)
            if truck_neighbor:
                discards.append({"vehicle_id": vid, "t_cross": t_cross, "reason": errors.TRUCK_INVOLVED})
                continue
            events.append({
                "event_id": f"{vid}-{t_cross}",
                "vehicle_id": vid,
                "t_cross": t_cross,
                "t_start": t_start,
                "t_end": t_end,
                "gaps": np.asarray(gaps),
                "l": np.asarray(remaining),
                "d": np.asarray(density),
                "neighbor_ids": neighbor_ids,
            })
    return {"crossings": crossings, "peaks": peaks, "events": events, "discards": discards}


def build_scene(layout: SceneLayout, vehicles: Sequence[ScriptedVehicle],
                seed: int = 0) -> tuple[Scene, SyntheticLedger]:
    """Turn scripted vehicles into a Scene and its ledger."""
    geometry = layout.geometry()
    poly = geometry.acceleration_lane_centerline
    dt = layout.dt
    tracks: dict[int, Track] = {}
    for v in vehicles:
        if v.vehicle_id in tracks:
            raise GenerationError(f"duplicate vehicle id {v.vehicle_id}")
        if v.n_frames < 1:
            raise GenerationError(f"vehicle {v.vehicle_id} has no frames")
        s = v.longitudinal(dt)
        if s.min() < 0.0 or s.max() > layout.road_length_m:
            raise GenerationError(f"vehicle {v.vehicle_id} leaves the modeled road")
        e, v_lat = v.lateral(dt, layout.lane_width_m)
        position, tangent = layout.to_world(s, e, poly)
        normal = np.column_stack([-tangent[:, 1], tangent[:, 0]])
        velocity = v.speed * tangent + v_lat[:, None] * normal
        length, width = VEHICLE_SIZE[v.agent_type]
        tracks[v.vehicle_id] = Track(
            track_id=v.vehicle_id,
            agent_type=v.agent_type,
            frame_index=v.frames.astype(np.int64),
            timestamp_ms=(v.frames * 1000 // layout.sampling_hz).astype(np.int64),
            position=position,
            velocity=velocity,
            heading=np.arctan2(velocity[:, 1], velocity[:, 0]),
            length_m=length,
            width_m=width,
        )
    scene = Scene(tracks=tracks, geometry=geometry, sampling_hz=layout.sampling_hz)
    truth = _scene_truth(layout, vehicles)
    truth["layout"] = asdict(layout)
    truth["vehicles"] = [v.to_dict() for v in vehicles]
    return scene, SyntheticLedger(kind="scene", seed=seed, truth=truth)


def _merger(rng: np.random.Generator, vehicle_id: int, start: int, layout: SceneLayout,
            agent_type: AgentType = AgentType.CAR, truncated: bool = False) -> ScriptedVehicle:
    period = int(rng.choice([60, 80, 100]))
    pre = int(rng.integers(PEAK_EDGE_MARGIN + 2, 20))
    post = int(rng.integers(10, 20))
    speed = float(rng.uniform(12.0, 18.0))
    s0 = float(rng.uniform(0.0, 20.0))
    lc = start + pre
    first = start
    if truncated:
        cross = crossing_offset(layout.lane_width_m, period)
        first = lc + int(rng.integers(period // 4 + PEAK_EDGE_MARGIN, cross - PEAK_EDGE_MARGIN))
        s0 += speed * (first - start) * layout.dt
    return ScriptedVehicle(
        vehicle_id=vehicle_id,
        first_frame=first,
        n_frames=lc + period + post - first + 1,
        s0=s0,
        speed=speed,
        e0=MERGE_START_OFFSET,
        lane_change_frame=lc,
        period_frames=period,
        agent_type=agent_type,
    )


def _cruiser(rng: np.random.Generator, vehicle_id: int, horizon: int, layout: SceneLayout,
             lane: int, agent_type: AgentType = AgentType.CAR) -> ScriptedVehicle:
    if lane == 1:
        speed, limit = float(rng.uniform(18.0, 28.0)), layout.road_length_m
    else:
        speed, limit = float(rng.uniform(8.0, 14.0)), layout.ramp_length_m * 0.9
    first = int(rng.integers(0, max(horizon - 10, 1)))
    reach = int(limit / (speed * layout.dt))
    n_frames = max(min(horizon - first, reach), 10)
    return ScriptedVehicle(
        vehicle_id=vehicle_id,
        first_frame=first,
        n_frames=n_frames,
        s0=0.0,
        speed=speed,
        e0=layout.lane_width_m if lane == 1 else 0.0,
        agent_type=agent_type,
    )


def gen_merging_scene(layout: SceneLayout | None = None, n_vehicles: int = 10, seed: int = 0,
                      n_through: int = 6, n_ramp: int = 2, n_truncated: int = 0,
                      n_truck_mergers: int = 0, n_through_trucks: int = 0,
                      spacing_frames: int = 15) -> tuple[Scene, SyntheticLedger]:
    """Random scene with ``n_vehicles`` valid merging cars plus background traffic.

    Truncated mergers (track starts after the first acceleration peak) and
    truck mergers produce ledger discards; through trucks may too.
    """
    layout = layout or SceneLayout()
    rng = make_rng(seed)
    vehicles: list[ScriptedVehicle] = []
    next_id = 1
    kinds = ([("car", False)] * n_vehicles + [("car", True)] * n_truncated
             + [("truck", False)] * n_truck_mergers)
    for n, (kind, truncated) in enumerate(kinds):
        start = n * spacing_frames + int(rng.integers(0, spacing_frames))
        agent = AgentType.TRUCK if kind == "truck" else AgentType.CAR
        vehicles.append(_merger(rng, next_id, start, layout, agent, truncated))
        next_id += 1
    horizon = max((v.last_frame + 1 for v in vehicles), default=100)
    for lane, count, agent in ((1, n_through, AgentType.CAR), (0, n_ramp, AgentType.CAR),
                               (1, n_through_trucks, AgentType.TRUCK)):
        for _ in range(count):
            vehicles.append(_cruiser(rng, next_id, horizon, layout, lane, agent))
            next_id += 1
    scene, ledger = build_scene(layout, vehicles, seed)
    logger.info("Generated scene: %d vehicles, %d expected events, %d expected discards",
                len(vehicles), len(ledger.truth["events"]), len(ledger.truth["discards"]))
    return scene, ledger


# =============================================================================
# Primitive families
# =============================================================================

def default_templates() -> list[np.ndarray]:
    """Three behavior templates (v_x, v_y, acc_x, acc_y) with distinct shapes."""
    steady = np.column_stack([np.full(40, 0.3), np.full(40, 20.0), np.zeros(40), np.zeros(40)])
    t = np.linspace(0.0, 1.0, 50)
    accelerating = np.column_stack([t, 24.0 + 2.0 * t, np.full(50, 0.3), np.full(50, 0.5)])
    t = np.linspace(0.0, 1.0, 60)
    braking = np.column_stack([0.5 * np.sin(np.pi * t), 16.0 - 3.0 * t, 0.5 * np.cos(np.pi * t), np.full(60, -1.0)])
    return [steady, accelerating, braking]


def _warp(template: np.ndarray, rng: np.random.Generator, warp: float) -> np.ndarray:
    if warp <= 0.0:
        return template.copy()
    L = len(template)
    length = max(int(round(L * rng.uniform(1.0 - warp, 1.0 + warp))), 2)
    steps = 1.0 + warp * rng.uniform(-1.0, 1.0, length - 1)
    grid = np.concatenate([[0.0], np.cumsum(steps)])
    grid = grid / grid[-1] * (L - 1)
    return np.column_stack([np.interp(grid, np.arange(L), template[:, d]) for d in range(template.shape[1])])


def gen_primitive_families(templates: Sequence[np.ndarray] | None = None, noise_sd: float = 0.05,
                           n_per_family: int = 30, seed: int = 0, warp: float = 0.2,
                           min_separation: float = 20.0,
                           ) -> tuple[list[Primitive], np.ndarray, SyntheticLedger]:
    """Warped, noisy copies of each template with their family labels.

    Raises GenerationError when the smallest between-template DTW distance
    is below ``min_separation`` times the largest member-to-template distance.
    """
    templates = [np.asarray(t, dtype=float) for t in (templates if templates is not None else default_templates())]
    if len(templates) < 1:
        raise InputError("need at least one template")
    rng = make_rng(seed)
    primitives: list[Primitive] = []
    labels: list[int] = []
    within = 0.0
    for f, template in enumerate(templates):
        for n in range(n_per_family):
            series = _warp(template, rng, warp)
            if noise_sd > 0.0:
                series = series + rng.normal(0.0, noise_sd, series.shape)
            within = max(within, dtw_distance(series, template).distance)
            primitives.append(Primitive(
                primitive_id=f"family{f}/{n}",
                event_id=f"family{f}",
                state_label=f,
                start_frame=0,
                end_frame=len(series) - 1,
                series=series,
            ))
            labels.append(f)
    between = min(
        (dtw_distance(a, b).distance for i, a in enumerate(templates) for b in templates[i + 1:]),
        default=math.inf,
    )
    ratio = between / within if within > 0.0 else math.inf
    if ratio < min_separation:
        raise GenerationError(
            f"template separation ratio {ratio:.2f} < {min_separation}; "
            "use more distinct templates or less noise"
        )
    ledger = SyntheticLedger(kind="families", seed=seed, truth={
        "templates": templates,
        "labels": labels,
        "noise_sd": noise_sd,
        "warp": warp,
        "between": between,
        "within": within,
        "separation_ratio": ratio,
    })
    return primitives, np.asarray(labels), ledger

