"""Driving-primitive segmentation of decoded state sequences."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from onramp.errors import InputError
from onramp.merge_extractor import BEHAVIOR_NAMES, MergeEvent

logger = logging.getLogger(__name__)

DEFAULT_MIN_FRAMES = 10


@dataclass(frozen=True, eq=False)
class Primitive:
    """A maximal run of one decoded state; frame bounds are inclusive."""
    primitive_id: str
    event_id: str
    state_label: int
    start_frame: int
    end_frame: int
    series: np.ndarray

    @property
    def length(self) -> int:
        return self.end_frame - self.start_frame + 1

    def to_dict(self) -> dict:
        return {
            "primitive_id": self.primitive_id,
            "event_id": self.event_id,
            "state_label": self.state_label,
            "start_frame": self.start_frame,
            "end_frame": self.end_frame,
            "series": self.series,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Primitive:
        try:
            return cls(
                primitive_id=str(data["primitive_id"]),
                event_id=str(data["event_id"]),
                state_label=int(data["state_label"]),
                start_frame=int(data["start_frame"]),
                end_frame=int(data["end_frame"]),
                series=np.asarray(data["series"], dtype=float).reshape(-1, len(BEHAVIOR_NAMES)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"malformed primitive record ({e})") from e


def run_lengths(q) -> list[tuple[int, int, int]]:
    """(label, first row, last row) for every maximal run of equal labels."""
    q = np.asarray(q)
    if len(q) == 0:
        return []
    starts = np.concatenate([[0], np.nonzero(q[1:] != q[:-1])[0] + 1])
    ends = np.concatenate([starts[1:] - 1, [len(q) - 1]])
    return [(int(q[a]), int(a), int(b)) for a, b in zip(starts, ends)]


def segment(event: MergeEvent, q) -> list[Primitive]:
    """Split the event's behavior series at every change of decoded state."""
    q = np.asarray(q)
    if len(q) != event.T:
        raise InputError(f"state sequence has {len(q)} entries but event {event.event_id} has {event.T} frames")
    primitives = []
    for n, (label, lo, hi) in enumerate(run_lengths(q)):
        primitives.append(Primitive(
            primitive_id=f"{event.event_id}/{n}",
            event_id=event.event_id,
            state_label=label,
            start_frame=event.t_start + lo,
            end_frame=event.t_start + hi,
            series=event.O[lo:hi + 1],
        ))
    return primitives


def filter_min_duration(primitives: list[Primitive],
                        min_frames: int = DEFAULT_MIN_FRAMES) -> tuple[list[Primitive], int]:
    """Keep primitives strictly longer than min_frames. Returns (retained, dropped count)."""
    retained = [p for p in primitives if p.length > min_frames]
    dropped = len(primitives) - len(retained)
    if dropped:
        logger.debug("Dropped %d of %d primitives with length <= %d", dropped, len(primitives), min_frames)
    return retained, dropped
