"""Exception hierarchy and reason-coded records shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass


class OnrampError(Exception):
    """Base class for every error raised by the library."""


class ConfigError(OnrampError):
    pass


class SchemaError(OnrampError):
    """A required column is missing from a track table."""

    def __init__(self, column: str, path: str | None = None):
        self.column = column
        self.path = path
        where = f" in {path}" if path else ""
        super().__init__(f"missing required column '{column}'{where}")


class GeometryError(OnrampError):
    pass


class InputError(OnrampError, ValueError):
    pass


class ModelStateError(OnrampError):
    pass


class NumericalError(OnrampError):
    """A sampler step produced a non-finite or non-positive draw."""

    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")


class GenerationError(OnrampError):
    pass


# Reason codes for rejected tracks and discarded crossings
DUPLICATE_FRAME = "duplicate_frame"
NON_MONOTONE_TIMESTAMP = "non_monotone_timestamp"
IRREGULAR_SAMPLING = "irregular_sampling"
TOO_FEW_FRAMES = "too_few_frames"
NO_START_PEAK = "no_start_peak"
NO_END_PEAK = "no_end_peak"
TOO_SHORT = "too_short"
TRUCK_INVOLVED = "truck_involved"


@dataclass(frozen=True)
class TrackRejection:
    track_id: int
    reason: str
    detail: str = ""


@dataclass(frozen=True)
class Discard:
    track_id: int
    t_cross: int
    reason: str
    detail: str = ""


class DiscardError(OnrampError):
    """Raised inside extraction when a crossing cannot become an event."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        self.detail = detail
        super().__init__(f"{reason}: {detail}" if detail else reason)
