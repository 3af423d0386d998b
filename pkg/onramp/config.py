"""Pipeline configuration: defaults, loading, strict key checking and validation."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from onramp.errors import ConfigError
from onramp.io import write_json
from onramp.merge_extractor import ExtractionConfig
from onramp.nhmm import MAX_STATES, FitConfig

CONFIG_VERSION = 1
CONFIG_FILE = "onramp.json"
DECODERS = ("mode", "viterbi")

# Keys whose default is null, with the type they take when set
NULLABLE_TYPES = {
    "tracks": str,
    "geometry": str,
    "nhmm.k_states": int,
    "tskm.k": int,
    "tskm.window": int,
}

DEFAULT_CONFIG = {
    "config_version": CONFIG_VERSION,
    "tracks": None,
    "geometry": None,
    "sampling_hz": 10,
    "seed": 0,
    "jobs": 1,
    "out": "out",
    "extraction": {
        "peak_floor": 0.1,
        "lane_width_m": 3.5,
        "min_event_frames": 10,
        "smoothing_window": 5,
    },
    "nhmm": {
        "iterations": 4000,
        "burn_in": 2000,
        "thinning": 2,
        "credible_level": 0.95,
        "k_states": None,
        "k_range": [1, 6],
        "pooled": False,
        "homogeneous": False,
        "decoder": "mode",
        "prior_mean_scale": 4.0,
        "iw_df": 6.0,
        "coef_sd": 5.0,
        "dirichlet_alpha": 1.0,
        "pg_truncation": 100,
        "degenerate_patience": 50,
        "label_order_dim": 1,
    },
    "segmentation": {
        "min_frames": 10,
    },
    "tskm": {
        "k": None,
        "k_range": [1, 10],
        "restarts": 3,
        "max_iter": 50,
        "dba_iterations": 10,
        "window": None,
        "change_rate_threshold": 0.05,
        "standardize": True,
    },
    "synth": {
        "shape": "straight",
        "n_vehicles": 25,
        "n_through": 6,
        "n_ramp": 2,
        "n_truncated": 2,
        "n_truck_mergers": 1,
    },
}


def _merge(defaults: dict, user: dict, prefix: str = "") -> dict:
    """Overlay user values on defaults; unknown keys are errors."""
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        dotted = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key '{dotted}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{dotted}' must be an object")
            merged[key] = _merge(defaults[key], value, f"{dotted}.")
        else:
            merged[key] = value
    return merged


@dataclass
class PipelineConfig:
    """Resolved configuration. ``data`` mirrors the DEFAULT_CONFIG layout."""
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))
    source: Path | None = None

    def __getitem__(self, key: str):
        return self.data[key]

    @property
    def out(self) -> Path:
        return Path(self.data["out"])

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def jobs(self) -> int:
        return int(self.data["jobs"])

    def set(self, dotted: str, value) -> None:
        """Override one value by dotted key (CLI flags)."""
        node = self.data
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"unknown config key '{dotted}'")
        node[leaf] = value

    def extraction_config(self) -> ExtractionConfig:
        return ExtractionConfig(**self.data["extraction"])

    def fit_config(self, seed: int | None = None) -> FitConfig:
        n = self.data["nhmm"]
        return FitConfig(
            iterations=int(n["iterations"]),
            burn_in=int(n["burn_in"]),
            thinning=int(n["thinning"]),
            credible_level=float(n["credible_level"]),
            seed=self.seed if seed is None else seed,
            prior_mean_scale=float(n["prior_mean_scale"]),
            iw_df=float(n["iw_df"]),
            coef_sd=float(n["coef_sd"]),
            dirichlet_alpha=float(n["dirichlet_alpha"]),
            pg_truncation=int(n["pg_truncation"]),
            degenerate_patience=int(n["degenerate_patience"]),
            homogeneous=bool(n["homogeneous"]),
            label_order_dim=int(n["label_order_dim"]),
        )

    def nhmm_k_range(self) -> range:
        lo, hi = self.data["nhmm"]["k_range"]
        return range(int(lo), int(hi) + 1)

    def tskm_k_range(self) -> range:
        lo, hi = self.data["tskm"]["k_range"]
        return range(int(lo), int(hi) + 1)

    def validate(self, command: str | None = None) -> list[str]:
        """Return every problem found (empty list when valid)."""
        d = self.data
        problems: list[str] = []

        def check(ok: bool, message: str) -> None:
            if not ok:
                problems.append(message)

        type_problems = _type_problems(DEFAULT_CONFIG, d)
        if type_problems:
            return type_problems

        check(d["config_version"] == CONFIG_VERSION,
              f"config_version must be {CONFIG_VERSION} (got {d['config_version']!r})")
        check(isinstance(d["sampling_hz"], int) and d["sampling_hz"] > 0, "sampling_hz must be a positive integer")
        check(isinstance(d["jobs"], int) and d["jobs"] >= 1, f"jobs must be >= 1 (got {d['jobs']!r})")
        check(isinstance(d["seed"], int) and d["seed"] >= 0, f"seed must be a non-negative integer (got {d['seed']!r})")

        e = d["extraction"]
        check(e["peak_floor"] >= 0, f"extraction.peak_floor must be >= 0 (got {e['peak_floor']})")
        check(e["lane_width_m"] > 0, f"extraction.lane_width_m must be > 0 (got {e['lane_width_m']})")
        check(e["min_event_frames"] >= 2, f"extraction.min_event_frames must be >= 2 (got {e['min_event_frames']})")
        check(e["smoothing_window"] >= 1 and e["smoothing_window"] % 2 == 1,
              f"extraction.smoothing_window must be odd and >= 1 (got {e['smoothing_window']})")

        n = d["nhmm"]
        check(n["thinning"] >= 1, f"nhmm.thinning must be >= 1 (got {n['thinning']})")
        check(0 <= n["burn_in"] < n["iterations"],
              f"nhmm.burn_in must be in [0, iterations) (got {n['burn_in']} of {n['iterations']})")
        check(0 < n["credible_level"] < 1, f"nhmm.credible_level must be in (0, 1) (got {n['credible_level']})")
        check(n["decoder"] in DECODERS, f"nhmm.decoder must be one of {', '.join(DECODERS)} (got {n['decoder']!r})")
        check(n["pg_truncation"] >= 1, "nhmm.pg_truncation must be >= 1")
        check(n["label_order_dim"] in range(4), "nhmm.label_order_dim must be in 0..3")
        problems += _check_range("nhmm.k_range", n["k_range"], 1, MAX_STATES)
        if n["k_states"] is not None:
            check(1 <= n["k_states"] <= MAX_STATES, f"nhmm.k_states must be in 1..{MAX_STATES}")

        check(d["segmentation"]["min_frames"] >= 0, "segmentation.min_frames must be >= 0")

        t = d["tskm"]
        check(t["restarts"] >= 1, f"tskm.restarts must be >= 1 (got {t['restarts']})")
        check(t["max_iter"] >= 1, f"tskm.max_iter must be >= 1 (got {t['max_iter']})")
        check(t["dba_iterations"] >= 0, "tskm.dba_iterations must be >= 0")
        check(t["window"] is None or t["window"] >= 0, "tskm.window must be null or >= 0")
        check(t["change_rate_threshold"] > 0, "tskm.change_rate_threshold must be > 0")
        problems += _check_range("tskm.k_range", t["k_range"], 1, None)
        if t["k"] is not None:
            check(t["k"] >= 1, "tskm.k must be >= 1")

        s = d["synth"]
        check(s["shape"] in ("straight", "arc"), "synth.shape must be straight or arc")
        check(s["n_vehicles"] >= 0, "synth.n_vehicles must be >= 0")

        if command in ("extract",):
            for key in ("tracks", "geometry"):
                if d[key] is None:
                    problems.append(f"{key} is required for {command}")
                elif not Path(d[key]).exists():
                    problems.append(f"{key} not found: {d[key]}")
        return problems


def _type_name(value) -> str:
    return type(value).__name__


def _type_problems(defaults: dict, data: dict, prefix: str = "") -> list[str]:
    """Values whose type does not match the default's; bounds checks assume these pass."""
    problems = []
    for key, default in defaults.items():
        dotted = f"{prefix}{key}"
        value = data[key]
        if isinstance(default, dict):
            problems += _type_problems(default, value, f"{dotted}.")
            continue
        if default is None:
            if value is None:
                continue
            expected = NULLABLE_TYPES[dotted]
        else:
            expected = type(default)
        if expected is list:
            continue  # ranges get their own check
        if expected is bool:
            ok = isinstance(value, bool)
        elif expected is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        else:
            ok = isinstance(value, expected) and not isinstance(value, bool)
        if not ok:
            problems.append(f"{dotted} must be {expected.__name__} (got {_type_name(value)} {value!r})")
    return problems


def _check_range(name: str, value, lo: int, hi: int | None) -> list[str]:
    if not (isinstance(value, (list, tuple)) and len(value) == 2):
        return [f"{name} must be [min, max]"]
    a, b = value
    if not (isinstance(a, int) and isinstance(b, int)) or a < lo or a > b or (hi is not None and b > hi):
        upper = f", max <= {hi}" if hi is not None else ""
        return [f"{name} must be ascending with min >= {lo}{upper} (got {list(value)})"]
    return []


def load_config(path: Path | None = None) -> PipelineConfig:
    """Load a config file over DEFAULT_CONFIG. ``None`` returns the defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as f:
            user = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path} ({e})") from e
    if not isinstance(user, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    if "config_version" not in user:
        raise ConfigError(f"{path} has no config_version")
    if user["config_version"] != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {user['config_version']!r} (expected {CONFIG_VERSION})")
    return PipelineConfig(data=_merge(DEFAULT_CONFIG, user), source=path)


def save_default_config(path: Path) -> Path:
    """Write DEFAULT_CONFIG to ``path``. Returns the path."""
    path = Path(path)
    if path.is_dir():
        path = path / CONFIG_FILE
    write_json(DEFAULT_CONFIG, path)
    return path
