"""Batch command-line front end: synth, extract, fit, cluster, report, run-all."""

from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from onramp import __version__
from onramp.config import CONFIG_FILE, PipelineConfig, load_config, save_default_config
from onramp.display import (
    format_bic_table,
    format_extraction_summary,
    format_fit_summary,
    format_inertia_curve,
    format_pattern_table,
)
from onramp.errors import ConfigError, InputError, OnrampError
from onramp.io import read_json, read_jsonl, write_csv, write_json, write_jsonl
from onramp.merge_extractor import (
    BEHAVIOR_NAMES,
    MergeEvent,
    describe_variables,
    discard_rows,
    extract_events,
)
from onramp.nhmm import (
    FitConfig,
    covariate_significance,
    decode_states,
    decode_viterbi,
    gibbs_fit,
    select_k,
)
from onramp.reports import CLUSTERS_FILE, EVENTS_FILE, MODELS_DIR, PRIMITIVES_FILE, write_reports
from onramp.rng import derive_seed
from onramp.segmenter import filter_min_duration, segment
from onramp.synthetic import SceneLayout, gen_merging_scene
from onramp.trajectory_store import load_scene, write_scene
from onramp.tskm import fit_tskm, inertia_curve, summarize_patterns

logger = logging.getLogger(__name__)

SYNTH_DIR = "synth"
DISCARDS_FILE = "discards.csv"
VARIABLE_STATS_FILE = "variable_statistics.csv"
STATES_FILE = "states.csv"
BIC_FILE = "bic_table.csv"
FIT_FAILURES_FILE = "fit_failures.csv"
INERTIA_FILE = "inertia_curve.csv"
POOLED_MODEL_ID = "pooled"
MIN_FITTED_SHARE = 0.9
MIN_SIGNIFICANCE_DRAWS = 100

DISCARD_FIELDS = ["track_id", "t_cross", "reason"]
VARIABLE_FIELDS = ["variable", "mean", "sd", "min", "max"]
STATES_FIELDS = ["event_id", "frame", "state"]
BIC_FIELDS = ["event_id", "k", "bic", "loglik", "n_params", "degenerate", "selected"]
FAILURE_FIELDS = ["event_id", "error"]
INERTIA_FIELDS = ["k", "lambda_w", "change_rate"]


# =============================================================================
# synth
# =============================================================================

def cmd_synth(config: PipelineConfig) -> int:
    """Write a synthetic scene (tracks.csv, geometry.json, ledger.json)."""
    s = config["synth"]
    layout = SceneLayout(
        shape=s["shape"],
        lane_width_m=config["extraction"]["lane_width_m"],
        sampling_hz=config["sampling_hz"],
    )
    scene, ledger = gen_merging_scene(
        layout,
        n_vehicles=s["n_vehicles"],
        seed=config.seed,
        n_through=s["n_through"],
        n_ramp=s["n_ramp"],
        n_truncated=s["n_truncated"],
        n_truck_mergers=s["n_truck_mergers"],
    )
    target = config.out / SYNTH_DIR
    write_scene(scene, target / "tracks.csv", target / "geometry.json")
    write_json(ledger.to_dict(), target / "ledger.json")
    print(f"Synthetic scene written to {target} "
          f"({len(scene.tracks)} vehicles, {len(ledger.truth['events'])} expected events)")
    return 0


# =============================================================================
# extract
# =============================================================================

def cmd_extract(config: PipelineConfig) -> int:
    """Load, extract and write events. 0 on events, 2 on none, 1 on input errors."""
    problems = config.validate("extract")
    if problems:
        for p in problems:
            print(f"Error: {p}")
        return 1
    try:
        scene = load_scene(Path(config["tracks"]), Path(config["geometry"]), config["sampling_hz"])
        result = extract_events(scene, config.extraction_config())
    except (OnrampError, ValueError) as e:
        print(f"Error: {e}")
        return 1
    out = config.out
    write_jsonl([e.to_dict() for e in result.events], out / EVENTS_FILE)
    write_csv(discard_rows(result.discards), DISCARD_FIELDS, out / DISCARDS_FILE)
    write_csv(describe_variables(result.events), VARIABLE_FIELDS, out / VARIABLE_STATS_FILE)
    print(format_extraction_summary(len(result.events), [d.reason for d in result.discards],
                                    len(scene.rejections)))
    if not result.events:
        print("Error: no merging events found in the scene")
        return 2
    return 0


# =============================================================================
# fit
# =============================================================================

def _emission_summary(mu: np.ndarray) -> list[dict]:
    return [{"state": k, **{name: float(v) for name, v in zip(BEHAVIOR_NAMES, row)}}
            for k, row in enumerate(mu)]


def fit_model(events: list[MergeEvent], model_id: str, fit_config: FitConfig,
              k_states: int | None, k_range: range, decoder: str = "mode") -> dict:
    """Fit one model (one event, or several pooled) and return its artifact record."""
    if k_states is None:
        selection = select_k(events, k_range, fit_config)
        samples = selection.fits[selection.best_k]
        bic_rows = selection.table
    else:
        samples = gibbs_fit(events, k_states, fit_config)
        bic_rows = []
    states = {}
    for n, event in enumerate(events):
        if decoder == "viterbi":
            q = decode_viterbi(samples, events, n)
        else:
            q = decode_states(samples, n)
        states[event.event_id] = q
    significance = None
    if samples.n_draws >= MIN_SIGNIFICANCE_DRAWS:
        significance = covariate_significance(samples, fit_config.credible_level).to_dict()
    else:
        logger.warning("Model %s: %d draws < %d, no significance computed",
                       model_id, samples.n_draws, MIN_SIGNIFICANCE_DRAWS)
    params = samples.posterior_mean()
    return {
        "model_id": model_id,
        "event_ids": [e.event_id for e in events],
        "k_states": samples.n_states,
        "homogeneous": fit_config.homogeneous,
        "decoder": decoder,
        "params": params.to_dict(),
        "scaler": samples.scaler.to_dict(),
        "covariate_names": list(samples.covariate_names),
        "significance": significance,
        "bic_table": bic_rows,
        "chain": samples.chain_metadata(),
        "states": states,
        "emission_summary": _emission_summary(params.mu),
    }


def _fit_task(task: tuple) -> dict:
    events, model_id, fit_config, k_states, k_range, decoder = task
    try:
        return fit_model(events, model_id, fit_config, k_states, k_range, decoder)
    except Exception as e:
        logger.warning("Fit failed for %s: %s: %s", model_id, type(e).__name__, e)
        return {"model_id": model_id, "event_ids": [ev.event_id for ev in events],
                "error": f"{type(e).__name__}: {e}"}


def _read_events(out: Path) -> list[MergeEvent]:
    return [MergeEvent.from_dict(r) for r in read_jsonl(out / EVENTS_FILE)]


def cmd_fit(config: PipelineConfig) -> int:
    """K selection (or fixed K), sampling and decoding; parallel across events."""
    out = config.out
    try:
        events = _read_events(out)
    except InputError as e:
        print(f"Error: {e}")
        return 1
    if not events:
        print(f"Error: {out / EVENTS_FILE} holds no events")
        return 1
    n = config["nhmm"]
    k_states = n["k_states"]
    k_range = config.nhmm_k_range()
    if n["pooled"]:
        tasks = [(events, POOLED_MODEL_ID, config.fit_config(derive_seed(config.seed, POOLED_MODEL_ID)),
                  k_states, k_range, n["decoder"])]
    else:
        tasks = [([e], e.event_id, config.fit_config(derive_seed(config.seed, e.event_id)),
                  k_states, k_range, n["decoder"]) for e in events]

    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_fit_task, tasks))
    else:
        results = [_fit_task(t) for t in tasks]

    models_dir = out / MODELS_DIR
    models_dir.mkdir(parents=True, exist_ok=True)
    for stale in models_dir.glob("*.json"):
        stale.unlink()
    by_event = {e.event_id: e for e in events}
    state_rows, bic_rows, failures = [], [], []
    fitted_events = 0
    selected = Counter()
    for record in results:
        if "error" in record:
            failures.append({"event_id": record["model_id"], "error": record["error"]})
            continue
        write_json(record, models_dir / f"{record['model_id']}.json")
        fitted_events += len(record["event_ids"])
        selected[record["k_states"]] += 1
        for event_id in record["event_ids"]:
            for frame, state in zip(by_event[event_id].frames, record["states"][event_id]):
                state_rows.append({"event_id": event_id, "frame": int(frame), "state": int(state)})
        for row in record["bic_table"]:
            bic_rows.append({"event_id": record["model_id"], **row})
    write_csv(state_rows, STATES_FIELDS, out / STATES_FILE)
    write_csv(bic_rows, BIC_FIELDS, out / BIC_FILE)
    write_csv(failures, FAILURE_FIELDS, out / FIT_FAILURES_FILE)

    if n["pooled"] and bic_rows:
        print(format_bic_table(bic_rows))
        print()
    print(format_fit_summary(fitted_events, len(events), selected))
    if fitted_events / len(events) < MIN_FITTED_SHARE:
        print(f"Error: only {fitted_events} of {len(events)} events fitted")
        return 1
    return 0


# =============================================================================
# cluster
# =============================================================================

def _decoded_states(out: Path) -> dict[str, list[int]]:
    models_dir = out / MODELS_DIR
    if not models_dir.is_dir():
        raise InputError(f"missing artifact: {models_dir}")
    states: dict[str, list[int]] = {}
    for path in sorted(models_dir.glob("*.json")):
        states.update(read_json(path)["states"])
    return states


def cmd_cluster(config: PipelineConfig) -> int:
    """Segment decoded events into primitives, filter them and cluster with TSKM."""
    out = config.out
    try:
        events = _read_events(out)
        states = _decoded_states(out)
    except InputError as e:
        print(f"Error: {e}")
        return 1
    primitives = []
    for event in events:
        if event.event_id in states:
            primitives.extend(segment(event, states[event.event_id]))
    min_frames = config["segmentation"]["min_frames"]
    retained, dropped = filter_min_duration(primitives, min_frames)
    print(f"Primitives: {len(retained)} retained, {dropped} dropped (length <= {min_frames} frames)")
    if not retained:
        print("Error: zero primitives left after the minimum-duration filter")
        return 1

    t = config["tskm"]
    fit_kwargs = {
        "max_iter": t["max_iter"],
        "restarts": t["restarts"],
        "dba_iterations": t["dba_iterations"],
        "window": t["window"],
        "standardize": t["standardize"],
    }
    if t["k"] is not None:
        if len(retained) < t["k"]:
            print(f"Error: {len(retained)} primitives < k = {t['k']} clusters")
            return 1
        model = fit_tskm(retained, t["k"], config.seed, **fit_kwargs)
        curve_rows = [{"k": t["k"], "lambda_w": model.inertia, "change_rate": None}]
        suggested = t["k"]
    else:
        ks = [k for k in config.tskm_k_range() if k <= len(retained)]
        if not ks:
            print(f"Error: {len(retained)} primitives < smallest k = {config.tskm_k_range()[0]}")
            return 1
        curve = inertia_curve(retained, ks, config.seed, t["change_rate_threshold"], **fit_kwargs)
        curve_rows, suggested = curve.rows, curve.suggested_k
        model = curve.models[suggested]
        print(format_inertia_curve(curve_rows, suggested))
        print()

    summary = summarize_patterns(model, retained)
    write_jsonl([p.to_dict() for p in retained], out / PRIMITIVES_FILE)
    write_json({
        **model.to_dict(),
        "suggested_k": suggested,
        "n_primitives": len(retained),
        "dropped_primitives": dropped,
        "min_frames": min_frames,
        "summary": summary,
    }, out / CLUSTERS_FILE)
    write_csv(curve_rows, INERTIA_FIELDS, out / INERTIA_FILE)
    print(format_pattern_table(summary))
    return 0


# =============================================================================
# report
# =============================================================================

def cmd_report(config: PipelineConfig) -> int:
    try:
        written = write_reports(config.out)
    except InputError as e:
        print(f"Error: {e}")
        return 1
    for name in written:
        print(f"  {name}")
    return 0


def cmd_run_all(config: PipelineConfig) -> int:
    """synth (when no tracks are configured), extract, fit, cluster, report."""
    if config["tracks"] is None:
        rc = cmd_synth(config)
        if rc:
            return rc
        config.set("tracks", str(config.out / SYNTH_DIR / "tracks.csv"))
        config.set("geometry", str(config.out / SYNTH_DIR / "geometry.json"))
    for step in (cmd_extract, cmd_fit, cmd_cluster, cmd_report):
        rc = step(config)
        if rc:
            return rc
    return 0


# =============================================================================
# CLI
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="onramp",
        description="Merging-behavior primitives and patterns from on-ramp trajectories",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", type=str, default=None,
                        help=f"Config file (see init-config; e.g. {CONFIG_FILE})")
    parser.add_argument("--seed", type=int, default=None, help="Master seed (overrides config)")
    parser.add_argument("--out", type=str, default=None, help="Output directory (overrides config)")
    parser.add_argument("--jobs", type=int, default=None, help="Parallel worker processes")
    parser.add_argument("--verbose", action="store_true", help="Log progress at INFO level")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="Generate a synthetic scene with a ground-truth ledger")

    p = sub.add_parser("extract", help="Extract merging events from a track table")
    p.add_argument("--tracks", type=str, default=None, help="Track table CSV")
    p.add_argument("--geometry", type=str, default=None, help="Lane geometry JSON")

    p = sub.add_parser("fit", help="Fit the NHMM per event and decode hidden states")
    p.add_argument("--k-states", type=int, default=None, help="Fixed number of hidden states (skips the BIC sweep)")
    p.add_argument("--iterations", type=int, default=None, help="Gibbs iterations")
    p.add_argument("--burn-in", type=int, default=None, help="Burn-in iterations")

    p = sub.add_parser("cluster", help="Segment primitives and cluster them with DTW K-means")
    p.add_argument("--k", type=int, default=None, help="Fixed number of clusters (skips the inertia sweep)")
    p.add_argument("--min-frames", type=int, default=None, help="Keep primitives longer than this")

    sub.add_parser("report", help="Write pattern, significance and transition reports")

    p = sub.add_parser("run-all", help="Run every stage in order")
    p.add_argument("--tracks", type=str, default=None, help="Track table CSV (default: synthesize)")
    p.add_argument("--geometry", type=str, default=None, help="Lane geometry JSON")
    p.add_argument("--k-states", type=int, default=None, help="Fixed number of hidden states")
    p.add_argument("--k", type=int, default=None, help="Fixed number of clusters")

    p = sub.add_parser("init-config", help="Write the default config file and exit")
    p.add_argument("path", nargs="?", default=CONFIG_FILE, help=f"Destination (default: {CONFIG_FILE})")
    return parser


_OVERRIDES = {
    "seed": "seed",
    "out": "out",
    "jobs": "jobs",
    "tracks": "tracks",
    "geometry": "geometry",
    "k_states": "nhmm.k_states",
    "iterations": "nhmm.iterations",
    "burn_in": "nhmm.burn_in",
    "k": "tskm.k",
    "min_frames": "segmentation.min_frames",
}

COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "fit": cmd_fit,
    "cluster": cmd_cluster,
    "report": cmd_report,
    "run-all": cmd_run_all,
}


def main(argv: list[str] | None = None) -> int:
    """Main entry point. Returns exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )

    if args.command == "init-config":
        path = save_default_config(Path(args.path))
        print(f"Config written to {path}")
        print("Edit this file to set your defaults, then pass it with --config.")
        return 0

    try:
        config = load_config(Path(args.config) if args.config else None)
        for attr, key in _OVERRIDES.items():
            value = getattr(args, attr, None)
            if value is not None:
                config.set(key, value)
    except ConfigError as e:
        print(f"Error: {e}")
        return 1
    problems = config.validate()
    if problems:
        for p in problems:
            print(f"Error: {p}")
        return 1
    return COMMANDS[args.command](config)


if __name__ == "__main__":
    sys.exit(main())
