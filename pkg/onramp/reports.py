"""Plot-ready reports computed from the fit and cluster artifacts alone."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from onramp.errors import InputError
from onramp.io import read_json, read_jsonl, write_csv
from onramp.merge_extractor import COVARIATE_NAMES, MergeEvent
from onramp.nhmm import CovariateScaler, NhmmParams, transition_matrix_at

logger = logging.getLogger(__name__)

EVENTS_FILE = "events.jsonl"
MODELS_DIR = "models"
PRIMITIVES_FILE = "primitives.jsonl"
CLUSTERS_FILE = "clusters.json"

PATTERN_FREQUENCY_FIELDS = ["cluster", "count", "share"]
SIGNIFICANCE_FIELDS = ["rank", "covariate", "significant_events", "tested_events", "frequency"]
TRANSITION_SERIES_FIELDS = ["event_id", "frame", "i", "j", "p"]
TRANSITION_MEAN_FIELDS = ["event_id", "i", "j", "p"]
CHAIN_FIELDS = ["event_id", "n_primitives", "chain"]
COEFFICIENT_FIELDS = ["event_id", "state", "covariate", "mean_std", "mean_raw", "lower", "upper", "significant"]
PATTERN_TRANSITION_FIELDS = ["from_cluster", "to_cluster", "count"]


@dataclass
class Artifacts:
    events: list[MergeEvent]
    models: list[dict]
    primitives: list[dict]
    clusters: dict


def load_artifacts(out: Path) -> Artifacts:
    """Read every upstream artifact; InputError names the first one missing."""
    out = Path(out)
    events = [MergeEvent.from_dict(r) for r in read_jsonl(out / EVENTS_FILE)]
    models_dir = out / MODELS_DIR
    if not models_dir.is_dir():
        raise InputError(f"missing artifact: {models_dir}")
    models = [read_json(p) for p in sorted(models_dir.glob("*.json"))]
    primitives = read_jsonl(out / PRIMITIVES_FILE)
    clusters = read_json(out / CLUSTERS_FILE)
    return Artifacts(events=events, models=models, primitives=primitives, clusters=clusters)


def _event_order(events: list[MergeEvent]) -> dict[str, int]:
    return {e.event_id: n for n, e in enumerate(events)}


def pattern_frequency(clusters: dict) -> list[dict]:
    counts = Counter(clusters["assignments"].values())
    total = sum(counts.values())
    return [
        {"cluster": c, "count": counts.get(c, 0), "share": counts.get(c, 0) / total if total else 0.0}
        for c in range(clusters["k_clusters"])
    ]


def significance_counts(models: list[dict]) -> list[dict]:
    """Events in which each covariate is significant for at least one state."""
    significant = Counter()
    tested = Counter()
    for model in models:
        sig = model.get("significance")
        if not sig:
            continue
        flags = np.asarray(sig["significant"], dtype=bool).reshape(model["k_states"], -1)
        for c, name in enumerate(sig["covariate_names"]):
            tested[name] += len(model["event_ids"])
            if flags[:, c].any():
                significant[name] += len(model["event_ids"])
    names = list(COVARIATE_NAMES) + sorted(set(tested) - set(COVARIATE_NAMES))
    rows = [
        {
            "covariate": name,
            "significant_events": significant[name],
            "tested_events": tested[name],
            "frequency": significant[name] / tested[name] if tested[name] else 0.0,
        }
        for name in names
    ]
    rows.sort(key=lambda r: (-r["significant_events"], names.index(r["covariate"])))
    for rank, row in enumerate(rows, start=1):
        row["rank"] = rank
    return rows


def _model_regressors(model: dict, event: MergeEvent) -> tuple[NhmmParams, np.ndarray]:
    params = NhmmParams.from_dict(model["params"])
    Xs = CovariateScaler.from_dict(model["scaler"]).transform(event.X)
    if model.get("homogeneous"):
        Xs = Xs[:, :0]
    return params, Xs


def transition_series(models: list[dict], events: list[MergeEvent]) -> tuple[list[dict], list[dict]]:
    """Per-frame transition matrices at x_t and their time means, per event."""
    by_id = {e.event_id: e for e in events}
    order = _event_order(events)
    series_rows, mean_rows = [], []
    covered = [(order[eid], eid, model) for model in models for eid in model["event_ids"] if eid in by_id]
    for _, event_id, model in sorted(covered, key=lambda c: c[0]):
        event = by_id[event_id]
        params, Xs = _model_regressors(model, event)
        mats = np.stack([transition_matrix_at(params, x) for x in Xs])
        N = params.n_states
        for row, frame in enumerate(event.frames):
            for i in range(N):
                for j in range(N):
                    series_rows.append({"event_id": event_id, "frame": int(frame), "i": i, "j": j,
                                        "p": float(mats[row, i, j])})
        mean = mats.mean(axis=0)
        for i in range(N):
            for j in range(N):
                mean_rows.append({"event_id": event_id, "i": i, "j": j, "p": float(mean[i, j])})
    return series_rows, mean_rows


def pattern_chains(primitives: list[dict], clusters: dict, events: list[MergeEvent]) -> list[dict]:
    """Ordered cluster labels of each event's retained primitives."""
    assignments = clusters["assignments"]
    by_event: dict[str, list[tuple[int, int]]] = {}
    for p in primitives:
        label = assignments.get(p["primitive_id"])
        if label is None:
            continue
        by_event.setdefault(p["event_id"], []).append((int(p["start_frame"]), int(label)))
    rows = []
    for event in events:
        chain = [label for _, label in sorted(by_event.get(event.event_id, []))]
        rows.append({
            "event_id": event.event_id,
            "n_primitives": len(chain),
            "chain": ">".join(str(c) for c in chain),
        })
    return rows


def pattern_transitions(chains: list[dict]) -> list[dict]:
    """Counts of consecutive pattern pairs over all chains."""
    counts = Counter()
    for row in chains:
        labels = [int(c) for c in row["chain"].split(">")] if row["chain"] else []
        counts.update(zip(labels, labels[1:]))
    return [{"from_cluster": a, "to_cluster": b, "count": n} for (a, b), n in sorted(counts.items())]


def coefficients(models: list[dict]) -> list[dict]:
    rows = []
    for model in sorted(models, key=lambda m: m["model_id"]):
        sig = model.get("significance")
        if not sig:
            continue
        names = sig["covariate_names"]
        shape = (model["k_states"], len(names))
        arrays = {key: np.asarray(sig[key], dtype=float).reshape(shape)
                  for key in ("mean_std", "mean_raw", "lower", "upper")}
        flags = np.asarray(sig["significant"], dtype=bool).reshape(shape)
        for state in range(model["k_states"]):
            for c, name in enumerate(names):
                rows.append({
                    "event_id": model["model_id"],
                    "state": state,
                    "covariate": name,
                    "mean_std": float(arrays["mean_std"][state, c]),
                    "mean_raw": float(arrays["mean_raw"][state, c]),
                    "lower": float(arrays["lower"][state, c]),
                    "upper": float(arrays["upper"][state, c]),
                    "significant": bool(flags[state, c]),
                })
    return rows


def write_reports(out: Path) -> dict[str, Path]:
    """Compute every report from the artifacts under ``out`` and write them there."""
    out = Path(out)
    art = load_artifacts(out)
    chains = pattern_chains(art.primitives, art.clusters, art.events)
    series, means = transition_series(art.models, art.events)
    outputs = {
        "pattern_frequency.csv": (pattern_frequency(art.clusters), PATTERN_FREQUENCY_FIELDS),
        "significance_counts.csv": (significance_counts(art.models), SIGNIFICANCE_FIELDS),
        "transition_series.csv": (series, TRANSITION_SERIES_FIELDS),
        "transition_mean.csv": (means, TRANSITION_MEAN_FIELDS),
        "pattern_chains.csv": (chains, CHAIN_FIELDS),
        "coefficients.csv": (coefficients(art.models), COEFFICIENT_FIELDS),
        "pattern_transitions.csv": (pattern_transitions(chains), PATTERN_TRANSITION_FIELDS),
    }
    written = {}
    for name, (rows, fields) in outputs.items():
        write_csv(rows, fields, out / name)
        written[name] = out / name
    logger.info("Wrote %d report files to %s", len(written), out)
    return written
