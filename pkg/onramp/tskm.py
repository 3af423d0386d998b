"""Time-series K-means over variable-length primitives with a DTW metric.

Centroids are DTW barycenters (DBA); the objective is the within-cluster
sum of squared DTW distances.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numba
import numpy as np

from onramp.errors import InputError
from onramp.rng import derive_seed, make_rng

logger = logging.getLogger(__name__)


# =============================================================================
# DTW
# =============================================================================

@dataclass(frozen=True)
class DtwAlignment:
    distance: float
    path: list[tuple[int, int]]


@numba.njit(cache=True)
def _accumulated_cost(a, b, window):
    n, m = a.shape[0], b.shape[0]
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        if window < 0:
            lo, hi = 1, m
        else:
            lo, hi = max(1, i - window), min(m, i + window)
        for j in range(lo, hi + 1):
            c = 0.0
            for d in range(a.shape[1]):
                diff = a[i - 1, d] - b[j - 1, d]
                c += diff * diff
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = c + best
    return acc


@numba.njit(cache=True)
def _backtrack(acc):
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    rows = np.empty(i + j, dtype=np.int64)
    cols = np.empty(i + j, dtype=np.int64)
    n = 0
    while True:
        rows[n] = i - 1
        cols[n] = j - 1
        n += 1
        if i == 1 and j == 1:
            break
        diag, up, left = acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1]
        if diag <= up and diag <= left:
            i -= 1
            j -= 1
        elif up <= left:
            i -= 1
        else:
            j -= 1
    return rows[:n][::-1], cols[:n][::-1]


def _as_series(x, name: str = "series") -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or len(arr) == 0:
        raise InputError(f"{name} must be a non-empty (T, D) array")
    return np.ascontiguousarray(arr)


def _window(n: int, m: int, window: int | None) -> int:
    if window is None:
        return -1
    return max(int(window), abs(n - m))


def _checked_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _as_series(a, "a"), _as_series(b, "b")
    if a.shape[1] != b.shape[1]:
        raise InputError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def dtw_cost(a, b, window: int | None = None) -> float:
    """Squared DTW distance (accumulated squared Euclidean cost)."""
    a, b = _checked_pair(a, b)
    return float(_accumulated_cost(a, b, _window(len(a), len(b), window))[-1, -1])


def dtw_distance(a, b, window: int | None = None) -> DtwAlignment:
    """Optimal alignment; distance = sqrt of the summed squared costs along the path."""
    a, b = _checked_pair(a, b)
    acc = _accumulated_cost(a, b, _window(len(a), len(b), window))
    rows, cols = _backtrack(acc)
    return DtwAlignment(
        distance=float(np.sqrt(acc[-1, -1])),
        path=[(int(i), int(j)) for i, j in zip(rows, cols)],
    )


# =============================================================================
# DBA
# =============================================================================

def resample(series, length: int) -> np.ndarray:
    """Linear-interpolation resampling to ``length`` rows."""
    series = _as_series(series)
    if length < 1:
        raise InputError("target length must be >= 1")
    if len(series) == length:
        return series.copy()
    if len(series) == 1:
        return np.repeat(series, length, axis=0)
    src = np.linspace(0.0, 1.0, len(series))
    dst = np.linspace(0.0, 1.0, length)
    return np.column_stack([np.interp(dst, src, series[:, d]) for d in range(series.shape[1])])


def _objective(center: np.ndarray, members: Sequence[np.ndarray], window: int | None) -> float:
    return sum(dtw_cost(center, m, window) for m in members)


def medoid_index(members: Sequence[np.ndarray], window: int | None = None) -> int:
    n = len(members)
    costs = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            costs[i, j] = costs[j, i] = dtw_cost(members[i], members[j], window)
    return int(np.argmin(costs.sum(axis=1)))


def dba_centroid(members: Sequence, target_length: int, iterations: int = 10,
                 window: int | None = None) -> np.ndarray:
    """DTW barycenter of the members, started from their medoid."""
    members = [_as_series(m, "member") for m in members]
    if not members:
        raise InputError("dba_centroid needs at least one member")
    if len(members) == 1:
        return resample(members[0], target_length)
    center = resample(members[medoid_index(members, window)], target_length)
    best = _objective(center, members, window)
    for _ in range(iterations):
        sums = np.zeros_like(center)
        counts = np.zeros(len(center))
        for m in members:
            acc = _accumulated_cost(center, m, _window(len(center), len(m), window))
            rows, cols = _backtrack(acc)
            np.add.at(sums, rows, m[cols])
            np.add.at(counts, rows, 1.0)
        candidate = sums / counts[:, None]
        value = _objective(candidate, members, window)
        if value >= best:
            break
        center, best = candidate, value
    return center


# =============================================================================
# K-means
# =============================================================================

@dataclass(frozen=True, eq=False)
class ClusterModel:
    k_clusters: int
    centroids: list[np.ndarray]      # standardized space
    labels: np.ndarray               # cluster per primitive, input order
    primitive_ids: tuple[str, ...]
    inertia: float
    history: list[float]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    seed: int
    restart: int = 0

    @property
    def assignments(self) -> dict[str, int]:
        return {pid: int(c) for pid, c in zip(self.primitive_ids, self.labels)}

    @property
    def raw_centroids(self) -> list[np.ndarray]:
        return [c * self.feature_std + self.feature_mean for c in self.centroids]

    def to_dict(self) -> dict:
        return {
            "k_clusters": self.k_clusters,
            "centroids": self.raw_centroids,
            "assignments": self.assignments,
            "inertia": self.inertia,
            "history": self.history,
            "feature_mean": self.feature_mean,
            "feature_std": self.feature_std,
            "seed": self.seed,
            "restart": self.restart,
        }


def _unpack(primitives) -> tuple[list[np.ndarray], tuple[str, ...]]:
    series, ids = [], []
    for n, p in enumerate(primitives):
        if hasattr(p, "series"):
            series.append(_as_series(p.series, "primitive"))
            ids.append(str(p.primitive_id))
        else:
            series.append(_as_series(p, "primitive"))
            ids.append(str(n))
    if series and len({s.shape[1] for s in series}) != 1:
        raise InputError("primitives differ in dimensionality")
    return series, tuple(ids)


def standardization(series: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Global per-dimension mean and SD over all frames (SD 0 maps to 1)."""
    stacked = np.concatenate(series)
    std = stacked.std(axis=0)
    return stacked.mean(axis=0), np.where(std > 0.0, std, 1.0)


@dataclass
class _Run:
    centroids: list[np.ndarray]
    labels: np.ndarray
    inertia: float
    history: list[float] = field(default_factory=list)


def _cost_matrix(series, centroids, window) -> np.ndarray:
    out = np.empty((len(series), len(centroids)))
    for i, s in enumerate(series):
        for c, center in enumerate(centroids):
            out[i, c] = dtw_cost(s, center, window)
    return out


def _seed_centroids(series, k, rng, window) -> list[np.ndarray]:
    """k-means++ seeding with squared-DTW weights."""
    n = len(series)
    chosen = [int(rng.integers(n))]
    nearest = np.array([dtw_cost(s, series[chosen[0]], window) for s in series])
    while len(chosen) < k:
        weights = nearest.copy()
        weights[chosen] = 0.0
        total = weights.sum()
        if total > 0.0:
            nxt = int(rng.choice(n, p=weights / total))
        else:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(remaining))
        chosen.append(nxt)
        nearest = np.minimum(nearest, [dtw_cost(s, series[nxt], window) for s in series])
    return [series[i].copy() for i in chosen]


def _assign(series, centroids, window) -> tuple[np.ndarray, float, list[np.ndarray]]:
    """Nearest-centroid labels; empty clusters take the farthest primitive."""
    costs = _cost_matrix(series, centroids, window)
    labels = np.argmin(costs, axis=1)
    centroids = list(centroids)
    for c in range(len(centroids)):
        if np.any(labels == c):
            continue
        own = costs[np.arange(len(series)), labels]
        sizes = np.bincount(labels, minlength=len(centroids))
        movable = sizes[labels] > 1
        if not np.any(movable):
            continue
        far = int(np.argmax(np.where(movable, own, -np.inf)))
        logger.debug("Reseeding empty cluster %d with primitive %d", c, far)
        centroids[c] = series[far].copy()
        costs[:, c] = [dtw_cost(s, centroids[c], window) for s in series]
        labels[far] = c
    inertia = float(np.sum(costs[np.arange(len(series)), labels]))
    return labels, inertia, centroids


def _update_centroids(series, labels, centroids, dba_iterations, window) -> list[np.ndarray]:
    updated = []
    for c, old in enumerate(centroids):
        members = [series[i] for i in np.nonzero(labels == c)[0]]
        if not members:
            updated.append(old)
            continue
        length = max(int(np.median([len(m) for m in members])), 1)
        candidate = dba_centroid(members, length, dba_iterations, window)
        if _objective(candidate, members, window) <= _objective(old, members, window):
            updated.append(candidate)
        else:
            updated.append(old)
    return updated


def _lloyd(series, k, rng, max_iter, dba_iterations, window) -> _Run:
    centroids = _seed_centroids(series, k, rng, window)
    labels, inertia, centroids = _assign(series, centroids, window)
    history = [inertia]
    for _ in range(max_iter):
        centroids = _update_centroids(series, labels, centroids, dba_iterations, window)
        new_labels, inertia, centroids = _assign(series, centroids, window)
        history.append(inertia)
        converged = np.array_equal(new_labels, labels)
        labels = new_labels
        if converged:
            break
    return _Run(centroids=centroids, labels=labels, inertia=inertia, history=history)


def fit_tskm(primitives, k_clusters: int, seed: int = 0, max_iter: int = 50,
             restarts: int = 3, dba_iterations: int = 10, window: int | None = None,
             standardize: bool = True) -> ClusterModel:
    """DTW K-means; the best of ``restarts`` seeded runs by final inertia is kept."""
    series, ids = _unpack(primitives)
    if k_clusters < 1:
        raise InputError("k_clusters must be >= 1")
    if len(series) < k_clusters:
        raise InputError(f"{len(series)} primitives < {k_clusters} clusters")
    if standardize:
        mean, std = standardization(series)
    else:
        dim = series[0].shape[1]
        mean, std = np.zeros(dim), np.ones(dim)
    scaled = [np.ascontiguousarray((s - mean) / std) for s in series]

    best: _Run | None = None
    best_restart = 0
    for r in range(max(restarts, 1)):
        rng = make_rng(derive_seed(seed, f"tskm-{k_clusters}-{r}"))
        run = _lloyd(scaled, k_clusters, rng, max_iter, dba_iterations, window)
        if best is None or run.inertia < best.inertia:
            best, best_restart = run, r
    logger.info("TSKM k=%d: inertia %.6g after %d iterations (restart %d)",
                k_clusters, best.inertia, len(best.history) - 1, best_restart)
    return ClusterModel(
        k_clusters=k_clusters,
        centroids=best.centroids,
        labels=best.labels,
        primitive_ids=ids,
        inertia=best.inertia,
        history=best.history,
        feature_mean=mean,
        feature_std=std,
        seed=seed,
        restart=best_restart,
    )


def recompute_inertia(model: ClusterModel, primitives, window: int | None = None) -> float:
    series, _ = _unpack(primitives)
    return sum(
        dtw_cost((s - model.feature_mean) / model.feature_std, model.centroids[c], window)
        for s, c in zip(series, model.labels)
    )


# =============================================================================
# Model selection and summaries
# =============================================================================

@dataclass
class InertiaCurve:
    rows: list[dict]
    suggested_k: int
    models: dict[int, ClusterModel]


def inertia_curve(primitives, k_range: Sequence[int], seed: int = 0,
                  threshold: float = 0.05, **fit_kwargs) -> InertiaCurve:
    """lambda_w per k, its change rate, and the elbow suggestion."""
    ks = list(k_range)
    if not ks:
        raise InputError("k_range is empty")
    rows: list[dict] = []
    models: dict[int, ClusterModel] = {}
    previous = None
    for k in ks:
        model = fit_tskm(primitives, k, seed, **fit_kwargs)
        models[k] = model
        if previous is None:
            rate = None
        elif previous > 0.0:
            rate = (previous - model.inertia) / previous
        else:
            rate = 0.0
        rows.append({"k": k, "lambda_w": model.inertia, "change_rate": rate})
        previous = model.inertia
    suggested = ks[-1]
    for row, nxt in zip(rows, rows[1:]):
        if nxt["change_rate"] < threshold:
            suggested = row["k"]
            break
    return InertiaCurve(rows=rows, suggested_k=suggested, models=models)


def summarize_patterns(model: ClusterModel, primitives) -> list[dict]:
    series, _ = _unpack(primitives)
    lengths = np.array([len(s) for s in series])
    total = len(series)
    report = []
    for c, centroid in enumerate(model.raw_centroids):
        members = np.nonzero(model.labels == c)[0]
        durations = lengths[members]
        report.append({
            "cluster": c,
            "count": int(len(members)),
            "share": len(members) / total if total else 0.0,
            "centroid": centroid,
            "signature": centroid.mean(axis=0),
            "duration_mean": float(durations.mean()) if len(durations) else 0.0,
            "duration_median": float(np.median(durations)) if len(durations) else 0.0,
            "duration_min": int(durations.min()) if len(durations) else 0,
            "duration_max": int(durations.max()) if len(durations) else 0,
        })
    return report
