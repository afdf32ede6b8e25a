"""Early-training clustering and one-shot upsampling of slow-learnable examples.

The pipeline: train for a few iterations, run 2-means on the model outputs
within each class, mark the cluster with the higher mean loss, give those
examples an extra copy (multiplicity ``factor``), and retrain from the
original initial weights.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from usefullab._io import atomic_write_text
from usefullab.cubic_cnn import logistic_loss, outputs
from usefullab.optimizers import OptimizerConfig, TrainTrace, train
from usefullab.synthgen import Dataset

log = logging.getLogger(__name__)


class DegenerateClustering(ValueError):
    pass


class SeparationNotFound(ValueError):
    pass


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    objective: float
    n_iter: int
    degenerate: bool = False
    objective_history: list = field(default_factory=list)


def _farthest_pair(X: np.ndarray, chunk: int = 2048) -> tuple[int, int]:
    best, pair = -1.0, (0, 0)
    sq = (X * X).sum(axis=1)
    for start in range(0, X.shape[0], chunk):
        block = X[start : start + chunk]
        d2 = sq[start : start + chunk, None] + sq[None, :] - 2.0 * block @ X.T
        i, j = np.unravel_index(np.argmax(d2), d2.shape)
        if d2[i, j] > best:
            best, pair = d2[i, j], (start + int(i), int(j))
    return min(pair), max(pair)


def _best_split_centers(x: np.ndarray) -> np.ndarray:
    """Centers of the optimal threshold split of scalars, via prefix sums.

    Only cuts between distinct values are considered, so tied values always
    share a cluster.
    """
    s = np.sort(x)
    n = s.shape[0]
    k = np.arange(1, n)  # size of the left part
    c1 = np.cumsum(s)[:-1]
    c2 = np.cumsum(s * s)[:-1]
    tot1, tot2 = s.sum(), (s * s).sum()
    sse = (c2 - c1 * c1 / k) + ((tot2 - c2) - (tot1 - c1) ** 2 / (n - k))
    sse = np.where(s[1:] > s[:-1], sse, np.inf)
    cut = int(np.argmin(sse)) + 1
    return np.array([[s[:cut].mean()], [s[cut:].mean()]])


def _objective(X, centers, assign) -> float:
    diff = X - centers[assign]
    return float((diff * diff).sum())


def kmeans_two(values, tol: float = 1e-12, max_iters: int = 300, scalar_init: str = "split") -> KMeansResult:
    """Lloyd's algorithm with two clusters from a deterministic start.

    Vectors start from the two mutually farthest points. Scalars start from
    the best threshold split (found with prefix sums over the sorted
    values), which is itself a Lloyd fixed point; ``scalar_init="extremes"``
    starts from the minimum and maximum instead, which can stall in a local
    optimum. Ties in assignment go to cluster 0. If every
    value is identical the result is flagged ``degenerate`` with both
    centers equal and every point in cluster 0.
    """
    X = np.asarray(values, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise ValueError("kmeans_two needs at least two values")
    n = X.shape[0]

    if np.all(X == X[0]):
        centers = np.stack([X[0], X[0]])
        return KMeansResult(np.zeros(n, dtype=np.int64), centers, 0.0, 0, degenerate=True)

    if X.shape[1] == 1 and scalar_init == "split":
        centers = _best_split_centers(X[:, 0])
    elif X.shape[1] == 1 and scalar_init == "extremes":
        centers = np.stack([X[np.argmin(X[:, 0])], X[np.argmax(X[:, 0])]])
    elif X.shape[1] == 1:
        raise ValueError(f"unknown scalar_init {scalar_init!r}")
    else:
        i, j = _farthest_pair(X)
        centers = np.stack([X[i], X[j]])

    history = []
    assign = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iters + 1):
        d0 = ((X - centers[0]) ** 2).sum(axis=1)
        d1 = ((X - centers[1]) ** 2).sum(axis=1)
        assign = (d1 < d0).astype(np.int64)
        history.append(_objective(X, centers, assign))
        new = centers.copy()
        for c in (0, 1):
            members = X[assign == c]
            if members.shape[0]:
                new[c] = members.mean(axis=0)
        shift = float(np.max(np.abs(new - centers)))
        centers = new
        if shift < tol:
            break
    # final assignment against the final centers
    d0 = ((X - centers[0]) ** 2).sum(axis=1)
    d1 = ((X - centers[1]) ** 2).sum(axis=1)
    assign = (d1 < d0).astype(np.int64)
    obj = _objective(X, centers, assign)
    history.append(obj)
    return KMeansResult(assign, centers, obj, it, degenerate=False, objective_history=history)


@dataclass
class ClusterResult:
    label: int
    indices: np.ndarray  # global example indices of this class
    assignments: np.ndarray
    centers: np.ndarray
    mean_loss: np.ndarray  # per cluster
    sizes: np.ndarray
    slow_cluster: int
    degenerate: bool

    @property
    def slow_indices(self) -> np.ndarray:
        return self.indices[self.assignments == self.slow_cluster]

    def summary(self) -> dict:
        return {
            "label": self.label,
            "sizes": [int(s) for s in self.sizes],
            "centers": [float(c) for c in self.centers.ravel()],
            "mean_loss": [float(v) for v in self.mean_loss],
            "slow_cluster": self.slow_cluster,
            "degenerate": self.degenerate,
        }


def _pick_slow(mean_loss: np.ndarray, sizes: np.ndarray) -> int:
    if mean_loss[0] != mean_loss[1]:
        return int(np.argmax(mean_loss))
    # equal mean loss: upsample the smaller group
    return 1 if sizes[1] < sizes[0] else 0


def separate(W: np.ndarray, dataset: Dataset, **kmeans_kw) -> dict:
    """Per-class 2-means on model outputs; returns ``{label: ClusterResult}``."""
    f = outputs(W, dataset)
    results = {}
    for c in (-1, 1):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.shape[0] < 2:
            raise ValueError(f"class {c:+d} has {idx.shape[0]} examples; need at least 2")
        km = kmeans_two(f[idx], **kmeans_kw)
        loss = logistic_loss(c * f[idx])
        mult = dataset.multiplicity[idx].astype(np.float64)
        sizes = np.array([np.count_nonzero(km.assignments == k) for k in (0, 1)])
        mean_loss = np.array(
            [np.dot(mult[km.assignments == k], loss[km.assignments == k]) / mult[km.assignments == k].sum()
             if sizes[k] else -np.inf for k in (0, 1)]
        )
        results[c] = ClusterResult(
            label=c,
            indices=idx,
            assignments=km.assignments,
            centers=km.centers,
            mean_loss=mean_loss,
            sizes=sizes,
            slow_cluster=_pick_slow(mean_loss, sizes),
            degenerate=km.degenerate,
        )
    return results


def detect_separating_iteration(trace_or_errors, window: int = 10, shrink_ratio: float = 0.25) -> int:
    """First iteration where the training-error decrease rate knees.

    The windowed decrease at ``t`` is ``(e[t - window] - e[t]) / window``. The
    detector fires at the first ``t`` where it drops below
    ``shrink_ratio`` times the largest windowed decrease seen so far.
    """
    if isinstance(trace_or_errors, TrainTrace):
        e = trace_or_errors.train_error
    else:
        e = np.asarray(trace_or_errors, dtype=np.float64)
    if e.shape[0] - 1 < 2 * window:
        raise ValueError(f"need at least {2 * window} iterations, trace has {e.shape[0] - 1}")
    best = 0.0
    for t in range(window, e.shape[0]):
        rate = (e[t - window] - e[t]) / window
        best = max(best, rate)
        if best > 0 and rate < shrink_ratio * best:
            return t
    if best <= 0:
        raise SeparationNotFound("training error never decreased; choose the separating iteration manually")
    raise SeparationNotFound("training-error decrease never slowed down; choose the separating iteration manually")


@dataclass
class UsefulPlan:
    separating_iteration: int
    upsample_factor: int
    slow_indices: np.ndarray
    new_multiplicity: np.ndarray
    clusters: dict = field(default_factory=dict)
    detected: bool = False

    def apply(self, dataset: Dataset) -> Dataset:
        if self.new_multiplicity.shape[0] != dataset.n:
            raise ValueError("plan and dataset sizes differ")
        return dataset.with_multiplicity(self.new_multiplicity)

    def to_json(self) -> str:
        doc = {
            "format": "usefullab-plan",
            "version": 1,
            "separating_iteration": self.separating_iteration,
            "separating_mode": "auto" if self.detected else "fixed",
            "factor": self.upsample_factor,
            "slow_indices": [int(i) for i in self.slow_indices],
            "effective_size": int(self.new_multiplicity.sum()),
            "clusters": {str(k): v.summary() for k, v in sorted(self.clusters.items())},
        }
        return json.dumps(doc, sort_keys=True)

    def write(self, path) -> None:
        atomic_write_text(path, self.to_json())


def build_plan(cluster_results: dict, upsample_factor: int = 2, n: int | None = None, separating_iteration: int = 0) -> UsefulPlan:
    if int(upsample_factor) != upsample_factor or upsample_factor < 1:
        raise ValueError(f"upsample factor must be a positive integer, got {upsample_factor}")
    bad = [c for c, r in cluster_results.items() if r.degenerate]
    if bad:
        detail = ", ".join(f"class {c:+d}: sizes {cluster_results[c].sizes.tolist()}" for c in bad)
        raise DegenerateClustering(f"degenerate clustering ({detail})")
    if n is None:
        n = sum(r.indices.shape[0] for r in cluster_results.values())
    slow = np.sort(np.concatenate([r.slow_indices for r in cluster_results.values()]))
    mult = np.ones(n, dtype=np.int64)
    mult[slow] = int(upsample_factor)
    return UsefulPlan(separating_iteration, int(upsample_factor), slow, mult, dict(cluster_results))


@dataclass(frozen=True)
class UsefulConfig:
    separating: int | str = "auto"  # "auto" or a fixed iteration
    factor: int = 2
    window: int = 10
    shrink_ratio: float = 0.25
    reinit_seed: int | None = None  # fresh re-initialization for ablations

    def __post_init__(self):
        if self.separating != "auto" and not (isinstance(self.separating, int) and self.separating >= 0):
            raise ValueError(f"separating must be 'auto' or a non-negative int, got {self.separating!r}")


@dataclass
class UsefulResult:
    plan: UsefulPlan
    probe_trace: TrainTrace
    final_trace: TrainTrace
    separating_weights: np.ndarray


def run_useful(
    dataset: Dataset,
    W0: np.ndarray,
    base_config: OptimizerConfig,
    useful_config: UsefulConfig = UsefulConfig(),
    *,
    test_dataset: Dataset | None = None,
    reinit=None,
) -> UsefulResult:
    """Probe, cluster, upsample, retrain.

    In ``auto`` mode the probe runs for the full budget so the error curve can
    be inspected; otherwise it stops at the fixed separating iteration. The
    retrain starts from ``W0`` unless ``reinit`` (a callable returning fresh
    weights) is given.
    """
    snapshots = {}
    if useful_config.separating == "auto":
        probe_cfg = base_config

        def keep(t, W, _m):
            snapshots[t] = W.copy()

        probe = train(W0, dataset, probe_cfg, [keep], test_dataset=test_dataset)
        t_sep = detect_separating_iteration(probe, useful_config.window, useful_config.shrink_ratio)
        log.info("detected separating iteration t=%d", t_sep)
        W_t = snapshots[t_sep]
    else:
        t_sep = int(useful_config.separating)
        probe_cfg = OptimizerConfig(
            base_config.kind, base_config.eta, base_config.rho, base_config.normalize_perturbation, t_sep
        )
        probe = train(W0, dataset, probe_cfg, test_dataset=test_dataset)
        W_t = probe.final_weights

    clusters = separate(W_t, dataset)
    plan = build_plan(clusters, useful_config.factor, dataset.n, t_sep)
    plan.detected = useful_config.separating == "auto"

    W_start = reinit() if reinit is not None else W0
    final = train(W_start, plan.apply(dataset), base_config, test_dataset=test_dataset)
    return UsefulResult(plan, truncate_trace(probe, t_sep), final, W_t)


def truncate_trace(trace: TrainTrace, last: int) -> TrainTrace:
    """Copy of ``trace`` keeping rows ``0..last``."""
    rows = {k: list(v[: last + 1]) for k, v in trace.rows.items()}
    return TrainTrace(
        config=trace.config,
        rows=rows,
        correctness=trace.correctness[: last + 1],
        checkpoints={t: W for t, W in trace.checkpoints.items() if t <= last},
        skipped_perturbations=[t for t in trace.skipped_perturbations if t <= last],
        final_weights=None,
        meta=dict(trace.meta),
    )
