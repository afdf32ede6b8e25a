"""Full-batch GD and SAM, and a training loop that records a trace.

SAM takes the descent gradient at ``W + rho_t * grad L(W)`` where
``rho_t = rho / |grad L(W)|_F`` (normalized) or ``rho_t = rho`` (raw).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from usefullab._io import atomic_write_text
from usefullab.cubic_cnn import loss_grad, margins
from usefullab.metrics import error_from_margins
from usefullab.synthgen import Dataset

# below this gradient norm the normalized SAM perturbation is skipped
ZERO_GRAD_TOL = 1e-12

TRACE_CSV_VERSION = 1
TRACE_COLUMNS = (
    "iter",
    "loss",
    "fast_alignment",
    "slow_alignment",
    "train_error",
    "test_error",
    "grad_norm",
    "perturbation_scale",
)


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"training failed at iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "gd"
    eta: float = 0.1
    rho: float = 0.02
    normalize_perturbation: bool = True
    iterations: int = 600

    def __post_init__(self):
        if self.kind not in ("gd", "sam"):
            raise ValueError(f"optimizer kind must be 'gd' or 'sam', got {self.kind!r}")
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.rho >= 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")


@dataclass
class StepReport:
    loss_before: float
    grad_frobenius: float
    perturbation_scale: float
    perturbation_skipped: bool = False


def _finite_grad(g: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradient("gradient has non-finite entries")
    return g


def _perturbation_scale(gnorm: float, rho: float, normalize: bool) -> tuple[float, bool]:
    if not normalize:
        return rho, False
    if gnorm < ZERO_GRAD_TOL:
        return 0.0, rho > 0
    return rho / gnorm, False


def _sam_from_grad(W, dataset, g, eta, rho, normalize, loss):
    gnorm = float(np.linalg.norm(g))
    scale, skipped = _perturbation_scale(gnorm, rho, normalize)
    if scale == 0.0:
        g_eps = g
    else:
        g_eps = _finite_grad(loss_grad(W + scale * g, dataset)[1])
    return W - eta * g_eps, StepReport(loss, gnorm, scale, skipped)


def gd_step(W: np.ndarray, dataset: Dataset, eta: float):
    """``W - eta * grad L(W)``; returns ``(W_new, StepReport)``."""
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    loss, g, _ = loss_grad(W, dataset)
    _finite_grad(g)
    return W - eta * g, StepReport(loss, float(np.linalg.norm(g)), 0.0)


def sam_step(W: np.ndarray, dataset: Dataset, eta: float, rho: float, normalize: bool = True):
    """One SAM update; returns ``(W_new, StepReport)``.

    When ``normalize`` is set and the gradient norm is below
    ``ZERO_GRAD_TOL`` the perturbation is skipped (plain GD step) and the
    report says so.
    """
    if eta < 0 or rho < 0:
        raise ValueError(f"need eta, rho >= 0, got eta={eta}, rho={rho}")
    loss, g, _ = loss_grad(W, dataset)
    _finite_grad(g)
    return _sam_from_grad(W, dataset, g, eta, rho, normalize, loss)


Observer = Callable[[int, np.ndarray, np.ndarray], None]


@dataclass
class TrainTrace:
    """Per-iteration record of a training run.

    Row ``t`` describes the weights ``W^(t)``: loss, feature alignments,
    errors, the gradient norm at ``W^(t)`` and the SAM scale ``rho_t`` that
    the step out of ``W^(t)`` uses (0 for GD).
    """

    config: OptimizerConfig
    rows: dict = field(default_factory=lambda: {c: [] for c in TRACE_COLUMNS})
    correctness: list = field(default_factory=list)
    checkpoints: dict = field(default_factory=dict)
    skipped_perturbations: list = field(default_factory=list)
    final_weights: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.rows["iter"])

    def column(self, name: str) -> np.ndarray:
        return np.asarray(self.rows[name], dtype=np.float64)

    @property
    def fast(self) -> np.ndarray:
        return self.column("fast_alignment")

    @property
    def slow(self) -> np.ndarray:
        return self.column("slow_alignment")

    @property
    def train_error(self) -> np.ndarray:
        return self.column("train_error")

    def correctness_history(self) -> np.ndarray:
        """Boolean ``(n_examples, n_iterations + 1)`` matrix, if recorded."""
        if not self.correctness:
            raise ValueError("trace was recorded without correctness history")
        return np.stack(self.correctness, axis=1)

    def to_csv(self) -> str:
        lines = [f"# usefullab-trace v{TRACE_CSV_VERSION} optimizer={self.config.kind}", ",".join(TRACE_COLUMNS)]
        for t in range(len(self)):
            cells = [str(self.rows["iter"][t])]
            cells += [repr(float(self.rows[c][t])) for c in TRACE_COLUMNS[1:]]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "format": "usefullab-trace",
            "version": TRACE_CSV_VERSION,
            "config": asdict(self.config),
            "meta": self.meta,
            "columns": {c: [_jsonable(v) for v in self.rows[c]] for c in TRACE_COLUMNS},
            "skipped_perturbations": self.skipped_perturbations,
            "checkpoint_iterations": sorted(self.checkpoints),
        }
        return json.dumps(doc, sort_keys=True)

    def write(self, stem, formats=("csv", "json")) -> list:
        written = []
        for fmt in formats:
            path = f"{stem}.{fmt}"
            atomic_write_text(path, self.to_csv() if fmt == "csv" else self.to_json())
            written.append(path)
        return written


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def train(
    W0: np.ndarray,
    dataset: Dataset,
    config: OptimizerConfig,
    observers: Iterable[Observer] = (),
    *,
    test_dataset: Dataset | None = None,
    record_correctness: bool = False,
    checkpoint_every: int = 50,
) -> TrainTrace:
    """Run ``config.iterations`` full-batch steps of GD or SAM from ``W0``.

    Observers are called as ``observer(t, W, margins)`` for every recorded
    iterate, including ``t = 0``. ``W0`` is never modified.
    """
    trace = TrainTrace(config=config)
    v_e, v_d = dataset.basis.v_e, dataset.basis.v_d
    observers = list(observers)
    W = np.array(W0, dtype=np.float64, copy=True)
    sam = config.kind == "sam"

    for t in range(config.iterations + 1):
        try:
            loss, g, marg = loss_grad(W, dataset)
            _finite_grad(g)
        except (NonFiniteGradient, FloatingPointError, ValueError) as exc:
            raise TrainingError(t, exc) from exc
        gnorm = float(np.linalg.norm(g))
        scale = _perturbation_scale(gnorm, config.rho, config.normalize_perturbation)[0] if sam else 0.0

        r = trace.rows
        r["iter"].append(t)
        r["loss"].append(loss)
        r["fast_alignment"].append(float(np.max(W @ v_e)))
        r["slow_alignment"].append(float(np.max(W @ v_d)))
        r["train_error"].append(error_from_margins(marg, dataset))
        r["test_error"].append(
            error_from_margins(margins(W, test_dataset), test_dataset) if test_dataset is not None else float("nan")
        )
        r["grad_norm"].append(gnorm)
        r["perturbation_scale"].append(scale)
        if record_correctness:
            trace.correctness.append(marg > 0)
        if checkpoint_every and t % checkpoint_every == 0:
            trace.checkpoints[t] = W.copy()
        for obs in observers:
            obs(t, W, marg)

        if t == config.iterations:
            break
        try:
            if sam:
                W, rep = _sam_from_grad(W, dataset, g, config.eta, config.rho, config.normalize_perturbation, loss)
                if rep.perturbation_skipped:
                    trace.skipped_perturbations.append(t)
            else:
                W = W - config.eta * g
        except (NonFiniteGradient, FloatingPointError) as exc:
            raise TrainingError(t, exc) from exc

    trace.final_weights = W
    return trace
