"""Measurement instruments for weights and training histories."""

from __future__ import annotations

import numpy as np

from usefullab._io import atomic_write_text
from usefullab.cubic_cnn import margins, preactivations
from usefullab.synthgen import Dataset


def alignment(W: np.ndarray, v: np.ndarray) -> float:
    """``max_j <w_j, v>``."""
    return float(np.max(W @ v))


def classification_error(W: np.ndarray, dataset: Dataset) -> float:
    """Multiplicity-weighted fraction of examples with ``y f(x) <= 0``.

    A zero output counts as a mistake.
    """
    return error_from_margins(margins(W, dataset), dataset)


def error_from_margins(marg: np.ndarray, dataset: Dataset) -> float:
    if dataset.n == 0:
        raise ValueError("empty dataset")
    wrong = (marg <= 0).astype(np.float64)
    return float(np.dot(dataset.multiplicity.astype(np.float64), wrong) / dataset.effective_size)


def l1_norm(W: np.ndarray) -> float:
    return float(np.abs(W).sum())


def forgetting_scores(history) -> np.ndarray:
    """Correct-to-incorrect transitions per example.

    ``history`` is a boolean array of shape ``(n_examples, n_epochs)``, with
    ``True`` meaning the example was classified correctly at the end of that
    epoch.
    """
    h = np.asarray(history, dtype=bool)
    if h.ndim != 2 or h.shape[0] == 0 or h.shape[1] == 0:
        raise ValueError(f"history must be a non-empty 2-D array, got shape {h.shape}")
    return np.count_nonzero(h[:, :-1] & ~h[:, 1:], axis=1)


def first_correct_epoch(history) -> np.ndarray:
    """Index of the first correct epoch per example, ``-1`` if never correct."""
    h = np.asarray(history, dtype=bool)
    first = np.argmax(h, axis=1)
    return np.where(h.any(axis=1), first, -1)


def noise_alignment_monitor(W: np.ndarray, dataset: Dataset) -> float:
    """``max |<w_j, xi>|`` over filters and noise patches."""
    xi = dataset.noise_patches()
    if xi.size == 0:
        return 0.0
    return float(np.max(np.abs(preactivations(W, xi))))


def forgetting_csv(scores, has_fast, first_correct=None) -> str:
    lines = ["example_index,score,has_fast_feature" + (",first_correct_epoch" if first_correct is not None else "")]
    for i, (s, f) in enumerate(zip(scores, has_fast)):
        row = f"{i},{int(s)},{int(bool(f))}"
        if first_correct is not None:
            row += f",{int(first_correct[i])}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def write_forgetting_csv(path, scores, has_fast, first_correct=None) -> None:
    atomic_write_text(path, forgetting_csv(scores, has_fast, first_correct))
