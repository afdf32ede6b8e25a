"""Top of the loss-Hessian spectrum via Lanczos on Hessian-vector products."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal

from usefullab._io import atomic_write_text
from usefullab.cubic_cnn import hessian_vector_product
from usefullab.synthgen import Dataset

# relative size of beta below which the Krylov space is treated as exhausted
BREAKDOWN_TOL = 1e-10


@dataclass
class SpectrumReport:
    eigenvalues: np.ndarray  # top-k Ritz values, descending
    lanczos_steps: int
    reorthogonalized: bool
    seed: int
    breakdown: bool = False
    ritz_max_history: list = field(default_factory=list)

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_5(self) -> float | None:
        return float(self.eigenvalues[4]) if self.eigenvalues.shape[0] >= 5 else None

    @property
    def bulk_ratio(self) -> float | None:
        lam5 = self.lambda_5
        if lam5 is None or lam5 == 0:
            return None
        return self.lambda_max / lam5

    @property
    def lambda5_nonpositive(self) -> bool:
        return self.lambda_5 is not None and self.lambda_5 <= 0

    def to_dict(self) -> dict:
        return {
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "lambda_max": self.lambda_max,
            "lambda_5": self.lambda_5,
            "bulk_ratio": self.bulk_ratio,
            "lambda5_nonpositive": self.lambda5_nonpositive,
            "steps": self.lanczos_steps,
            "reorthogonalized": self.reorthogonalized,
            "breakdown": self.breakdown,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write(self, path) -> None:
        atomic_write_text(path, self.to_json())


def lanczos_top_k(
    hvp: Callable[[np.ndarray], np.ndarray],
    dim: int,
    k: int,
    steps: int,
    seed: int = 0,
    reorthogonalize: bool = True,
) -> SpectrumReport:
    """Lanczos iteration on a symmetric operator; returns the top ``k`` Ritz values.

    ``hvp`` maps a flat vector of length ``dim`` to a flat vector. The start
    vector is a seeded standard normal draw, normalised. With
    ``reorthogonalize`` every new Lanczos vector is Gram-Schmidt projected
    against all previous ones (twice). If ``beta`` collapses the Krylov space
    is invariant and the iteration stops early; the report then carries the
    Ritz values found so far, possibly fewer than ``k``.
    """
    if not 1 <= k <= dim:
        raise ValueError(f"cannot extract k={k} eigenvalues from a {dim}-dimensional operator")
    if steps < k:
        raise ValueError(f"need steps >= k, got steps={steps}, k={k}")
    steps = min(steps, dim)

    q = np.random.default_rng(seed).standard_normal(dim)
    q /= np.linalg.norm(q)
    Q = np.zeros((steps, dim))
    alphas, betas = [], []
    q_prev = np.zeros(dim)
    beta = 0.0
    breakdown = False
    ritz_max = []
    scale = 0.0

    for m in range(steps):
        Q[m] = q
        w = np.asarray(hvp(q), dtype=np.float64).ravel()
        alpha = float(q @ w)
        w = w - alpha * q - beta * q_prev
        if reorthogonalize:
            for _ in range(2):
                w -= Q[: m + 1].T @ (Q[: m + 1] @ w)
        alphas.append(alpha)
        ritz_max.append(float(_ritz(alphas, betas)[0]))
        beta = float(np.linalg.norm(w))
        scale = max(scale, abs(alpha), beta)
        if m == steps - 1:
            break
        if beta <= BREAKDOWN_TOL * max(scale, 1e-300):
            breakdown = m + 1 < dim
            break
        betas.append(beta)
        q_prev, q = q, w / beta

    ritz = _ritz(alphas, betas)
    return SpectrumReport(
        eigenvalues=ritz[:k],
        lanczos_steps=len(alphas),
        reorthogonalized=reorthogonalize,
        seed=seed,
        breakdown=breakdown,
        ritz_max_history=ritz_max,
    )


def _ritz(alphas, betas) -> np.ndarray:
    a = np.asarray(alphas)
    if a.shape[0] == 1:
        return a.copy()
    vals = eigh_tridiagonal(a, np.asarray(betas[: a.shape[0] - 1]), eigvals_only=True)
    return vals[::-1]


def _flat_hvp(W: np.ndarray, dataset: Dataset):
    shape = W.shape

    def hvp(v):
        return hessian_vector_product(W, dataset, v.reshape(shape)).ravel()

    return hvp


def model_spectrum(
    W: np.ndarray,
    dataset: Dataset,
    k: int = 5,
    steps: int | None = None,
    seed: int = 0,
    subsample: int | None = None,
) -> SpectrumReport:
    """Top-``k`` Hessian eigenvalues of the empirical loss at ``W``.

    ``subsample`` evaluates the Hessian on the first ``subsample`` examples.
    """
    if subsample is not None:
        dataset = dataset.subset(np.arange(min(subsample, dataset.n)))
    dim = W.size
    if steps is None:
        steps = min(dim, max(2 * k + 20, 50))
    return lanczos_top_k(_flat_hvp(W, dataset), dim, k, steps, seed)


def dense_hessian(W: np.ndarray, dataset: Dataset) -> np.ndarray:
    """Hessian assembled column by column from HVPs, then symmetrised."""
    hvp = _flat_hvp(W, dataset)
    dim = W.size
    H = np.empty((dim, dim))
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        H[:, i] = hvp(e)
    return 0.5 * (H + H.T)
