"""Two-layer CNN with cubic activation and its logistic empirical risk.

The weight matrix ``W`` has shape ``(J, d)``; row ``j`` is filter ``w_j``.
The model output is ``f(x; W) = sum_j sum_p <w_j, x_p>**3``.

All reductions over examples go through one GEMM with the example/patch
axis as the contraction dimension, plus numpy's pairwise summation for
scalar losses. Neither depends on the example order chosen by a caller, and
the GEMM accumulates each output entry over the contraction axis in a fixed
order, which keeps results reproducible for a given BLAS build.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from usefullab._io import atomic_write_bytes
from usefullab.synthgen import Dataset, FeatureBasis


def default_sigma_0(d: int) -> float:
    """``sqrt(ln(d) / d)``, the smallest polylog choice of the init scale."""
    return math.sqrt(math.log(d) / d)


@dataclass(frozen=True)
class InitSpec:
    sigma_0: float
    seed: int = 0
    enforce_positive_projections: bool = False

    def __post_init__(self):
        if not self.sigma_0 > 0:
            raise ValueError(f"sigma_0 must be positive, got {self.sigma_0}")


def init_weights(init: InitSpec, J: int, d: int, basis: FeatureBasis | None = None) -> np.ndarray:
    """Draw ``W ~ N(0, sigma_0**2)`` entrywise.

    With ``enforce_positive_projections`` the components of each filter
    along ``v_e`` and ``v_d`` are replaced by their absolute values, leaving
    the orthogonal complement untouched.
    """
    if J < 1 or d < 1:
        raise ValueError(f"need J, d >= 1, got J={J}, d={d}")
    W = np.random.default_rng(init.seed).normal(0.0, init.sigma_0, size=(J, d))
    if init.enforce_positive_projections:
        if basis is None:
            raise ValueError("enforce_positive_projections needs the feature basis")
        for v in (basis.v_e, basis.v_d):
            proj = W @ v
            W += np.outer(np.abs(proj) - proj, v)
    return W


def _check_dims(W: np.ndarray, X: np.ndarray) -> None:
    if W.ndim != 2:
        raise ValueError(f"W must be 2-D (J, d), got shape {W.shape}")
    if X.shape[-1] != W.shape[1]:
        raise ValueError(f"patch dimension {X.shape[-1]} does not match filter dimension {W.shape[1]}")


def preactivations(W: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``<w_j, x_p>`` for patches ``X`` of shape ``(..., P, d)``; returns ``(..., P, J)``."""
    _check_dims(W, X)
    flat = X.reshape(-1, X.shape[-1]) @ W.T
    return flat.reshape(X.shape[:-1] + (W.shape[0],))


def _cube(z):
    # z * z * z is far cheaper than z ** 3, which goes through pow()
    return z * z * z


def forward(W: np.ndarray, x: np.ndarray) -> np.ndarray | float:
    """Model output for one example ``(P, d)`` or a batch ``(n, P, d)``."""
    out = _cube(preactivations(W, np.asarray(x))).sum(axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def outputs(W: np.ndarray, dataset: Dataset) -> np.ndarray:
    return forward(W, dataset.patches)


def margins(W: np.ndarray, dataset: Dataset) -> np.ndarray:
    return dataset.labels * outputs(W, dataset)


def logistic_loss(z):
    """``log(1 + exp(-z))`` without overflow for large ``|z|``."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = np.log1p(np.exp(-z[pos]))
    neg = ~pos
    out[neg] = -z[neg] + np.log1p(np.exp(z[neg]))
    return out


def logit_weights(margin):
    """``l_i = sigmoid(-margin_i)``, the per-example weight in the gradient."""
    return expit(-np.asarray(margin, dtype=np.float64))


def _weighted_mean(values: np.ndarray, dataset: Dataset) -> float:
    if dataset.n == 0:
        raise ValueError("empty dataset")
    return float(np.dot(dataset.multiplicity.astype(np.float64), values) / dataset.effective_size)


def empirical_loss(W: np.ndarray, dataset: Dataset) -> float:
    if dataset.n == 0:
        raise ValueError("empty dataset")
    return _weighted_mean(logistic_loss(margins(W, dataset)), dataset)


def _contract(coef: np.ndarray, X: np.ndarray) -> np.ndarray:
    # sum_{i,p} coef[i,p,j] * X[i,p,:]  ->  (J, d)
    J = coef.shape[-1]
    return coef.reshape(-1, J).T @ X.reshape(-1, X.shape[-1])


def loss_grad(W: np.ndarray, dataset: Dataset):
    """Loss, gradient and per-example margins in one pass.

    The gradient for filter ``j`` is
    ``-(3/N) sum_i m_i l_i y_i sum_p <w_j, x_ip>**2 x_ip`` with ``N`` the
    multiplicity-weighted size.
    """
    X = dataset.patches
    Z = preactivations(W, X)
    marg = dataset.labels * _cube(Z).sum(axis=(1, 2))
    loss = _weighted_mean(logistic_loss(marg), dataset)
    c = -3.0 * dataset.multiplicity * logit_weights(marg) * dataset.labels / dataset.effective_size
    grad = _contract(c[:, None, None] * (Z * Z), X)
    return loss, grad, marg


def gradient(W: np.ndarray, dataset: Dataset) -> np.ndarray:
    return loss_grad(W, dataset)[1]


def hessian_vector_product(
    W: np.ndarray,
    dataset: Dataset,
    direction: np.ndarray,
    mode: str = "analytic",
    eps: float = 1e-4,
) -> np.ndarray:
    """Product of the loss Hessian (w.r.t. ``W``) with ``direction``.

    ``mode="analytic"`` uses the closed form. Writing ``u_ipj = <v_j, x_ip>``
    and ``l_i`` for the logit weight,

        H V_j = (1/N) sum_i m_i [ l_i (1 - l_i) (Df_i . V) 3 sum_p z_ipj^2 x_ip
                                  - 6 l_i y_i sum_p z_ipj u_ipj x_ip ]

    with ``Df_i . V = 3 sum_{p,j} z_ipj^2 u_ipj``. ``mode="fd"`` takes central
    differences of the gradient with step ``eps`` (relative to ``|V|_F``).
    """
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != W.shape:
        raise ValueError(f"direction shape {direction.shape} does not match W shape {W.shape}")
    if mode == "fd":
        norm = np.linalg.norm(direction)
        if norm == 0:
            return np.zeros_like(W)
        h = eps / norm
        return (gradient(W + h * direction, dataset) - gradient(W - h * direction, dataset)) / (2 * h)
    if mode != "analytic":
        raise ValueError(f"unknown HVP mode {mode!r}")

    X = dataset.patches
    Z = preactivations(W, X)
    U = preactivations(direction, X)
    marg = dataset.labels * _cube(Z).sum(axis=(1, 2))
    lw = logit_weights(marg)
    m = dataset.multiplicity / dataset.effective_size
    dfv = 3.0 * ((Z * Z) * U).sum(axis=(1, 2))
    a = m * lw * (1.0 - lw) * dfv
    b = m * lw * dataset.labels
    coef = 3.0 * a[:, None, None] * (Z * Z) - 6.0 * b[:, None, None] * Z * U
    return _contract(coef, X)


# --- checkpoints -----------------------------------------------------------

_MAGIC = b"USFLCK01"


def dumps_checkpoint(W: np.ndarray, *, sigma_0: float, seed: int, iteration: int) -> bytes:
    J, d = W.shape
    header = {"J": J, "d": d, "sigma_0": sigma_0, "seed": seed, "iteration": iteration}
    head = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(np.uint64(len(head)).astype("<u8").tobytes())
    buf.write(head)
    buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes):
    """Inverse of :func:`dumps_checkpoint`; returns ``(W, header)``."""
    if blob[:8] != _MAGIC:
        raise ValueError("not a usefullab checkpoint")
    hlen = int(np.frombuffer(blob, "<u8", count=1, offset=8)[0])
    header = json.loads(blob[16 : 16 + hlen])
    J, d = header["J"], header["d"]
    W = np.frombuffer(blob, "<f8", count=J * d, offset=16 + hlen).reshape(J, d).astype(np.float64)
    return W, header


def save_checkpoint(path, W: np.ndarray, *, sigma_0: float, seed: int, iteration: int) -> None:
    atomic_write_bytes(path, dumps_checkpoint(W, sigma_0=sigma_0, seed=seed, iteration=iteration))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
