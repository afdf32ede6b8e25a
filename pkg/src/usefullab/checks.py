"""Randomized self-checks that produce :class:`~usefullab.theory.Verdict` objects.

These power ``usefullab verify``. Each check takes an integer seed and an
instance count so that runs are reproducible.
"""

from __future__ import annotations

import itertools

import numpy as np

from usefullab.cubic_cnn import empirical_loss, gradient, hessian_vector_product
from usefullab.spectral import dense_hessian, model_spectrum
from usefullab.synthgen import DistributionSpec, generate, make_basis
from usefullab.theory import (
    RegimeViolation,
    Verdict,
    check_gradient_ratio_monotonicity,
    check_recursion,
    upsample_factor_oracle,
)
from usefullab.useful import kmeans_two


def _regime_filter(rng, d, scale):
    """A single filter with positive feature projections and <w,v_e> >= <w,v_d>."""
    w = rng.normal(0.0, 1.0, d)
    w[0] = abs(w[0]) + 0.5
    w[1] = min(abs(w[1]) + 0.05, w[0])
    return w * (scale / np.linalg.norm(w))


def check_upsample_factor(instances: int = 50, seed: int = 0, tol: float = 1e-8) -> Verdict:
    rng = np.random.default_rng(seed)
    basis = make_basis(16)
    worst_err = 0.0
    for i in range(instances):
        spec = DistributionSpec(
            d=16,
            beta_d=float(rng.uniform(0.05, 0.7)),
            alpha=float(rng.uniform(0.5, 0.98)),
            sigma_p=0.0,
            n=int(rng.integers(40, 200)),
            seed=int(rng.integers(2**31)),
        )
        ds = generate(spec, basis)
        w = _regime_filter(rng, 16, 1e-3)
        res = upsample_factor_oracle(w, ds, float(rng.uniform(0.5, 50.0)))
        worst_err = max(worst_err, res.relative_error)
    return Verdict(
        "upsample_factor", {"instances": instances, "seed": seed, "tol": tol}, worst_err < tol, tol - worst_err, instances,
        {"max_relative_error": worst_err},
    )


def check_ratio(instances: int = 50, seed: int = 0) -> Verdict:
    rng = np.random.default_rng(seed)
    basis = make_basis(16)
    worst, checked, failures = np.inf, 0, 0
    for _ in range(instances):
        ds = generate(DistributionSpec(d=16, sigma_p=0.0, n=100, seed=int(rng.integers(2**31))), basis)
        W = np.stack([_regime_filter(rng, 16, float(rng.uniform(0.01, 0.2))) for _ in range(int(rng.integers(1, 5)))])
        try:
            rep = check_gradient_ratio_monotonicity(W, ds, float(rng.uniform(0.0, 0.5)))
        except RegimeViolation:
            continue
        ok = rep.holds | ~rep.regime
        failures += int((~ok).sum())
        if rep.regime.any():
            worst = min(worst, float(np.min((rep.ratio_after - rep.ratio_before)[rep.regime])))
        checked += 1
    return Verdict("ratio", {"instances": instances, "seed": seed}, failures == 0 and checked > 0, worst, checked, {"failures": failures})


def _small_instance(rng):
    d = int(rng.integers(3, 7))
    spec = DistributionSpec(d=d, P=3, beta_d=0.5, alpha=0.7, sigma_p=0.5, n=int(rng.integers(3, 9)), seed=int(rng.integers(2**31)))
    ds = generate(spec, make_basis(d))
    J = int(rng.integers(1, 4))
    return rng.normal(0.0, 0.5, (J, d)), ds


def check_gradient(instances: int = 100, seed: int = 0, tol: float = 1e-5, h: float = 1e-6) -> Verdict:
    """Analytic gradient and HVP against central finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        W, ds = _small_instance(rng)
        g = gradient(W, ds)
        fd = np.empty_like(W)
        for idx in np.ndindex(W.shape):
            E = np.zeros_like(W)
            E[idx] = h
            fd[idx] = (empirical_loss(W + E, ds) - empirical_loss(W - E, ds)) / (2 * h)
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)))
        V = rng.normal(size=W.shape)
        a = hessian_vector_product(W, ds, V)
        b = hessian_vector_product(W, ds, V, mode="fd")
        worst = max(worst, float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)))
    return Verdict("gradient", {"instances": instances, "seed": seed, "tol": tol}, worst < tol, tol - worst, instances, {"max_relative_error": worst})


def check_lanczos(instances: int = 20, seed: int = 0, tol: float = 1e-6) -> Verdict:
    """Lanczos top-5 against a dense eigensolver on models with at most 64 parameters."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(instances):
        d = int(rng.integers(5, 17))
        J = int(rng.integers(1, 64 // d + 1))
        ds = generate(DistributionSpec(d=d, sigma_p=0.8, n=20, seed=int(rng.integers(2**31))), make_basis(d))
        W = rng.normal(0.0, 0.4, (J, d))
        if W.size < 5:
            continue
        rep = model_spectrum(W, ds, k=5, steps=W.size, seed=i)
        ref = np.linalg.eigvalsh(dense_hessian(W, ds))[::-1][:5]
        err = np.abs(rep.eigenvalues - ref) / np.maximum(np.abs(ref), 1e-12 * np.abs(ref[0]))
        worst = max(worst, float(err.max()))
    return Verdict("lanczos", {"instances": instances, "seed": seed, "tol": tol}, worst < tol, tol - worst, instances, {"max_relative_error": worst})


def sorted_split_optimum(x) -> float:
    """Best within-cluster sum of squares over all cuts of the sorted values."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    best = np.inf
    for c in range(1, x.shape[0]):
        a, b = x[:c], x[c:]
        best = min(best, float(((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()))
    return best


def check_kmeans(instances: int = 100, seed: int = 0) -> Verdict:
    rng = np.random.default_rng(seed)
    worst, checked = np.inf, 0
    for _ in range(instances):
        n = int(rng.integers(2, 65))
        gen = rng.choice(["normal", "mixture", "exponential", "integers"])
        if gen == "normal":
            x = rng.normal(size=n)
        elif gen == "mixture":
            x = np.where(rng.random(n) < rng.random(), rng.normal(0, 1, n), rng.normal(rng.uniform(1, 6), rng.uniform(0.2, 2), n))
        elif gen == "exponential":
            x = rng.exponential(size=n)
        else:
            x = rng.integers(0, 4, n).astype(np.float64)
        if np.all(x == x[0]):
            continue
        best = sorted_split_optimum(x)
        got = kmeans_two(x).objective
        worst = min(worst, best - got + 1e-9 * max(1.0, best))
        checked += 1
    return Verdict("kmeans", {"instances": instances, "seed": seed}, worst >= 0, worst, checked)


def exhaustive_two_partition(x) -> float:
    """Brute force over every 2-partition; only for tiny inputs."""
    x = np.asarray(x, dtype=np.float64)
    best = np.inf
    for mask in itertools.product((False, True), repeat=x.shape[0] - 1):
        m = np.array((False,) + mask)
        if m.all() or not m.any():
            continue
        a, b = x[m], x[~m]
        best = min(best, float(((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()))
    return best


INSTANCE_CHECKS = {
    "upsample_factor": check_upsample_factor,
    "ratio": check_ratio,
    "recursion": lambda instances=1000, seed=0: check_recursion(instances, seed),
    "gradient": check_gradient,
    "lanczos": check_lanczos,
    "kmeans": check_kmeans,
}
