"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the pytest terminal summary and, when this file is
run as a script, on stdout.
"""

import hashlib
import math
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from toy_cache import ACCEPTANCE, RUNTIMES, SEEDS, figure_run, mask_agreement, theory_run, useful_pair
from usefullab.cubic_cnn import empirical_loss, gradient, hessian_vector_product
from usefullab.spectral import dense_hessian, lanczos_top_k, model_spectrum
from usefullab.synthgen import DistributionSpec, amplify_slow, generate, make_basis
from usefullab.theory import TOY_SIGMA_0, RecursionSpec, check_learning_order, simulate_recursion, upsample_factor
from usefullab.useful import kmeans_two


def record(num, ok, line):
    ACCEPTANCE[num] = (bool(ok), line)
    assert ok, f"criterion {num}: {line}"


# 1 -------------------------------------------------------------------------


def test_criterion_01_learning_order():
    parts, ok = [], True
    for s in SEEDS:
        run = figure_run(s, 0.2)
        v = check_learning_order(run.gd_trace, run.sam_trace, TOY_SIGMA_0, 1.0)
        d = v.details
        init_ratio = run.G_d[0] / TOY_SIGMA_0
        parts.append(
            f"seed {s}: T_gd={d['t_cross_gd']} T_sam={d['t_cross_sam']} "
            f"slow@T/s0 gd={d['slow_at_cross_gd'] / TOY_SIGMA_0:.3f} sam={d['slow_at_cross_sam'] / TOY_SIGMA_0:.3f} "
            f"(init {init_ratio:.3f}) {RUNTIMES.get((s, 0.2), float('nan')):.0f}s"
        )
        ok &= v.passed and RUNTIMES.get((s, 0.2), 0.0) <= 150
    record(1, ok, "; ".join(parts))


# 2 -------------------------------------------------------------------------


def test_criterion_02_gap_suite():
    parts, ok = [], True
    for beta_d in (0.2, 0.4):
        for s in SEEDS:
            v = theory_run(s, beta_d).check()
            ok &= v.passed and v.worst_slack > 0
            parts.append(f"bd={beta_d} s{s}: T0={v.details.get('T0')} slack={v.worst_slack:.2e}")
    record(2, ok, "; ".join(parts))


# 3 -------------------------------------------------------------------------


def test_criterion_03_test_error_vs_beta_d():
    means = {}
    for kind in ("gd", "sam"):
        for beta_d in (0.2, 0.4):
            errs = [getattr(figure_run(s, beta_d), f"{kind}_trace").column("test_error")[-1] for s in SEEDS]
            means[kind, beta_d] = float(np.mean(errs))
    ok = all(means[k, 0.4] < means[k, 0.2] for k in ("gd", "sam"))
    line = ", ".join(f"{k.upper()} {means[k, 0.2]:.5f} -> {means[k, 0.4]:.5f}" for k in ("gd", "sam"))
    record(3, ok, f"mean final test error bd 0.2 -> 0.4: {line}")


# 4 -------------------------------------------------------------------------


def test_criterion_04_useful_acceleration():
    parts, ok = [], True
    for s in SEEDS:
        ds, plain, res = useful_pair(s)
        margin = float(np.min(res.final_trace.slow - plain.slow))
        agree = mask_agreement(ds, res.plan.slow_indices)
        baseline = max(ds.spec.alpha, 1 - ds.spec.alpha)
        ok &= margin >= 0 and agree > baseline
        parts.append(f"seed {s}: t_sep={res.plan.separating_iteration} min(G_d^U-G_d)={margin:.2e} agree={agree:.4f}")
    record(4, ok, "; ".join(parts) + " (baseline 0.9)")


# 5 -------------------------------------------------------------------------


def _slow_fast_ratio(g, basis):
    g = g.ravel()
    return (g @ basis.v_d) / (g @ basis.v_e)


def test_criterion_05_upsampling_factor():
    """SAM gradient on D vs GD gradient on amplify_slow(D, k), one filter, noise-free data.

    Logit weights enter the closed form through the effective radius
    ``rho_t * mean(l)`` and effective fast fraction ``sum_fast l / sum l``.
    """
    rng = np.random.default_rng(2024)
    d = 12
    basis = make_basis(d)
    worst, count = 0.0, 0
    while count < 60:
        spec = DistributionSpec(
            d=d, sigma_p=0.0, n=int(rng.integers(30, 150)), alpha=float(rng.uniform(0.5, 0.98)),
            beta_d=float(rng.uniform(0.05, 0.7)), seed=int(rng.integers(2**31)),
        )
        ds = generate(spec, basis)
        w = rng.normal(size=d)
        w[0] = abs(w[0]) + 0.3
        w[1] = min(abs(w[1]), w[0])
        W = (w * 1e-3 / np.linalg.norm(w))[None, :]
        rho_t = float(rng.uniform(0.5, 50))
        f = np.array([sum(float(W[0] @ p) ** 3 for p in x) for x in ds.patches])
        l = 1.0 / (1.0 + np.exp(ds.labels * f))
        eff = DistributionSpec(d=d, sigma_p=0.0, n=spec.n, alpha=float(l[ds.has_fast].sum() / l.sum()), beta_d=spec.beta_d)
        k = upsample_factor(W[0], eff, rho_t * float(l.mean()), basis)
        g = gradient(W, ds)
        sam = _slow_fast_ratio(gradient(W + rho_t * g, ds), basis)
        gd = _slow_fast_ratio(gradient(W, amplify_slow(ds, k)), basis)
        worst = max(worst, abs(gd / sam - 1))
        count += 1
    k0 = upsample_factor(np.array([0.3, 0.1] + [0.0] * (d - 2)), DistributionSpec(d=d), 0.0, basis)
    record(5, worst < 1e-8 and k0 == 1.0, f"{count} instances, max relative ratio error {worst:.2e}; k(rho_t=0)={k0!r}")


# 6 -------------------------------------------------------------------------


def test_criterion_06_gradient_and_hvp():
    rng = np.random.default_rng(6)
    worst_g, worst_h = 0.0, 0.0
    h = 1e-6
    for _ in range(120):
        d = int(rng.integers(3, 8))
        ds = generate(
            DistributionSpec(d=d, n=int(rng.integers(3, 12)), beta_d=0.5, alpha=0.7, sigma_p=0.7, seed=int(rng.integers(2**31))),
            make_basis(d),
        )
        W = rng.normal(0, 0.5, (int(rng.integers(1, 4)), d))
        g = gradient(W, ds)
        fd = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            E = np.zeros_like(W)
            E[idx] = h
            fd[idx] = (empirical_loss(W + E, ds) - empirical_loss(W - E, ds)) / (2 * h)
        worst_g = max(worst_g, float(np.max(np.abs(g - fd)) / np.max(np.abs(fd))))
        V = rng.normal(size=W.shape)
        Vn = V / np.linalg.norm(V)
        hv = hessian_vector_product(W, ds, V)
        fd_hv = (gradient(W + 1e-5 * Vn, ds) - gradient(W - 1e-5 * Vn, ds)) / 2e-5 * np.linalg.norm(V)
        worst_h = max(worst_h, float(np.max(np.abs(hv - fd_hv)) / np.max(np.abs(fd_hv))))
    record(6, worst_g < 1e-5 and worst_h < 1e-5, f"120 instances, max rel error gradient {worst_g:.2e}, HVP {worst_h:.2e}")


# 7 -------------------------------------------------------------------------


def test_criterion_07_lanczos_vs_dense():
    worst = 0.0
    for seed in range(24):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(5, 17))
        J = int(rng.integers(1, 64 // d + 1))
        if J * d < 5:
            J = 1 + 5 // d
        ds = generate(DistributionSpec(d=d, sigma_p=0.8, beta_d=0.4, n=32, seed=seed), make_basis(d))
        W = rng.normal(0, 0.4, (J, d))
        rep = model_spectrum(W, ds, k=5, steps=W.size, seed=seed)
        ref = np.sort(np.linalg.eigvalsh(dense_hessian(W, ds)))[::-1][:5]
        worst = max(worst, float(np.max(np.abs(rep.eigenvalues - ref) / np.abs(ref))))
    diag = lanczos_top_k(lambda v: np.arange(1.0, 6.0) * v, 5, 5, 5, seed=0)
    ulp = np.spacing(5.0)
    # exact up to a few units in the last place of 5.0
    exact = abs(diag.lambda_max - 5.0) <= 8 * ulp and abs(diag.bulk_ratio - 5.0) <= 8 * ulp
    record(
        7,
        worst < 1e-6 and exact,
        f"24 seeds, max rel error {worst:.2e}; diag(1..5): lambda_max={diag.lambda_max!r} bulk_ratio={diag.bulk_ratio!r}",
    )


# 8 -------------------------------------------------------------------------


def _sorted_split_best(x):
    s = np.sort(x)
    return min(
        float(((s[:c] - s[:c].mean()) ** 2).sum() + ((s[c:] - s[c:].mean()) ** 2).sum()) for c in range(1, s.shape[0])
    )


def test_criterion_08_kmeans_global_optimum():
    rng = np.random.default_rng(8)
    misses, count = 0, 0
    while count < 150:
        n = int(rng.integers(2, 65))
        x = rng.normal(size=n) * rng.uniform(0.1, 10) + np.where(rng.random(n) < 0.3, rng.uniform(0, 5), 0)
        if np.all(x == x[0]):
            continue
        best = _sorted_split_best(x)
        if kmeans_two(x).objective > best + 1e-12 * max(1.0, best):
            misses += 1
        count += 1
    record(8, misses == 0, f"{count} instances (n <= 64), {misses} above the sorted-split optimum")


# 9 -------------------------------------------------------------------------


def test_criterion_09_sequence_bound():
    rng = np.random.default_rng(9)
    violations, worst = 0, math.inf
    for _ in range(1000):
        z0 = float(10 ** rng.uniform(-3, 0))
        M = float(10 ** rng.uniform(-1, 1))
        spec = RecursionSpec(z0, z0 * float(rng.uniform(0, 0.9)), M * float(rng.uniform(0.05, 1)), M, z0 * float(10 ** rng.uniform(0, 2)))
        measured, bound = simulate_recursion(spec)
        violations += measured > bound
        worst = min(worst, bound - measured)
    hand = simulate_recursion(RecursionSpec(0.1, 0.0, 1.0, 1.0, 0.2))
    ok = violations == 0 and hand[0] == 6 and math.isclose(hand[1], 24.0, rel_tol=1e-12) and hand[0] <= hand[1]
    record(9, ok, f"1000 specs, {violations} violations, min slack {worst:.3f}; hand instance {hand[0]} <= {hand[1]:.12g}")


# 10 ------------------------------------------------------------------------

DET_CONFIG = {
    "schema_version": 1,
    "dataset": {"d": 10, "n": 300, "test_n": 100},
    "model": {"J": 4, "sigma_0": 0.1},
    "optimizer": {"kind": "sam", "eta": 0.5, "iterations": 120},
    "outputs": {"checkpoint_every": 40, "forgetting": True},
    "useful": {"separating": "auto"},
    "spectrum": {"dense_oracle": True},
    "checks": ["gap", "order", "recursion", "kmeans", "upsample_factor", "ratio", "gradient", "lanczos"],
    "check_instances": {"recursion": 200, "gradient": 10, "lanczos": 5},
    "seeds": [0, 1],
}


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(DET_CONFIG))
    digests = {}
    for tag, threads, jobs in (("rerun-a", 1, 1), ("rerun-b", 1, 1), ("threads-4", 4, 1), ("jobs-2", 2, 2)):
        out = tmp_path / tag
        out.mkdir()
        env = dict(os.environ, OPENBLAS_NUM_THREADS=str(threads), OMP_NUM_THREADS=str(threads), MKL_NUM_THREADS=str(threads))
        for cmd in ("gen", "train", "useful", "spectrum", "verify"):
            r = subprocess.run(
                [sys.executable, "-m", "usefullab", cmd, "--config", str(cfg), "--out", str(out), "--jobs", str(jobs)],
                capture_output=True, text=True, env=env,
            )
            assert r.returncode in (0, 1), (cmd, r.stderr)
        digests[tag] = {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(out.iterdir())}
    ref = digests["rerun-a"]
    same = all(d == ref for d in digests.values())
    record(10, same and len(ref) > 20, f"{len(ref)} files from 5 commands identical across reruns, 1/4 BLAS threads, 1/2 jobs")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    for num in sorted(ACCEPTANCE):
        ok, line = ACCEPTANCE[num]
        print(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {line}")
    sys.exit(code)
