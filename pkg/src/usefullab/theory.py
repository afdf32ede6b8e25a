"""Executable checks of the feature-learning claims.

Every check returns a :class:`Verdict`, which serialises to a small JSON
document ``{check, params, pass, worst_slack, iterations_checked}``. The
slack is signed so that a positive value means the claimed inequality holds
with room to spare.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from usefullab._io import atomic_write_text
from usefullab.cubic_cnn import InitSpec, init_weights, logit_weights, loss_grad, margins
from usefullab.optimizers import OptimizerConfig, TrainTrace, train
from usefullab.synthgen import Dataset, DistributionSpec, FeatureBasis, amplify_slow, generate, make_basis


class RegimeViolation(ValueError):
    """Inputs fall outside the regime where a closed form is valid."""


@dataclass
class Verdict:
    check: str
    params: dict
    passed: bool
    worst_slack: float
    iterations_checked: int
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "check": self.check,
            "params": self.params,
            "pass": bool(self.passed),
            "worst_slack": _num(self.worst_slack),
            "iterations_checked": int(self.iterations_checked),
            "details": self.details,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def write(self, path) -> None:
        atomic_write_text(path, self.to_json())


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else repr(x)


def first_crossing(values, threshold: float) -> int | None:
    hit = np.flatnonzero(np.asarray(values) >= threshold)
    return int(hit[0]) if hit.size else None


# --- paired GD / SAM runs --------------------------------------------------


@dataclass
class GapTrace:
    """Alignments of paired GD and SAM runs from one shared initialization."""

    G_e: np.ndarray
    G_d: np.ndarray
    S_e: np.ndarray
    S_d: np.ndarray
    T0: int | None
    threshold: float
    gd_trace: TrainTrace
    sam_trace: TrainTrace
    W0: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def gap_gd(self) -> np.ndarray:
        return self.G_e - self.G_d

    @property
    def gap_sam(self) -> np.ndarray:
        return self.S_e - self.S_d

    def check(self) -> Verdict:
        """``gap_sam(t) < gap_gd(t)`` for every ``1 <= t <= T0``."""
        if self.T0 is None:
            return Verdict("gap", self.params, False, float("nan"), 0, {"reason": "GD never crossed the threshold"})
        slack = (self.gap_gd - self.gap_sam)[1 : self.T0 + 1]
        if slack.size == 0:
            return Verdict("gap", self.params, False, float("nan"), 0, {"reason": "T0 = 0, nothing to check"})
        worst = float(slack.min())
        return Verdict(
            "gap",
            self.params,
            worst > 0,
            worst,
            int(slack.size),
            {"T0": self.T0, "argmin_slack": int(np.argmin(slack)) + 1},
        )


def run_gap_experiment(
    spec: DistributionSpec,
    init: InitSpec,
    eta: float = 0.1,
    rho: float = 0.02,
    iterations: int = 600,
    J: int = 40,
    threshold: float | None = None,
    *,
    basis: FeatureBasis | None = None,
    test_dataset: Dataset | None = None,
    normalize: bool = True,
) -> GapTrace:
    """Train GD and SAM from the same ``W0`` and record all four alignments.

    ``T0`` is the first iteration at which GD's fast alignment reaches
    ``threshold`` (default ``1 / beta_e``).
    """
    basis = basis if basis is not None else make_basis(spec.d)
    dataset = generate(spec, basis)
    W0 = init_weights(init, J, spec.d, basis)
    gd = train(W0, dataset, OptimizerConfig("gd", eta, rho, normalize, iterations), test_dataset=test_dataset)
    sam = train(W0, dataset, OptimizerConfig("sam", eta, rho, normalize, iterations), test_dataset=test_dataset)
    thr = 1.0 / spec.beta_e if threshold is None else threshold
    params = {
        "spec": spec.to_dict(),
        "init": dataclasses.asdict(init),
        "eta": eta,
        "rho": rho,
        "iterations": iterations,
        "J": J,
        "threshold": thr,
    }
    return GapTrace(gd.fast, gd.slow, sam.fast, sam.slow, first_crossing(gd.fast, thr), thr, gd, sam, W0, params)


@dataclass
class CrossingReport:
    t_cross: int | None
    slow_at_cross: float | None
    bound: float

    @property
    def slow_small(self) -> bool:
        return self.slow_at_cross is not None and self.slow_at_cross <= self.bound


def crossing_report(trace: TrainTrace, sigma_0: float, beta_e: float, C: float = 3.0) -> CrossingReport:
    """Fast-alignment crossing of ``1 / beta_e`` and the slow alignment there."""
    t = first_crossing(trace.fast, 1.0 / beta_e)
    slow = float(trace.slow[t]) if t is not None else None
    return CrossingReport(t, slow, C * sigma_0)


def check_learning_order(gd_trace: TrainTrace, sam_trace: TrainTrace, sigma_0: float, beta_e: float, C: float = 3.0) -> Verdict:
    """GD crosses first; neither run has learned the slow feature by its crossing.

    Passes when ``T_cross(GD) < T_cross(SAM)`` and both slow alignments at the
    respective crossings are at most ``C * sigma_0``. The slack is the
    smallest of ``T_sam - T_gd`` (in iterations) and the two
    ``C * sigma_0 - slow`` margins divided by ``sigma_0``.
    """
    gd = crossing_report(gd_trace, sigma_0, beta_e, C)
    sam = crossing_report(sam_trace, sigma_0, beta_e, C)
    params = {"sigma_0": sigma_0, "beta_e": beta_e, "C": C}
    if gd.t_cross is None or sam.t_cross is None:
        missing = [name for name, r in (("gd", gd), ("sam", sam)) if r.t_cross is None]
        raise RuntimeError(f"fast alignment never reached 1/beta_e within the budget for: {', '.join(missing)}")
    slacks = [
        float(sam.t_cross - gd.t_cross),
        (gd.bound - gd.slow_at_cross) / sigma_0,
        (sam.bound - sam.slow_at_cross) / sigma_0,
    ]
    passed = gd.t_cross < sam.t_cross and gd.slow_small and sam.slow_small
    details = {
        "t_cross_gd": gd.t_cross,
        "t_cross_sam": sam.t_cross,
        "slow_at_cross_gd": gd.slow_at_cross,
        "slow_at_cross_sam": sam.slow_at_cross,
        "slow_bound": gd.bound,
    }
    return Verdict("order", params, passed, min(slacks), max(gd.t_cross, sam.t_cross), details)


# --- one-step upsampling factor ---------------------------------------------


def _pick_filter(w: np.ndarray, basis: FeatureBasis) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim == 2:
        return w[int(np.argmax(w @ basis.v_e))]
    return w


def upsample_factor(w, spec: DistributionSpec, rho_t: float, basis: FeatureBasis | None = None) -> float:
    """Slow-feature amplification that makes one GD step mimic one SAM step.

    ``k = ((1 - 3 rho_t beta_d^3 <w, v_d>) / (1 - 3 rho_t alpha beta_e^3 <w, v_e>)) ** (2/3)``

    ``w`` is a single filter or a weight matrix, in which case the filter
    best aligned with ``v_e`` is used. The closed form assumes unit logit
    weights; with logit weights ``l`` pass ``rho_t * mean(l)``.
    """
    basis = basis if basis is not None else make_basis(spec.d)
    w = _pick_filter(w, basis)
    pe, pd = float(w @ basis.v_e), float(w @ basis.v_d)
    if pe <= 0 or pd <= 0:
        raise RegimeViolation(f"need positive projections, got <w,v_e>={pe:.3g}, <w,v_d>={pd:.3g}")
    num = 1.0 - 3.0 * rho_t * spec.beta_d**3 * pd
    den = 1.0 - 3.0 * rho_t * spec.alpha * spec.beta_e**3 * pe
    if num <= 0 or den <= 0:
        raise RegimeViolation(f"rho_t={rho_t:.3g} too large: numerator {num:.3g}, denominator {den:.3g}")
    return (num / den) ** (2.0 / 3.0)


def feature_coefficients(g: np.ndarray, basis: FeatureBasis) -> tuple[float, float]:
    """Components ``(<g, v_e>, <g, v_d>)`` of a single-filter gradient."""
    g = np.asarray(g).ravel()
    return float(g @ basis.v_e), float(g @ basis.v_d)


@dataclass
class UpsampleFactorCheck:
    k: float
    ratio_sam: float  # slow/fast coefficient ratio of the SAM gradient on D
    ratio_gd_amplified: float  # same ratio for the GD gradient on amplify_slow(D, k)
    rho_effective: float
    alpha_effective: float

    @property
    def relative_error(self) -> float:
        return abs(self.ratio_gd_amplified / self.ratio_sam - 1.0)


def upsample_factor_oracle(w: np.ndarray, dataset: Dataset, rho_t: float) -> UpsampleFactorCheck:
    """Compare the closed-form ``k`` against explicit one-step gradients.

    ``dataset`` must be noise-free. Using a single filter ``w``:

    * SAM: gradient at ``w + rho_t * grad L(w)`` on ``dataset``;
    * GD: gradient at ``w`` on ``amplify_slow(dataset, k)``.

    ``k`` comes from :func:`upsample_factor` with the effective radius
    ``rho_t * mean(l)`` and effective fast fraction
    ``sum_{fast} l / sum l``, which makes the perturbed projections exact. The
    remaining mismatch comes only from the logit weights changing between the
    three evaluation points, so it vanishes as the outputs shrink.
    """
    if np.any(dataset.noise_patches() != 0):
        raise RegimeViolation("the oracle needs a noise-free dataset")
    basis = dataset.basis
    W = np.asarray(w, dtype=np.float64).reshape(1, -1)
    lw = logit_weights(margins(W, dataset))
    m = dataset.multiplicity.astype(np.float64)
    l_bar = float(np.dot(m, lw) / m.sum())
    alpha_eff = float(np.dot(m * dataset.has_fast, lw) / np.dot(m, lw))
    eff = dataclasses.replace(dataset.spec, alpha=alpha_eff)
    k = upsample_factor(W[0], eff, rho_t * l_bar, basis)

    g = loss_grad(W, dataset)[1]
    g_sam = loss_grad(W + rho_t * g, dataset)[1]
    g_amp = loss_grad(W, amplify_slow(dataset, k))[1]
    se, sd = feature_coefficients(g_sam, basis)
    ae, ad = feature_coefficients(g_amp, basis)
    return UpsampleFactorCheck(k, sd / se, ad / ae, rho_t * l_bar, alpha_eff)


@dataclass
class RatioReport:
    ratio_before: np.ndarray  # <w, v_d> / <w, v_e> per filter
    ratio_after: np.ndarray  # same for the SAM-perturbed weights
    regime: np.ndarray  # alpha_eff beta_e^3 <w,v_e> >= beta_d^3 <w,v_d> per filter

    @property
    def holds(self) -> np.ndarray:
        return self.ratio_after >= self.ratio_before

    @property
    def worst_slack(self) -> float:
        return float(np.min(self.ratio_after - self.ratio_before))


def check_gradient_ratio_monotonicity(W: np.ndarray, dataset: Dataset, rho_t: float) -> RatioReport:
    """Slow/fast projection ratio per filter before and after the SAM ascent step.

    On noise-free data ``<w_eps, v> = <w, v> (1 - 3 rho_t c_v <w, v>)`` with
    ``c_e = beta_e^3 sum_fast l / N`` and ``c_d = beta_d^3 sum l / N``, so the
    ratio grows exactly when ``c_e <w, v_e> >= c_d <w, v_d>``.
    """
    if np.any(dataset.noise_patches() != 0):
        raise RegimeViolation("ratio check needs a noise-free dataset")
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    b = dataset.basis
    pe, pd = W @ b.v_e, W @ b.v_d
    if np.any(pe <= 0) or np.any(pd <= 0):
        raise RegimeViolation("every filter needs positive projections on both features")
    g = loss_grad(W, dataset)[1]
    W_eps = W + rho_t * g
    qe, qd = W_eps @ b.v_e, W_eps @ b.v_d
    if np.any(qe <= 0) or np.any(qd <= 0):
        raise RegimeViolation("perturbation flips a projection sign; rho_t too large")
    lw = logit_weights(margins(W, dataset))
    m = dataset.multiplicity.astype(np.float64)
    c_e = dataset.spec.beta_e**3 * np.dot(m * dataset.has_fast, lw)
    c_d = dataset.spec.beta_d**3 * np.dot(m, lw)
    return RatioReport(pd / pe, qd / qe, c_e * pe >= c_d * pd)


# --- growth recursion ------------------------------------------------------

MAX_RECURSION_STEPS = 10_000_000


@dataclass(frozen=True)
class RecursionSpec:
    """Sequence ``z_{t+1} = z_t + m (z_t - rho)^2`` with upper rate ``M``."""

    z0: float
    rho: float
    m: float
    M: float
    v: float

    def __post_init__(self):
        if not self.z0 > 0:
            raise ValueError(f"z0 must be positive, got {self.z0}")
        if not 0 <= self.rho < self.z0:
            raise ValueError(f"need 0 <= rho < z0, got rho={self.rho}, z0={self.z0}")
        if not (self.m > 0 and self.M > 0):
            raise ValueError(f"m and M must be positive, got m={self.m}, M={self.M}")
        if not self.v >= self.z0:
            raise ValueError(f"target v must be >= z0, got v={self.v}, z0={self.z0}")

    def bound(self) -> float:
        gap2 = (self.z0 - self.rho) ** 2
        doublings = math.ceil(math.log(self.v / self.z0) / math.log(2.0))
        return 2 * self.z0 / (self.m * gap2) + 4 * self.M * self.z0**2 / (self.m * gap2) * doublings


def simulate_recursion(spec: RecursionSpec) -> tuple[int, float]:
    """Iterate the lower recursion until ``z_t >= v``.

    Returns ``(measured_crossing, closed_form_bound)``. Each increment is
    checked against the upper recursion ``M z_t^2``.
    """
    z, t = spec.z0, 0
    while z < spec.v:
        inc = spec.m * (z - spec.rho) ** 2
        if inc > spec.M * z * z:
            raise RegimeViolation(f"increment {inc:.3g} exceeds the upper recursion {spec.M * z * z:.3g} at t={t}")
        z += inc
        t += 1
        if t >= MAX_RECURSION_STEPS:
            raise RuntimeError(f"sequence did not reach v={spec.v} within {MAX_RECURSION_STEPS} steps")
    return t, spec.bound()


def random_recursion_spec(rng: np.random.Generator) -> RecursionSpec:
    """A random spec in the valid regime (``m <= M``, so increments stay consistent)."""
    z0 = float(10 ** rng.uniform(-3, 0))
    rho = float(z0 * rng.uniform(0, 0.9))
    M = float(10 ** rng.uniform(-1, 1))
    m = float(M * rng.uniform(0.05, 1.0))
    v = float(z0 * 10 ** rng.uniform(0, 2))
    return RecursionSpec(z0, rho, m, M, v)


def check_recursion(samples: int = 1000, seed: int = 0) -> Verdict:
    rng = np.random.default_rng(seed)
    worst, checked, failures = np.inf, 0, 0
    for _ in range(samples):
        spec = random_recursion_spec(rng)
        measured, bound = simulate_recursion(spec)
        worst = min(worst, bound - measured)
        failures += measured > bound
        checked += 1
    return Verdict("recursion", {"samples": samples, "seed": seed}, failures == 0, worst, checked, {"failures": failures})


# --- toy presets -------------------------------------------------------------

# Init scale for the toy runs. sqrt(ln d / d) ~ 0.28 at d = 50 is too large for
# the fast/slow phases to separate within 600 iterations; 0.02 puts GD's
# fast-feature takeoff near iteration 200.
TOY_SIGMA_0 = 0.02
TEST_SEED_OFFSET = 1_000_003


def toy_gap_run(
    seed: int,
    beta_d: float = 0.2,
    *,
    enforce_positive_projections: bool = False,
    with_test: bool = True,
    iterations: int = 600,
    sigma_p: float | None = None,
) -> GapTrace:
    """Paired GD/SAM run at the toy settings (d=50, J=40, eta=0.1, rho=0.02).

    Data seed and init seed are both ``seed``; the test set uses
    ``seed + TEST_SEED_OFFSET``.
    """
    kw = {} if sigma_p is None else {"sigma_p": sigma_p}
    spec = DistributionSpec(beta_d=beta_d, seed=seed, **kw)
    basis = make_basis(spec.d)
    test = generate(dataclasses.replace(spec, seed=seed + TEST_SEED_OFFSET), basis) if with_test else None
    init = InitSpec(TOY_SIGMA_0, seed, enforce_positive_projections)
    return run_gap_experiment(spec, init, 0.1, 0.02, iterations, 40, basis=basis, test_dataset=test)
