import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from usefullab.cubic_cnn import InitSpec, forward, init_weights
from usefullab.metrics import (
    alignment,
    classification_error,
    first_correct_epoch,
    forgetting_csv,
    forgetting_scores,
    l1_norm,
    noise_alignment_monitor,
    write_forgetting_csv,
)
from usefullab.synthgen import DistributionSpec, generate, make_basis


def test_alignment_simple():
    b = make_basis(10)
    W = np.zeros((3, 10))
    W[0] = 0.7 * b.v_e
    W[1, 5] = 1.0
    W[2, 7] = -2.0
    assert alignment(W, b.v_e) == pytest.approx(0.7)
    assert alignment(np.zeros((3, 10)), b.v_e) == 0.0


@given(seed=st.integers(0, 10**6))
@settings(max_examples=30)
def test_alignment_brute_force(seed):
    rng = np.random.default_rng(seed)
    W, v = rng.normal(size=(7, 5)), rng.normal(size=5)
    brute = max(math.fsum(W[j, k] * v[k] for k in range(5)) for j in range(7))
    assert math.isclose(alignment(W, v), brute, rel_tol=1e-12, abs_tol=1e-15)


def test_error_trivial_cases():
    ds = generate(DistributionSpec(d=6, n=50, sigma_p=0.0, beta_d=0.5, seed=1))
    assert classification_error(np.zeros((2, 6)), ds) == 1.0
    W = np.zeros((1, 6))
    W[0, 1] = 1.0  # aligned with v_d, every margin = beta_d^3 > 0
    assert classification_error(W, ds) == 0.0


def test_error_brute_force_and_multiplicity():
    ds = generate(DistributionSpec(d=10, n=300, seed=2))
    W = init_weights(InitSpec(0.5, 1), 4, 10)
    wrong = [forward(W, ds.patches[i]) * ds.labels[i] <= 0 for i in range(ds.n)]
    assert classification_error(W, ds) == pytest.approx(np.mean(wrong), abs=1e-15)
    m = np.arange(300) % 4 + 1
    up = ds.with_multiplicity(m)
    assert classification_error(W, up) == pytest.approx(classification_error(W, up.flatten()), abs=1e-15)


def test_l1_norm():
    assert l1_norm(np.zeros((3, 4))) == 0.0
    assert l1_norm(np.array([[3.5]])) == 3.5
    W = np.random.default_rng(0).normal(size=(40, 50))
    assert l1_norm(W) == pytest.approx(math.fsum(abs(float(x)) for x in W.ravel()), rel=1e-10)


@pytest.mark.parametrize(
    "hist,score",
    [([1, 1, 1, 1], 0), ([1, 0, 1, 0], 2), ([0, 0, 0, 0], 0), ([0, 1, 1, 1], 0), ([1, 0, 0, 0], 1)],
)
def test_forgetting_examples(hist, score):
    assert forgetting_scores(np.array([hist], dtype=bool))[0] == score


@given(arrays(bool, st.tuples(st.integers(1, 8), st.integers(1, 12))))
def test_forgetting_brute_force(h):
    brute = [sum(1 for e in range(h.shape[1] - 1) if h[i, e] and not h[i, e + 1]) for i in range(h.shape[0])]
    s = forgetting_scores(h)
    assert s.tolist() == brute
    assert np.all(s <= max(h.shape[1] - 1, 0))
    fc = first_correct_epoch(h)
    for i in range(h.shape[0]):
        assert fc[i] == (list(h[i]).index(True) if h[i].any() else -1)


def test_forgetting_rejects_bad_shape():
    with pytest.raises(ValueError):
        forgetting_scores(np.array([True, False]))


def test_forgetting_csv(tmp_path):
    text = forgetting_csv([0, 2], [True, False], [0, -1])
    assert text == "example_index,score,has_fast_feature,first_correct_epoch\n0,0,1,0\n1,2,0,-1\n"
    p = tmp_path / "f.csv"
    write_forgetting_csv(p, [1], [False])
    assert p.read_text() == "example_index,score,has_fast_feature\n0,1,0\n"


def test_noise_monitor():
    ds = generate(DistributionSpec(n=2000, seed=0))
    assert noise_alignment_monitor(np.zeros((40, 50)), ds) == 0.0
    zero_noise = generate(DistributionSpec(n=100, sigma_p=0.0, seed=0))
    W = init_weights(InitSpec(0.3, 0), 40, 50)
    assert noise_alignment_monitor(W, zero_noise) == 0.0
    # toy init: observed multiple ~0.66 for this seed
    s0 = 0.02
    W = init_weights(InitSpec(s0, 0), 40, 50, make_basis(50))
    assert noise_alignment_monitor(W, ds) < 10 * s0 * ds.spec.sigma_p * math.sqrt(50)
