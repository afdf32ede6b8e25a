import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from usefullab.synthgen import (
    DistributionSpec,
    amplify_slow,
    dumps_dataset,
    generate,
    load_dataset,
    loads_dataset,
    make_basis,
    save_dataset,
)
from usefullab.synthgen import _rescale_slow

TOY = DistributionSpec()


def test_canonical_basis_is_e1_e2():
    b = make_basis(50)
    assert np.array_equal(b.v_e, np.eye(50)[0])
    assert np.array_equal(b.v_d, np.eye(50)[1])


@given(d=st.integers(2, 200), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_rotated_basis_orthonormal(d, seed):
    b = make_basis(d, seed)
    assert abs(b.v_e @ b.v_d) < 1e-12
    assert abs(np.linalg.norm(b.v_e) - 1) < 1e-12
    assert abs(np.linalg.norm(b.v_d) - 1) < 1e-12


def test_rotated_basis_reproducible():
    a, b = make_basis(30, 7), make_basis(30, 7)
    assert a.v_e.tobytes() == b.v_e.tobytes() and a.v_d.tobytes() == b.v_d.tobytes()


def test_toy_shape_and_golden_mask_count():
    ds = generate(TOY)
    assert ds.patches.shape == (10000, 3, 50)
    masked = int((~ds.has_fast).sum())
    # regression fixture for seed 0; must lie within 4 sd of Binomial(10000, 0.1)
    assert masked == 992
    assert abs(masked - 1000) < 4 * math.sqrt(10000 * 0.1 * 0.9)


@given(
    d=st.integers(2, 12),
    P=st.integers(3, 6),
    n=st.integers(1, 40),
    alpha=st.floats(0, 1),
    beta_d=st.floats(0, 2),
    seed=st.integers(0, 10**6),
    rotated=st.booleans(),
)
@settings(max_examples=80, deadline=None)
def test_patch_roles(d, P, n, alpha, beta_d, seed, rotated):
    spec = DistributionSpec(d=d, P=P, n=n, alpha=alpha, beta_d=beta_d, sigma_p=1.0, seed=seed)
    basis = make_basis(d, 11 if rotated else None)
    ds = generate(spec, basis)
    y = ds.labels
    assert set(np.unique(y)) <= {-1.0, 1.0}
    assert np.allclose(ds.role_patches(0), (beta_d * y)[:, None] * basis.v_d)
    fast = ds.role_patches(1)
    assert np.allclose(fast[ds.has_fast], (spec.beta_e * y[ds.has_fast])[:, None] * basis.v_e)
    assert np.all(fast[~ds.has_fast] == 0.0)
    # each row of the permutation is a permutation of 0..P-1
    assert np.array_equal(np.sort(ds.permutation, axis=1), np.tile(np.arange(P), (n, 1)))
    assert ds.noise_patches().shape == (n, P - 2, d)
    assert ds.effective_size == n and np.all(ds.multiplicity == 1)


def test_alpha_one_means_every_example_has_fast():
    ds = generate(DistributionSpec(n=500, alpha=1.0, seed=3))
    assert ds.has_fast.all()


def test_noise_scale():
    ds = generate(DistributionSpec(n=4000, seed=1))
    xi = ds.noise_patches()
    assert abs(xi.std() - 0.125) < 0.005


def test_orthogonalized_noise():
    b = make_basis(20, 5)
    ds = generate(DistributionSpec(d=20, n=200, orthogonalize_noise=True), b)
    xi = ds.noise_patches()
    assert np.abs(xi @ b.v_e).max() < 1e-12 and np.abs(xi @ b.v_d).max() < 1e-12


def test_generation_is_deterministic():
    a, b = generate(DistributionSpec(n=300, seed=9)), generate(DistributionSpec(n=300, seed=9))
    assert dumps_dataset(a) == dumps_dataset(b)
    c = generate(DistributionSpec(n=300, seed=10))
    assert dumps_dataset(a) != dumps_dataset(c)


def test_arrays_are_read_only():
    ds = generate(DistributionSpec(n=10))
    with pytest.raises(ValueError):
        ds.patches[0, 0, 0] = 1.0


@pytest.mark.parametrize(
    "kw",
    [{"d": 1}, {"P": 2}, {"n": 0}, {"alpha": 1.5}, {"alpha": -0.1}, {"beta_d": -1.0}, {"sigma_p": -1.0}],
)
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        DistributionSpec(**kw)


def test_theory_regime_flag():
    assert DistributionSpec().in_theory_regime
    assert not DistributionSpec(beta_d=1.0).in_theory_regime
    # alpha^(1/3) beta_e must exceed beta_d
    assert not DistributionSpec(alpha=0.001, beta_d=0.2).in_theory_regime


def test_amplify_identity_and_doubling():
    ds = generate(DistributionSpec(n=200, seed=2))
    assert amplify_slow(ds, 1) is ds
    amp = amplify_slow(ds, 2)
    assert np.allclose(np.linalg.norm(amp.role_patches(0), axis=1), 0.4, rtol=0, atol=1e-15)
    assert amp.spec.beta_d == pytest.approx(0.4)
    # other roles untouched
    assert np.array_equal(amp.role_patches(1), ds.role_patches(1))
    assert np.array_equal(amp.noise_patches(), ds.noise_patches())


def test_amplify_round_trip():
    ds = generate(DistributionSpec(n=200, seed=4))
    back = _rescale_slow(amplify_slow(ds, 2), 0.5)
    assert np.max(np.abs(back.patches - ds.patches)) < 1e-12


def test_amplify_rejects_shrinking():
    with pytest.raises(ValueError):
        amplify_slow(generate(DistributionSpec(n=5)), 0.5)


def test_multiplicity_and_flatten():
    ds = generate(DistributionSpec(n=6, seed=1))
    m = np.array([1, 2, 1, 3, 1, 1])
    up = ds.with_multiplicity(m)
    assert up.effective_size == 9
    flat = up.flatten()
    assert flat.n == 9 and flat.effective_size == 9
    with pytest.raises(ValueError):
        ds.with_multiplicity(np.zeros(6, dtype=np.int64))


def test_serialization_round_trip(tmp_path):
    ds = generate(DistributionSpec(n=500, seed=3)).with_multiplicity(np.arange(500) % 3 + 1)
    blob = dumps_dataset(ds)
    back = loads_dataset(blob)
    for name in ("patches", "labels", "has_fast", "permutation", "multiplicity"):
        assert np.array_equal(getattr(back, name), getattr(ds, name)), name
    assert back.spec == ds.spec
    assert dumps_dataset(back) == blob
    p = tmp_path / "ds.usfl"
    save_dataset(p, ds)
    assert p.read_bytes() == blob
    assert dumps_dataset(load_dataset(p)) == blob


def test_loads_rejects_garbage():
    with pytest.raises(ValueError):
        loads_dataset(b"not a dataset at all")


def test_subset_keeps_spec_consistent():
    ds = generate(DistributionSpec(n=50, seed=1))
    sub = ds.subset(np.arange(10))
    assert sub.n == 10 and sub.spec.n == 10
    assert dataclasses.replace(sub.spec, n=50) == ds.spec
