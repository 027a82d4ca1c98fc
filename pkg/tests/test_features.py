import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mgformer.features import (
    KINDS,
    FeatureMap,
    KernelFeatureMap,
    build_feature_map,
    build_simplex_rows,
    build_simrf_map,
    draw_random_weights,
)

finite = st.floats(-3, 3, allow_nan=False)


def test_simrf_at_zero_is_uniform():
    fmap = build_simrf_map(8, seed=0)
    phi = fmap(np.zeros((1, 8)))
    np.testing.assert_allclose(phi, np.full((1, 8), 1 / np.sqrt(8)), rtol=1e-15)
    assert phi @ phi.T == pytest.approx(1.0, abs=1e-15)


def test_elu1_at_zero_is_ones():
    assert np.array_equal(build_feature_map("elu1", 4)(np.zeros(4)), np.ones(4))


def test_simrf_matches_explicit_formula():
    m = 6
    fmap = build_simrf_map(m, seed=5)
    a = np.random.default_rng(0).normal(size=m)
    expected = np.exp(fmap.W @ a - a @ a / 2) / np.sqrt(m)
    np.testing.assert_allclose(fmap(a), expected, rtol=1e-13)


def test_simrf_weight_norms_are_chi_distributed():
    m = 8
    W = draw_random_weights("simrf", m, np.random.default_rng(0), count=20000)
    norms = np.linalg.norm(W, axis=-1).ravel()
    # chi_m has E[r^2] = m
    assert np.mean(norms**2) == pytest.approx(m, rel=0.01)
    # within one map the directions are the rotated simplex
    unit = W[0] / np.linalg.norm(W[0], axis=1, keepdims=True)
    G = unit @ unit.T
    np.testing.assert_allclose(G[~np.eye(m, dtype=bool)], -1 / (m - 1), atol=1e-12)


@pytest.mark.parametrize("m", [2, 3, 5, 16])
def test_simplex_rows_are_centred(m):
    np.testing.assert_allclose(build_simplex_rows(m).sum(axis=0), 0.0, atol=1e-13)


def test_simplex_needs_two_dimensions():
    with pytest.raises(ValueError):
        build_simplex_rows(1)


@pytest.mark.parametrize("kind", ["simrf", "positive_rf", "elu1", "focused"])
@settings(max_examples=40, deadline=None)
@given(A=arrays(np.float64, (3, 5), elements=finite))
def test_outputs_nonnegative(kind, A):
    assert np.all(build_feature_map(kind, 5, seed=1)(A) >= 0)


def test_relu_nonnegative_and_sparse():
    out = build_feature_map("relu", 3)(np.array([-1.0, 0.0, 2.0]))
    assert out.tolist() == [0.0, 0.0, 2.0]


def test_overflow_is_clamped_not_infinite():
    fmap = build_simrf_map(4, seed=0)
    out = fmap(np.full((1, 4), 400.0))
    assert np.all(np.isfinite(out))


def test_nan_input_rejected():
    with pytest.raises(ValueError, match="NaN"):
        build_simrf_map(4, seed=0)(np.array([0.0, np.nan, 0.0, 0.0]))


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        build_simrf_map(4, seed=0)(np.zeros(5))


def test_unknown_kind_rejected():
    with pytest.raises(ValueError):
        build_feature_map("cosine", 4)
    with pytest.raises(ValueError):
        FeatureMap("simrf", 4)


@given(A=arrays(np.float64, (4, 6), elements=finite), per_row=st.booleans())
def test_shift_is_a_positive_rescaling(A, per_row):
    fmap = build_simrf_map(6, seed=2)
    phi, shift = fmap.shifted(A, per_row)
    np.testing.assert_allclose(phi * np.exp(shift), fmap(A), rtol=1e-12)
    assert np.max(phi) <= 1.0 + 1e-15


@pytest.mark.parametrize("kind", KINDS)
def test_vjp_matches_finite_differences(kind):
    rng = np.random.default_rng(3)
    fmap = build_feature_map(kind, 5, seed=4)
    A = rng.normal(size=(3, 5))
    A[np.abs(A) < 0.05] = 0.3  # keep away from the relu kink
    G = rng.normal(size=(3, 5))
    analytic = fmap.vjp(A, fmap(A), G)
    numeric = np.zeros_like(A)
    eps = 1e-6
    for idx in np.ndindex(A.shape):
        up, down = A.copy(), A.copy()
        up[idx] += eps
        down[idx] -= eps
        numeric[idx] = np.sum(G * (fmap(up) - fmap(down))) / (2 * eps)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-8)


def test_focused_sharpens_direction():
    fmap = build_feature_map("focused", 3, power=3.0)
    a = np.array([1.0, 2.0, 0.5])
    out = fmap(a)
    # same norm as the rectified input, pointing closer to the largest axis
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(a + 1e-6), rel=1e-9)
    assert out[1] / np.linalg.norm(out) > a[1] / np.linalg.norm(a)


def test_transformer_wrapper():
    X = np.random.default_rng(0).normal(size=(7, 4))
    est = KernelFeatureMap("simrf", random_state=3).fit(X)
    np.testing.assert_array_equal(est.transform(X), build_simrf_map(4, 3)(X))
    assert est.get_params()["kind"] == "simrf"


def test_two_dimensional_simplex_by_hand():
    np.testing.assert_allclose(build_simplex_rows(2), [[-1.0, 0.0], [1.0, 0.0]], atol=1e-15)


def test_four_dimensional_simplex_dots():
    S = build_simplex_rows(4)
    G = S @ S.T
    np.testing.assert_allclose(G[np.triu_indices(4, 1)], -1 / 3, atol=1e-12)


def test_same_seed_same_weights():
    assert np.array_equal(build_simrf_map(8, 11).W, build_simrf_map(8, 11).W)
    assert not np.array_equal(build_simrf_map(8, 11).W, build_simrf_map(8, 12).W)


def test_chi_norm_mean():
    from scipy.special import gammaln

    m = 16
    W = draw_random_weights("simrf", m, np.random.default_rng(1), count=10_000 // m + 1)
    norms = np.linalg.norm(W, axis=-1).ravel()[:10_000]
    expected = np.sqrt(2) * np.exp(gammaln((m + 1) / 2) - gammaln(m / 2))
    assert norms.mean() == pytest.approx(expected, rel=0.02)
    assert np.all(norms > 0)


def test_weights_are_read_only():
    fmap = build_simrf_map(4, 0)
    with pytest.raises(ValueError):
        fmap.W[0, 0] = 1.0
