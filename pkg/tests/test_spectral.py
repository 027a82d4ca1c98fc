import io

import numpy as np
import pytest
import scipy.sparse as sp
from sklearn.base import clone

from mgformer.spectral import StructuralEncoder, read_encodings, truncated_svd, write_encodings


def _binary(rng, M=60, N=45, density=0.15):
    return sp.random(M, N, density=density, random_state=rng, format="csr", data_rvs=np.ones)


def _decaying(rng, M=60, N=45):
    U, _ = np.linalg.qr(rng.standard_normal((M, N)))
    V, _ = np.linalg.qr(rng.standard_normal((N, N)))
    return (U * 0.5 ** np.arange(N)) @ V.T


def test_singular_values_match_dense_svd():
    rng = np.random.default_rng(0)
    R = _binary(rng)
    enc = truncated_svd(R, 6, seed=1, oversample=10, power_iters=16)
    exact = np.linalg.svd(R.toarray(), compute_uv=False)[:6]
    np.testing.assert_allclose(enc.singular_values, exact, rtol=1e-8)


def test_power_iterations_tighten_a_flat_spectrum():
    R = _binary(np.random.default_rng(0))
    exact = np.linalg.svd(R.toarray(), compute_uv=False)[:6]
    errors = [np.max(np.abs(truncated_svd(R, 6, seed=1, power_iters=p).singular_values - exact))
              for p in (0, 2, 8)]
    assert errors[0] > errors[1] > errors[2]


def test_exact_for_low_rank_matrix():
    rng = np.random.default_rng(1)
    A = rng.random((30, 4)) @ rng.random((4, 25))
    enc = truncated_svd(A, 4, seed=0)
    np.testing.assert_allclose(enc.user_enc @ enc.item_enc.T, A, atol=1e-10)
    U, s, Vt = np.linalg.svd(A)
    np.testing.assert_allclose(enc.singular_values, s[:4], rtol=1e-12)


def test_sign_convention_and_determinism():
    rng = np.random.default_rng(2)
    R = _binary(rng)
    a = truncated_svd(R, 5, seed=3)
    b = truncated_svd(R, 5, seed=3)
    np.testing.assert_array_equal(a.user_enc, b.user_enc)
    U = a.user_enc / np.sqrt(a.singular_values)
    pivot = np.argmax(np.abs(U), axis=0)
    assert np.all(U[pivot, np.arange(5)] > 0)
    # the sketch seed changes rounding only, not the decomposition
    A = _decaying(rng)
    x = truncated_svd(A, 5, seed=3)
    y = truncated_svd(A, 5, seed=9)
    np.testing.assert_allclose(x.user_enc, y.user_enc, atol=1e-6)


def test_encodings_are_orthogonal_factors():
    rng = np.random.default_rng(3)
    enc = truncated_svd(_binary(rng), 5, seed=0)
    s = enc.singular_values
    np.testing.assert_allclose(enc.user_enc.T @ enc.user_enc, np.diag(s), atol=1e-10)
    np.testing.assert_allclose(enc.item_enc.T @ enc.item_enc, np.diag(s), atol=1e-10)
    assert np.all(np.diff(s) <= 0)


@pytest.mark.parametrize("rank", [0, -1, 46])
def test_rank_bounds(rank):
    with pytest.raises(ValueError):
        truncated_svd(_binary(np.random.default_rng(0)), rank)


def test_all_zero_matrix_rejected():
    with pytest.raises(ValueError):
        truncated_svd(sp.csr_matrix((5, 5)), 2)


def test_encoding_round_trip():
    enc = truncated_svd(_binary(np.random.default_rng(4)), 3)
    buf = io.BytesIO()
    write_encodings(buf, enc)
    buf.seek(0)
    back = read_encodings(buf, 60, 45)
    np.testing.assert_array_equal(back.user_enc, enc.user_enc)
    np.testing.assert_array_equal(back.item_enc, enc.item_enc)
    np.testing.assert_array_equal(back.singular_values, enc.singular_values)
    with pytest.raises(ValueError):
        read_encodings(io.BytesIO(buf.getvalue()[:-8]), 60, 45)


def test_estimator_folds_in_fitted_rows():
    R = _decaying(np.random.default_rng(5))
    est = StructuralEncoder(n_components=4, random_state=0)
    users = est.fit_transform(R)
    assert users.shape == (60, 4)
    np.testing.assert_allclose(est.transform(R), users, atol=1e-8)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(ValueError):
        est.transform(np.zeros((2, 7)))


def test_identity_matrix():
    enc = truncated_svd(np.eye(2), 2)
    np.testing.assert_allclose(enc.singular_values, [1.0, 1.0], atol=1e-14)
    np.testing.assert_allclose(enc.user_enc @ enc.item_enc.T, np.eye(2), atol=1e-14)


def test_rank_one_by_hand():
    enc = truncated_svd(np.ones((2, 2)), 1)
    assert enc.singular_values[0] == pytest.approx(2.0, abs=1e-14)
    np.testing.assert_allclose(enc.user_enc @ enc.item_enc.T, np.ones((2, 2)), atol=1e-14)
    np.testing.assert_allclose(enc.user_enc, [[1.0], [1.0]], atol=1e-14)


def test_random_reconstruction_close_to_optimal():
    A = np.random.default_rng(7).random((50, 40))
    enc = truncated_svd(A, 10, seed=0)
    U, s, Vt = np.linalg.svd(A)
    best = np.linalg.norm(A - (U[:, :10] * s[:10]) @ Vt[:10])
    assert np.linalg.norm(A - enc.user_enc @ enc.item_enc.T) <= 1.5 * best
