"""Truncated SVD structural encodings of the interaction matrix."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class StructuralEncodings:
    """User and item encodings ``U sqrt(S)`` and ``V sqrt(S)``."""

    user_enc: np.ndarray
    item_enc: np.ndarray
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.singular_values)

    @property
    def tokens(self) -> np.ndarray:
        """Encodings of all tokens, users first."""
        return np.vstack([self.user_enc, self.item_enc])


def truncated_svd(R, rank: int, seed: int = 0, oversample: int = 8, power_iters: int = 2):
    """Rank-``rank`` randomized SVD of ``R`` returned as structural encodings.

    Uses a Gaussian range finder with ``power_iters`` rounds of subspace
    iteration (re-orthonormalized every half step), then an exact SVD of the
    small projected matrix. Each singular pair is sign-fixed so the
    largest-magnitude entry of the left vector is positive.
    """
    if sp.issparse(R):
        R = sp.csr_matrix(R, dtype=np.float64)
        nnz = R.count_nonzero()
    else:
        R = np.asarray(R, dtype=np.float64)
        nnz = np.count_nonzero(R)
    M, N = R.shape
    if rank <= 0:
        raise ValueError("rank must be positive")
    if rank > min(M, N):
        raise ValueError(f"rank {rank} exceeds min(M, N) = {min(M, N)}")
    if nnz == 0:
        raise ValueError("interaction matrix has no nonzero entries")

    rng = np.random.default_rng(seed)
    width = min(rank + oversample, min(M, N))
    omega = rng.standard_normal((N, width))
    Q, _ = np.linalg.qr(R @ omega)
    for _ in range(power_iters):
        Z, _ = np.linalg.qr(R.T @ Q)
        Q, _ = np.linalg.qr(R @ Z)
    B = np.asarray((R.T @ Q).T)
    Ub, s, Vt = np.linalg.svd(B, full_matrices=False)
    U = Q @ Ub[:, :rank]
    V = Vt[:rank].T
    s = s[:rank]

    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivot, np.arange(rank)])
    signs[signs == 0] = 1.0
    U = U * signs
    V = V * signs
    root = np.sqrt(s)
    return StructuralEncodings(U * root, V * root, s)


def write_encodings(fh, enc: StructuralEncodings):
    """Append encodings as a rank header followed by f64 row-major blocks."""
    fh.write(_U64.pack(enc.rank))
    for block in (enc.singular_values, enc.user_enc, enc.item_enc):
        fh.write(np.ascontiguousarray(block, dtype="<f8").tobytes())


def read_encodings(fh, num_users: int, num_items: int) -> StructuralEncodings:
    rank = _U64.unpack(fh.read(8))[0]

    def block(rows):
        size = rows * rank if rows else rank
        data = fh.read(8 * size)
        if len(data) != 8 * size:
            raise ValueError("truncated encoding block")
        arr = np.frombuffer(data, dtype="<f8").astype(np.float64)
        return arr.reshape(rows, rank) if rows else arr

    s = block(0)
    return StructuralEncodings(block(num_users), block(num_items), s)


class StructuralEncoder(TransformerMixin, BaseEstimator):
    """Fit truncated-SVD encodings on a user-item matrix.

    ``fit_transform(R)`` returns the user encodings; ``item_enc_`` holds the
    item side. ``transform`` folds new user rows into the fitted item basis.

    Parameters
    ----------
    n_components : int, default=32
        Rank of the decomposition.
    oversample : int, default=8
        Extra columns in the random range sketch.
    power_iters : int, default=2
        Subspace iterations.
    random_state : int, default=0
    """

    def __init__(self, n_components=32, *, oversample=8, power_iters=2, random_state=0):
        self.n_components = n_components
        self.oversample = oversample
        self.power_iters = power_iters
        self.random_state = random_state

    def fit(self, X, y=None):
        enc = truncated_svd(
            X, self.n_components, self.random_state, self.oversample, self.power_iters
        )
        self.encodings_ = enc
        self.user_enc_ = enc.user_enc
        self.item_enc_ = enc.item_enc
        self.singular_values_ = enc.singular_values
        self.n_features_in_ = X.shape[1]
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).user_enc_

    def transform(self, X):
        check_is_fitted(self, "encodings_")
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} item columns, got {X.shape[1]}")
        # R V sqrt(S)^-1 = U sqrt(S) for rows of the fitted matrix
        s = self.singular_values_
        basis = np.divide(self.item_enc_, s, out=np.zeros_like(self.item_enc_), where=s > 0)
        return np.asarray(X @ basis)
