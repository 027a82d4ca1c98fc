"""Nonnegative feature maps for linearized attention.

``simrf`` (simplex random features) and ``positive_rf`` approximate the
softmax kernel ``exp(q.k)`` with positive random features; ``elu1``,
``relu`` and ``focused`` are deterministic alternatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

RANDOM_KINDS = ("simrf", "positive_rf")
KINDS = RANDOM_KINDS + ("elu1", "relu", "focused")

# largest argument for which exp() stays finite in float64
_EXP_CLAMP = 709.0
_FOCUS_EPS = 1e-6


def build_simplex_rows(m: int) -> np.ndarray:
    """Rows of a regular simplex in R^m with the last coordinate unused.

    All rows have unit norm and pairwise dot products ``-1/(m-1)``.
    """
    if m < 2:
        raise ValueError(f"simplex needs m >= 2, got {m}")
    ones = np.ones(m)
    ones[-1] = 0.0
    S = np.sqrt(m / (m - 1)) * np.eye(m) - (np.sqrt(m) + 1) / (m - 1) ** 1.5 * ones
    S[-1] = ones / np.sqrt(m - 1)
    return S


def haar_orthogonal(rng, m: int, count: int | None = None) -> np.ndarray:
    """Haar-distributed orthogonal matrices via sign-corrected QR."""
    shape = (m, m) if count is None else (count, m, m)
    Q, R = np.linalg.qr(rng.standard_normal(shape))
    signs = np.sign(np.diagonal(R, axis1=-2, axis2=-1))
    signs[signs == 0] = 1.0
    return Q * signs[..., None, :]


def draw_random_weights(kind: str, m: int, rng, count: int | None = None) -> np.ndarray:
    """Projection matrices for the random feature kinds.

    ``simrf`` gives ``D S R`` with ``D`` chi-distributed norms, ``S`` the
    simplex rows and ``R`` Haar-orthogonal. ``positive_rf`` gives iid
    standard normal rows.
    """
    shape = (m, m) if count is None else (count, m, m)
    if kind == "positive_rf":
        return rng.standard_normal(shape)
    if kind != "simrf":
        raise ValueError(f"{kind!r} has no random weights")
    S = build_simplex_rows(m)
    R0 = haar_orthogonal(rng, m, count)
    norms = np.linalg.norm(rng.standard_normal(shape), axis=-1)
    return norms[..., :, None] * (S @ R0)


@dataclass(frozen=True)
class FeatureMap:
    """A frozen feature map phi: R^m -> R^m.

    For the random kinds ``W`` holds the realized projection matrix (one row
    per feature); it is never trained.
    """

    kind: str
    dim: int
    W: np.ndarray | None = None
    seed: int | None = None
    power: float = 3.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature map kind {self.kind!r}; expected one of {KINDS}")
        if self.kind in RANDOM_KINDS:
            if self.W is None or self.W.shape != (self.dim, self.dim):
                raise ValueError(f"{self.kind} needs an {self.dim}x{self.dim} weight matrix")
            W = np.array(self.W, dtype=np.float64)
            W.setflags(write=False)
            object.__setattr__(self, "W", W)

    @property
    def is_exponential(self) -> bool:
        return self.kind in RANDOM_KINDS

    def _check(self, A):
        A = np.asarray(A, dtype=np.float64)
        if A.shape[-1] != self.dim:
            raise ValueError(f"feature map expects dimension {self.dim}, got {A.shape[-1]}")
        if np.isnan(A).any():
            raise ValueError("NaN input to feature map")
        return A

    def log_features(self, A) -> np.ndarray:
        """``log phi(A)`` for the exponential kinds."""
        if not self.is_exponential:
            raise ValueError(f"{self.kind} has no log-space form")
        A = self._check(A)
        return A @ self.W.T - 0.5 * np.sum(A * A, axis=-1, keepdims=True) - 0.5 * np.log(self.dim)

    def __call__(self, A) -> np.ndarray:
        A = self._check(A)
        if self.is_exponential:
            return np.exp(np.minimum(self.log_features(A), _EXP_CLAMP))
        if self.kind == "elu1":
            return np.where(A > 0, A + 1.0, np.exp(np.minimum(A, 0.0)))
        if self.kind == "relu":
            return np.maximum(A, 0.0)
        return self._focused(A)[0]

    def shifted(self, A, per_row: bool):
        """Features scaled by a positive constant that cancels in attention ratios.

        Exponential kinds subtract the max log-feature, per row when
        ``per_row`` (queries) and globally otherwise (keys). Returns the
        features and the log of the removed factor.
        """
        if not self.is_exponential:
            return self(A), 0.0
        L = self.log_features(A)
        if per_row:
            shift = L.max(axis=-1, keepdims=True)
        else:
            shift = L.max() if L.size else 0.0
        return np.exp(L - shift), shift

    def _focused(self, A):
        r = np.maximum(A, 0.0) + _FOCUS_EPS
        s = r**self.power
        rn = np.linalg.norm(r, axis=-1, keepdims=True)
        sn = np.linalg.norm(s, axis=-1, keepdims=True)
        return s * (rn / sn), r, s, rn, sn

    def vjp(self, A, Phi, grad):
        """Pull ``grad`` (w.r.t. the features) back to the input ``A``.

        ``Phi`` is the forward output; for exponential kinds any positively
        rescaled copy works as long as ``grad`` refers to that copy.
        """
        A = np.asarray(A, dtype=np.float64)
        if self.is_exponential:
            gp = grad * Phi
            return gp @ self.W - gp.sum(axis=-1, keepdims=True) * A
        if self.kind == "elu1":
            return grad * np.where(A > 0, 1.0, np.exp(np.minimum(A, 0.0)))
        if self.kind == "relu":
            return grad * (A > 0)
        _, r, s, rn, sn = self._focused(A)
        p = self.power
        alpha = rn / sn
        gs = np.sum(grad * s, axis=-1, keepdims=True)
        ds = p * r ** (p - 1)
        g_r = alpha * grad * ds + gs * (r / (rn * sn) - rn * s * ds / sn**3)
        return g_r * (A > 0)


def build_simrf_map(m: int, seed: int) -> FeatureMap:
    """SimRF map with weights drawn deterministically from ``seed``."""
    return build_feature_map("simrf", m, seed)


def build_feature_map(kind: str, m: int, seed: int | None = 0, power: float = 3.0) -> FeatureMap:
    if kind in RANDOM_KINDS:
        if kind == "simrf" and m < 2:
            raise ValueError(f"simplex needs m >= 2, got {m}")
        W = draw_random_weights(kind, m, np.random.default_rng(seed))
        return FeatureMap(kind, m, W, seed, power)
    return FeatureMap(kind, m, None, seed, power)


def apply_feature_map(fmap: FeatureMap, a) -> np.ndarray:
    return fmap(a)


class KernelFeatureMap(TransformerMixin, BaseEstimator):
    """Square feature map for kernelized attention as a scikit-learn transformer.

    ``fit`` only reads the input width and draws the random projection; the
    map is frozen afterwards.

    Parameters
    ----------
    kind : {"simrf", "positive_rf", "elu1", "relu", "focused"}, default="simrf"
    focus_power : float, default=3.0
        Exponent of the focused map.
    random_state : int, default=0
    """

    def __init__(self, kind="simrf", *, focus_power=3.0, random_state=0):
        self.kind = kind
        self.focus_power = focus_power
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.map_ = build_feature_map(self.kind, X.shape[1], self.random_state, self.focus_power)
        return self

    def transform(self, X):
        check_is_fitted(self, "map_")
        return self.map_(check_array(X))
