"""scikit-learn style recommender wrapping the trainer."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .evaluation import evaluate, rank_items
from .graph import TEST, TRAIN, VALID, InteractionGraph
from .spectral import truncated_svd
from .training import train


def _as_pairs(X):
    """Accept a user x item matrix or an (n, 2) array of index pairs."""
    if sp.issparse(X):
        coo = sp.coo_matrix(X)
        keep = coo.data != 0
        return np.stack([coo.row[keep], coo.col[keep]], axis=1).astype(np.int64), coo.shape
    X = np.asarray(X)
    if X.ndim == 2 and X.shape[1] == 2 and np.issubdtype(X.dtype, np.integer):
        return X.astype(np.int64), None
    if X.ndim == 2:
        rows, cols = np.nonzero(X)
        return np.stack([rows, cols], axis=1).astype(np.int64), X.shape
    raise ValueError("expected an interaction matrix or an (n, 2) integer array of pairs")


class MGFormerRecommender(BaseEstimator):
    """Masked linear graph-attention recommender.

    ``fit`` takes the training interactions (sparse user x item matrix or
    integer ``(user, item)`` pairs) and learns one representation per user
    and item token. Scores are dot products of those representations.

    Parameters
    ----------
    d : int, default=32
        Embedding size; tokens have ``2 * d`` features with structural encodings.
    lam : float, default=1.0
        Weight of the uniformity term.
    lr, batch_size, epochs, patience
        Adam learning rate, positive pairs per step, epoch budget and
        early-stopping patience (used only when validation data is given).
    mask_mode : {"sine_degree", "all_ones", "adjacency"}
    feature_map : {"simrf", "positive_rf", "elu1", "relu", "focused"}
    structural_encodings : bool, default=True
    random_state : int, default=0
        Seeds initialization, the random feature map and the SVD sketch.
    """

    def __init__(
        self,
        d=32,
        *,
        lam=1.0,
        lr=1e-3,
        batch_size=256,
        epochs=50,
        patience=5,
        mask_mode="sine_degree",
        feature_map="simrf",
        focus_power=3.0,
        structural_encodings=True,
        normalize=True,
        residual=False,
        degree_buckets=32,
        degree_dim=8,
        random_state=0,
    ):
        self.d = d
        self.lam = lam
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.mask_mode = mask_mode
        self.feature_map = feature_map
        self.focus_power = focus_power
        self.structural_encodings = structural_encodings
        self.normalize = normalize
        self.residual = residual
        self.degree_buckets = degree_buckets
        self.degree_dim = degree_dim
        self.random_state = random_state

    def _config(self) -> RunConfig:
        seed = int(self.random_state)
        return RunConfig(
            d=self.d, lam=float(self.lam), lr=float(self.lr), batch_size=self.batch_size,
            epochs=self.epochs, patience=self.patience, mask_mode=self.mask_mode,
            feature_map=self.feature_map, focus_power=float(self.focus_power),
            structural_encodings=self.structural_encodings, normalize=self.normalize,
            residual=self.residual, degree_buckets=self.degree_buckets,
            degree_dim=self.degree_dim, init_seed=seed, simrf_seed=seed, svd_seed=seed,
        )

    def fit(self, X, y=None, X_valid=None):
        """Train on ``X``; ``X_valid`` (same formats) enables early stopping."""
        cfg = self._config()
        pairs, shape = _as_pairs(X)
        split = np.full(len(pairs), TRAIN, dtype=np.uint8)
        if X_valid is not None:
            vpairs, _ = _as_pairs(X_valid)
            pairs = np.concatenate([pairs, vpairs])
            split = np.concatenate([split, np.full(len(vpairs), VALID, dtype=np.uint8)])
        M, N = shape if shape is not None else (int(pairs[:, 0].max()) + 1, int(pairs[:, 1].max()) + 1)
        graph = InteractionGraph.from_pairs(pairs, M, N, split)
        if X_valid is None:
            cfg = cfg.replace(patience=cfg.epochs)
        encodings = truncated_svd(graph.matrix(TRAIN), cfg.d, cfg.svd_seed, cfg.oversample, cfg.power_iters)
        result = train(graph, encodings, cfg)
        self.graph_ = graph
        self.encodings_ = encodings
        self.model_ = result.model
        self.history_ = result.log
        self.best_epoch_ = result.best_epoch
        H = result.model.transform()
        self.user_repr_ = H[:M]
        self.item_repr_ = H[M:]
        self.n_users_, self.n_items_ = M, N
        return self

    def transform(self, X=None):
        """Representations of all tokens (users first)."""
        check_is_fitted(self, "model_")
        return np.vstack([self.user_repr_, self.item_repr_])

    def predict(self, X):
        """Scores for ``(user, item)`` index pairs."""
        check_is_fitted(self, "model_")
        pairs = np.asarray(X, dtype=np.int64).reshape(-1, 2)
        return np.einsum("ij,ij->i", self.user_repr_[pairs[:, 0]], self.item_repr_[pairs[:, 1]])

    def recommend(self, user: int, k: int = 20, exclude_seen: bool = True) -> np.ndarray:
        check_is_fitted(self, "model_")
        scores = self.item_repr_ @ self.user_repr_[user]
        seen = self.graph_.matrix(TRAIN)[user].indices if exclude_seen else ()
        return rank_items(scores, seen)[:k]

    def score(self, X, y=None, k: int = 20) -> float:
        """Mean Recall@k over users with held-out interactions in ``X``."""
        check_is_fitted(self, "model_")
        pairs, _ = _as_pairs(X)
        base = self.graph_.split_edges_of(TRAIN)
        graph = InteractionGraph.from_pairs(
            np.concatenate([base, pairs]), self.n_users_, self.n_items_,
            np.concatenate([np.full(len(base), TRAIN), np.full(len(pairs), TEST)]).astype(np.uint8),
        )
        return evaluate(self.user_repr_, self.item_repr_, graph, k=k).recall
