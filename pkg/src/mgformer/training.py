"""Parameters, alignment/uniformity loss, exact gradients and the training loop."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    adjacency_pairs,
    linear_backward,
    linear_forward,
    mask_channels,
    sparse_backward,
    sparse_forward,
)
from .config import RunConfig
from .features import FeatureMap, build_feature_map
from .graph import TRAIN, VALID, InteractionGraph

_log = logging.getLogger(__name__)

PARAM_NAMES = ("E", "W_Q", "W_K", "degree_table", "degree_w", "degree_b")


class TrainingDiverged(FloatingPointError):
    """Loss or gradient became non-finite; ``params`` holds the last good state."""

    def __init__(self, msg, params=None):
        super().__init__(msg)
        self.params = params


@dataclass
class ModelParams:
    E: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    degree_table: np.ndarray
    degree_w: np.ndarray
    degree_b: np.ndarray

    @classmethod
    def init(cls, n_tokens, d, m, buckets, degree_dim, seed):
        rng = np.random.default_rng(seed)
        return cls(
            E=rng.normal(0.0, 0.1, (n_tokens, d)),
            W_Q=np.eye(m) + rng.normal(0.0, 0.01, (m, m)),
            W_K=np.eye(m) + rng.normal(0.0, 0.01, (m, m)),
            # zero projection gives z = 0.5 everywhere; a random table keeps
            # the projection gradient from vanishing at the start
            degree_table=rng.normal(0.0, 0.1, (buckets, degree_dim)),
            degree_w=np.zeros(degree_dim),
            degree_b=np.zeros(1),
        )

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.tensors().items()})

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors().values())


@dataclass
class LossBreakdown:
    align: float
    uniform: float
    lam: float

    @property
    def total(self) -> float:
        return self.align + self.lam * self.uniform


def degree_bucket(degrees, buckets: int) -> np.ndarray:
    """``floor(log2(deg + 1))`` capped at ``buckets - 1``, computed exactly."""
    degrees = np.asarray(degrees, dtype=np.int64)
    if np.any(degrees < 0):
        raise ValueError("degrees must be non-negative")
    _, exp = np.frexp((degrees + 1).astype(np.float64))
    return np.minimum(exp - 1, buckets - 1).astype(np.int64)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def degree_centrality(params: ModelParams, degrees) -> np.ndarray:
    """Learned centrality ``z`` in (0, 1) for each degree."""
    bkt = degree_bucket(degrees, len(params.degree_table))
    return _sigmoid(params.degree_table[bkt] @ params.degree_w + params.degree_b[0])


def _l2_normalize(H):
    norms = np.linalg.norm(H, axis=1, keepdims=True)
    return H / norms, norms


def _uniformity(Y, need_grad):
    """``log mean_{p != q} exp(-|y_p - y_q|^2)`` and its gradient."""
    B = len(Y)
    sq = np.sum(Y * Y, axis=1)
    D = np.maximum(sq[:, None] + sq[None, :] - 2.0 * Y @ Y.T, 0.0)
    off = ~np.eye(B, dtype=bool)
    logits = np.where(off, -D, -np.inf)
    top = logits.max()
    w = np.exp(logits - top)
    total = w.sum()
    value = top + math.log(total) - math.log(B * (B - 1))
    if not need_grad:
        return value, None
    w /= total
    # dL/dD_pq = -w_pq and D is symmetric
    grad = -4.0 * (w.sum(axis=1)[:, None] * Y - w @ Y)
    return value, grad


def _directau(user_out, item_out, lam, normalize, need_grad=True):
    user_out = np.asarray(user_out, dtype=np.float64)
    item_out = np.asarray(item_out, dtype=np.float64)
    B = len(user_out)
    if B < 2 or len(item_out) != B:
        raise ValueError("directau loss needs matched batches of at least two pairs")
    if normalize:
        yu, nu = _l2_normalize(user_out)
        yi, ni = _l2_normalize(item_out)
    else:
        yu, yi = user_out, item_out
    diff = yu - yi
    align = float(np.sum(diff * diff) / B)
    uu, g_uu = _uniformity(yu, need_grad and lam != 0)
    ui, g_ui = _uniformity(yi, need_grad and lam != 0)
    loss = LossBreakdown(align, uu + ui, lam)
    if not need_grad:
        return loss, None, None
    g_yu = 2.0 * diff / B
    g_yi = -g_yu
    if lam != 0:
        g_yu = g_yu + lam * g_uu
        g_yi = g_yi + lam * g_ui
    if normalize:
        g_yu = (g_yu - yu * np.sum(g_yu * yu, axis=1, keepdims=True)) / nu
        g_yi = (g_yi - yi * np.sum(g_yi * yi, axis=1, keepdims=True)) / ni
    return loss, g_yu, g_yi


def directau_loss(user_out, item_out, lam: float = 1.0, normalize: bool = True) -> LossBreakdown:
    """Alignment of positive pairs plus ``lam`` times in-batch uniformity."""
    return _directau(user_out, item_out, lam, normalize, need_grad=False)[0]


def directau_loss_and_grad(user_out, item_out, lam: float = 1.0, normalize: bool = True):
    return _directau(user_out, item_out, lam, normalize)


@dataclass
class MGFormerModel:
    """Single-layer, single-head masked kernel attention over all tokens.

    Holds the trainable :class:`ModelParams` together with the frozen pieces:
    structural encodings, the feature map, token degree buckets and (for the
    adjacency ablation) the neighbour pairs.
    """

    params: ModelParams
    P: np.ndarray | None
    fmap: FeatureMap
    buckets: np.ndarray
    num_users: int
    mask_mode: str = "sine_degree"
    normalize: bool = True
    residual: bool = False
    pairs: np.ndarray | None = None
    summary_refresh: int = 1
    _stale: tuple | None = field(default=None, repr=False)

    @classmethod
    def build(cls, graph: InteractionGraph, encodings, cfg: RunConfig) -> "MGFormerModel":
        P = encodings.tokens if cfg.structural_encodings else None
        if P is not None and P.shape[1] != cfg.d:
            raise ValueError(f"encodings have rank {P.shape[1]}, config d is {cfg.d}")
        m = cfg.token_dim
        params = ModelParams.init(graph.num_tokens, cfg.d, m, cfg.degree_buckets, cfg.degree_dim, cfg.init_seed)
        fmap = build_feature_map(cfg.feature_map, m, cfg.simrf_seed, cfg.focus_power)
        buckets = degree_bucket(graph.token_degrees(cfg.degree_source), cfg.degree_buckets)
        pairs = adjacency_pairs(graph, TRAIN) if cfg.mask_mode == "adjacency" else None
        return cls(params, P, fmap, buckets, graph.num_users, cfg.mask_mode, cfg.normalize,
                   cfg.residual, pairs, cfg.summary_refresh)

    @property
    def num_tokens(self) -> int:
        return len(self.params.E)

    def inputs(self, params=None) -> np.ndarray:
        params = params or self.params
        return params.E if self.P is None else np.hstack([params.E, self.P])

    def centrality(self, params=None) -> np.ndarray:
        params = params or self.params
        return _sigmoid(params.degree_table[self.buckets] @ params.degree_w + params.degree_b[0])

    # -- forward / backward ---------------------------------------------------

    def _forward(self, params, rows, stale=None):
        X = self.inputs(params)
        Xr = X if rows is None else X[rows]
        Q = Xr @ params.W_Q
        K = X @ params.W_K
        phi_q, _ = self.fmap.shifted(Q, per_row=True)
        phi_k, _ = self.fmap.shifted(K, per_row=False)
        z = None
        if self.mask_mode == "adjacency":
            r = np.arange(len(X)) if rows is None else rows
            H, cache = sparse_forward(phi_q, phi_k, X, self.pairs, r)
        else:
            z = self.centrality(params)
            channels = mask_channels(self.mask_mode, z)
            H, cache = linear_forward(phi_q, phi_k, X, channels, rows, summaries=stale)
        if self.residual:
            H = H + Xr
        return H, (X, Xr, Q, K, phi_q, phi_k, z, cache)

    def transform(self, params=None) -> np.ndarray:
        """Output representations of every token (l2-normalized if enabled)."""
        H, _ = self._forward(params or self.params, None)
        return _l2_normalize(H)[0] if self.normalize else H

    def loss(self, params, users, items, lam) -> LossBreakdown:
        rows, inv = np.unique(np.concatenate([users, items + self.num_users]), return_inverse=True)
        H, _ = self._forward(params, rows)
        B = len(users)
        return directau_loss(H[inv[:B]], H[inv[B:]], lam, self.normalize)

    def loss_and_grad(self, users, items, lam, params=None, step=0):
        """Loss on a batch of positive pairs and gradients for every parameter."""
        params = params or self.params
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        rows, inv = np.unique(np.concatenate([users, items + self.num_users]), return_inverse=True)

        stale = None
        if self.summary_refresh > 1 and self.mask_mode != "adjacency":
            # approximation: between refreshes the key side is a constant
            if step % self.summary_refresh == 0 or self._stale is None:
                self._stale = None
            else:
                stale = self._stale
        H, (X, Xr, Q, K, phi_q, phi_k, z, cache) = self._forward(params, rows, stale)
        if self.summary_refresh > 1 and stale is None and self.mask_mode != "adjacency":
            self._stale = cache[6]

        B = len(users)
        loss, g_u, g_i = _directau(H[inv[:B]], H[inv[B:]], lam, self.normalize)
        gH = np.zeros_like(H)
        np.add.at(gH, inv[:B], g_u)
        np.add.at(gH, inv[B:], g_i)

        n, m = X.shape
        g_X = np.zeros_like(X)
        g_Xr = gH.copy() if self.residual else np.zeros_like(Xr)
        g_table = np.zeros_like(params.degree_table)
        g_w = np.zeros_like(params.degree_w)
        g_b = np.zeros_like(params.degree_b)

        if self.mask_mode == "adjacency":
            g_phi_q, g_phi_k, g_V = sparse_backward(cache, gH)
        else:
            g_phi_q, g_phi_k, g_V, g_channels = linear_backward(cache, gH)
            if stale is not None:
                g_phi_k = np.zeros_like(K)
                g_V = np.zeros_like(X)
            if self.mask_mode == "sine_degree":
                angle = 0.25 * np.pi * z
                s, c = np.sin(angle), np.cos(angle)
                (gq_s, gk_c), (gq_c, gk_s) = g_channels
                g_z = np.zeros(n)
                np.add.at(g_z, rows, 0.25 * np.pi * (gq_s * c[rows] - gq_c * s[rows]))
                if stale is None:
                    g_z += 0.25 * np.pi * (gk_s * c - gk_c * s)
                g_a = g_z * z * (1.0 - z)
                T = params.degree_table[self.buckets]
                g_w = T.T @ g_a
                g_b = np.array([g_a.sum()])
                np.add.at(g_table, self.buckets, np.outer(g_a, params.degree_w))

        g_Q = self.fmap.vjp(Q, phi_q, g_phi_q)
        g_K = self.fmap.vjp(K, phi_k, g_phi_k)
        g_Xr += g_Q @ params.W_Q.T
        g_X += g_V + g_K @ params.W_K.T
        np.add.at(g_X, rows, g_Xr)

        grads = ModelParams(
            E=np.ascontiguousarray(g_X[:, : params.E.shape[1]]),
            W_Q=Xr.T @ g_Q,
            W_K=X.T @ g_K,
            degree_table=g_table,
            degree_w=g_w,
            degree_b=g_b,
        )
        for name, g in grads.tensors().items():
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient for {name}")
        return loss, grads


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: ModelParams, grads: ModelParams):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * math.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for name, g in grads.tensors().items():
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p = getattr(params, name)
            p -= scale * m / (np.sqrt(v) + self.eps)


@dataclass
class TrainResult:
    model: MGFormerModel
    log: list
    best_epoch: int
    timings: list = field(default_factory=list)


def validation_recall(model: MGFormerModel, graph: InteractionGraph, k: int) -> float:
    from .evaluation import evaluate

    if not np.any(graph.split == VALID):
        return float("nan")
    H = model.transform()
    report = evaluate(H[: graph.num_users], H[graph.num_users :], graph, k=k, which=VALID)
    return report.recall


def train(graph: InteractionGraph, encodings, cfg: RunConfig, model=None, callback=None) -> TrainResult:
    """Optimize the model on the training split with Adam.

    Each step draws a batch of training edges, rebuilds the key summaries from
    all tokens, and backpropagates the loss. After every epoch the validation
    Recall@``eval_k`` drives early stopping; the best parameters are kept.
    Raises :class:`TrainingDiverged` carrying the best parameters on NaN.
    """
    model = model or MGFormerModel.build(graph, encodings, cfg)
    edges = graph.split_edges_of(TRAIN)
    if len(edges) < 2:
        raise ValueError("training split needs at least two edges")
    rng = np.random.default_rng([cfg.init_seed, 1])
    opt = Adam(cfg.lr)
    has_valid = bool(np.any(graph.split == VALID))
    best = model.params.copy()
    best_recall, best_epoch, bad_epochs = -1.0, 0, 0
    log, timings = [], []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(edges))
        sums = np.zeros(3)
        batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = edges[order[lo : lo + cfg.batch_size]]
            if len(batch) < 2:
                continue
            try:
                loss, grads = model.loss_and_grad(batch[:, 0], batch[:, 1], cfg.lam, step=step)
            except TrainingDiverged as exc:
                model.params = best
                raise TrainingDiverged(f"epoch {epoch}: {exc}", best) from exc
            if not math.isfinite(loss.total):
                model.params = best
                raise TrainingDiverged(f"epoch {epoch}: loss is {loss.total}", best)
            opt.step(model.params, grads)
            step += 1
            sums += (loss.align, loss.uniform, loss.total)
            batches += 1
        if not model.params.all_finite():
            model.params = best
            raise TrainingDiverged(f"epoch {epoch}: parameters became non-finite", best)
        align, uniform, total = sums / max(batches, 1)
        recall = validation_recall(model, graph, cfg.eval_k) if has_valid else float("nan")
        record = {
            "epoch": epoch,
            "align": float(align),
            "uniform": float(uniform),
            "loss": float(total),
            f"val_recall@{cfg.eval_k}": None if math.isnan(recall) else float(recall),
        }
        log.append(record)
        timings.append({"epoch": epoch, "wall_time": time.perf_counter() - started})
        _log.info("epoch %d loss %.5f val recall %.4f", epoch, total, recall)
        if callback is not None:
            callback(record)
        if not has_valid:
            best, best_epoch = model.params.copy(), epoch
            continue
        if recall > best_recall:
            best_recall, best_epoch, bad_epochs = recall, epoch, 0
            best = model.params.copy()
        else:
            bad_epochs += 1
            if bad_epochs > cfg.patience:
                break
    model.params = best
    return TrainResult(model, log, best_epoch, timings)


def clone_model(model: MGFormerModel) -> MGFormerModel:
    return copy.deepcopy(model)
