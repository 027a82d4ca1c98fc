"""Masked kernelized attention over all user and item tokens.

The linear path never forms the n x n attention matrix. A mask of the form
``M_ij = sin(pi/4 (z_i + z_j))`` splits by the angle-sum identity into two
rank-one channels, ``sin(pi z_i/4) cos(pi z_j/4) + cos(pi z_i/4) sin(pi z_j/4)``,
so each channel reuses one pair of key summaries
(``sum_j w_j phi(k_j) v_j^T`` and ``sum_j w_j phi(k_j)``) for every query.
An arbitrary dense mask has no such split and would cost O(n^2); only the
sine, all-ones and sparse adjacency masks are offered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .features import FeatureMap

MASK_MODES = ("sine_degree", "all_ones", "adjacency")
DENSE_GUARD = 4096


class ZeroDenominatorError(ArithmeticError):
    """An attention row has no positive weight mass."""


@dataclass(frozen=True)
class AttentionInputs:
    X: np.ndarray
    W_Q: np.ndarray
    W_K: np.ndarray
    degree_z: np.ndarray | None = None
    mask_mode: str = "sine_degree"

    def __post_init__(self):
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.mask_mode == "sine_degree":
            z = self.degree_z
            if z is None or np.shape(z) != (len(self.X),):
                raise ValueError("sine_degree mask needs one degree_z value per token")
            if not np.all((np.asarray(z) > 0) & (np.asarray(z) < 1)):
                raise ValueError("degree_z must lie strictly inside (0, 1)")

    @property
    def n(self) -> int:
        return len(self.X)


def project_qkv(X, W_Q, W_K):
    """Queries and keys by linear projection; values are the inputs themselves."""
    X = np.asarray(X, dtype=np.float64)
    W_Q = np.asarray(W_Q, dtype=np.float64)
    W_K = np.asarray(W_K, dtype=np.float64)
    m = X.shape[1]
    if W_Q.shape != (m, m) or W_K.shape != (m, m):
        raise ValueError(f"projections must be {m}x{m}, got {W_Q.shape} and {W_K.shape}")
    return X @ W_Q, X @ W_K, X


def sine_mask_entry(z_i, z_j):
    return np.sin(0.5 * np.pi * (np.asarray(z_i) + np.asarray(z_j)) / 2.0)


def sine_mask(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return sine_mask_entry(z[:, None], z[None, :])


def mask_channels(mask_mode: str, z):
    """Query-side and key-side weights whose products sum to the mask."""
    if mask_mode == "all_ones":
        return [(None, None)]
    if mask_mode != "sine_degree":
        raise ValueError(f"{mask_mode!r} has no low-rank channel form")
    angle = 0.25 * np.pi * np.asarray(z, dtype=np.float64)
    s, c = np.sin(angle), np.cos(angle)
    return [(s, c), (c, s)]


def _scale(w, A):
    return A if w is None else w[:, None] * A


# -- linear path --------------------------------------------------------------


def key_summaries(phi_k, V, channels):
    """Per channel: ``sum_j w_j phi(k_j) v_j^T`` and ``sum_j w_j phi(k_j)``."""
    out = []
    for _, wk in channels:
        kw = _scale(wk, phi_k)
        out.append((kw.T @ V, kw.sum(axis=0)))
    return out


def linear_forward(phi_q, phi_k, V, channels, rows=None, summaries=None):
    """Low-rank masked attention from precomputed features.

    ``channels`` is a list of (query weights, key weights) over all tokens,
    ``None`` meaning all ones. ``rows`` selects the query tokens. Passing
    ``summaries`` reuses key summaries from an earlier call. Returns the
    outputs and a cache for :func:`linear_backward`.
    """
    if summaries is None:
        summaries = key_summaries(phi_k, V, channels)
    qws = []
    for wq, _ in channels:
        if wq is not None and rows is not None:
            wq = wq[rows]
        qws.append(_scale(wq, phi_q))
    num = sum(qw @ S for qw, (S, _) in zip(qws, summaries))
    den = sum(qw @ zeta for qw, (_, zeta) in zip(qws, summaries))
    _check_den(den, rows)
    H = num / den[:, None]
    return H, (phi_q, phi_k, V, channels, rows, qws, summaries, den, H)


def linear_backward(cache, gH):
    """Gradients of :func:`linear_forward` outputs.

    Returns ``(g_phi_q, g_phi_k, g_V, g_channels)`` where ``g_channels``
    holds (query-weight grad over ``rows``, key-weight grad over all tokens)
    per channel, ``None`` for all-ones channels.
    """
    phi_q, phi_k, V, channels, rows, qws, summaries, den, H = cache
    g_num = gH / den[:, None]
    g_den = -np.sum(gH * H, axis=1) / den
    g_phi_q = np.zeros_like(phi_q)
    g_phi_k = np.zeros_like(phi_k)
    g_V = np.zeros_like(V)
    g_channels = []
    for (wq, wk), qw, (S, zeta) in zip(channels, qws, summaries):
        g_qw = g_num @ S.T + np.outer(g_den, zeta)
        g_S = qw.T @ g_num
        g_zeta = qw.T @ g_den
        kw = _scale(wk, phi_k)
        g_kw = V @ g_S.T + g_zeta[None, :]
        g_V += kw @ g_S
        if wq is None:
            g_phi_q += g_qw
            g_phi_k += g_kw
            g_channels.append((None, None))
            continue
        wq_rows = wq if rows is None else wq[rows]
        g_phi_q += wq_rows[:, None] * g_qw
        g_phi_k += wk[:, None] * g_kw
        g_channels.append((np.sum(g_qw * phi_q, axis=1), np.sum(g_kw * phi_k, axis=1)))
    return g_phi_q, g_phi_k, g_V, g_channels


def _check_den(den, rows):
    bad = ~(np.isfinite(den) & (den > 0))
    if bad.any():
        pos = int(np.flatnonzero(bad)[0])
        token = pos if rows is None else int(np.asarray(rows)[pos])
        raise ZeroDenominatorError(f"attention denominator for token {token} is {den[pos]!r}")


def masked_linear_attention(
    inputs: AttentionInputs, fmap: FeatureMap, rows=None, block_size: int = 1024
) -> np.ndarray:
    """Masked kernelized attention in O(n m^2) time and O(m^2) extra memory.

    ``mask_mode='all_ones'`` is plain linearized attention; ``'sine_degree'``
    reweights by the degree mask through its two-channel factorization.
    ``rows`` restricts the output to a subset of query tokens. Tokens are
    processed in blocks of ``block_size`` to bound temporaries.
    """
    if inputs.mask_mode == "adjacency":
        raise ValueError("adjacency masks go through adjacency_masked_attention")
    X = np.asarray(inputs.X, dtype=np.float64)
    W_Q = np.asarray(inputs.W_Q, dtype=np.float64)
    W_K = np.asarray(inputs.W_K, dtype=np.float64)
    m = X.shape[1]
    if W_Q.shape != (m, m) or W_K.shape != (m, m):
        raise ValueError(f"projections must be {m}x{m}, got {W_Q.shape} and {W_K.shape}")
    channels = mask_channels(inputs.mask_mode, inputs.degree_z)
    n = len(X)
    blocks = [slice(lo, min(lo + block_size, n)) for lo in range(0, n, block_size)]

    # keys: one global shift for exponential maps, then blockwise summaries
    # accumulated in fixed block order
    if fmap.is_exponential:
        logs = [fmap.log_features(X[b] @ W_K) for b in blocks]
        shift = max(L.max() for L in logs)
        phis = (np.exp(L - shift) for L in logs)
    else:
        phis = (fmap(X[b] @ W_K) for b in blocks)
    summaries = [(np.zeros((m, m)), np.zeros(m)) for _ in channels]
    for b, phi_k in zip(blocks, phis):
        part = key_summaries(phi_k, X[b], [(None, None if wk is None else wk[b]) for _, wk in channels])
        for (S, zeta), (dS, dzeta) in zip(summaries, part):
            S += dS
            zeta += dzeta

    rows = np.arange(n) if rows is None else np.asarray(rows)
    H = np.empty((len(rows), m))
    for lo in range(0, len(rows), block_size):
        r = rows[lo : lo + block_size]
        phi_q, _ = fmap.shifted(X[r] @ W_Q, per_row=True)
        H[lo : lo + len(r)], _ = linear_forward(phi_q, None, None, channels, r, summaries)
    return H


# -- sparse adjacency path ----------------------------------------------------


def adjacency_pairs(graph, which=0, self_loops: bool = True) -> np.ndarray:
    """(query token, key token) pairs of the symmetric bipartite adjacency.

    Users are tokens ``0..M-1`` and items ``M..M+N-1``. ``which`` picks a
    split label, or ``None`` for all edges.
    """
    edges = graph.edges if which is None else graph.split_edges_of(which)
    u = edges[:, 0]
    i = edges[:, 1] + graph.num_users
    parts = [np.stack([u, i], axis=1), np.stack([i, u], axis=1)]
    if self_loops:
        t = np.arange(graph.num_tokens)
        parts.append(np.stack([t, t], axis=1))
    pairs = np.concatenate(parts).astype(np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def sparse_forward(phi_q, phi_k, V, pairs, rows):
    """Attention restricted to ``pairs``; ``phi_q`` is indexed like ``rows``."""
    rows = np.asarray(rows)
    lookup = np.full(len(phi_k), -1, dtype=np.int64)
    lookup[rows] = np.arange(len(rows))
    local = lookup[pairs[:, 0]]
    keep = local >= 0
    qi, kj = local[keep], pairs[keep, 1]
    scores = np.einsum("ij,ij->i", phi_q[qi], phi_k[kj])
    S = sp.csr_matrix((scores, (qi, kj)), shape=(len(rows), len(phi_k)))
    den = np.asarray(S.sum(axis=1)).ravel()
    _check_den(den, rows)
    H = (S @ V) / den[:, None]
    return H, (phi_q, phi_k, V, qi, kj, scores, den, H)


def sparse_backward(cache, gH):
    phi_q, phi_k, V, qi, kj, scores, den, H = cache
    shape = (len(phi_q), len(phi_k))
    g_scores = (np.einsum("ij,ij->i", gH[qi], V[kj]) - np.einsum("ij,ij->i", gH[qi], H[qi])) / den[qi]
    G = sp.csr_matrix((g_scores, (qi, kj)), shape=shape)
    A = sp.csr_matrix((scores / den[qi], (qi, kj)), shape=shape)
    return G @ phi_k, G.T @ phi_q, A.T @ gH


def adjacency_masked_attention(
    inputs: AttentionInputs, fmap: FeatureMap, graph, rows=None, self_loops: bool = True, which=0
) -> np.ndarray:
    """Attention masked by the bipartite adjacency (plus self-loops).

    Cost is O(|edges| m): only linked token pairs are scored. Without
    self-loops an isolated token raises :class:`ZeroDenominatorError`.
    """
    Q, K, V = project_qkv(inputs.X, inputs.W_Q, inputs.W_K)
    rows = np.arange(len(V)) if rows is None else np.asarray(rows)
    phi_q, _ = fmap.shifted(Q[rows], per_row=True)
    phi_k, _ = fmap.shifted(K, per_row=False)
    pairs = adjacency_pairs(graph, which, self_loops)
    H, _ = sparse_forward(phi_q, phi_k, V, pairs, rows)
    return H


# -- quadratic oracle ---------------------------------------------------------


def dense_oracle(
    inputs: AttentionInputs, fmap: FeatureMap, use_softmax: bool = False, mask=None
) -> np.ndarray:
    """Materialize the full n x n masked attention matrix.

    The kernel is ``phi(q_i).phi(k_j)`` or, with ``use_softmax``, the exact
    ``exp(q_i.k_j / sqrt(m))``. ``mask`` overrides the mask implied by
    ``inputs.mask_mode`` (required for adjacency). Test and benchmark use only.
    """
    n = inputs.n
    if n > DENSE_GUARD:
        raise ValueError(f"dense oracle limited to n <= {DENSE_GUARD}, got {n}")
    Q, K, V = project_qkv(inputs.X, inputs.W_Q, inputs.W_K)
    if mask is None:
        if inputs.mask_mode == "sine_degree":
            mask = sine_mask(inputs.degree_z)
        elif inputs.mask_mode == "all_ones":
            mask = np.ones((n, n))
        else:
            raise ValueError("adjacency oracle needs an explicit mask")
    mask = np.asarray(mask.toarray() if sp.issparse(mask) else mask, dtype=np.float64)
    if use_softmax:
        logits = Q @ K.T / np.sqrt(Q.shape[1])
        sim = np.exp(logits - logits.max(axis=1, keepdims=True))
    else:
        sim = fmap(Q) @ fmap(K).T
    weights = mask * sim
    den = weights.sum(axis=1)
    _check_den(den, None)
    return (weights @ V) / den[:, None]
