"""Equivalence and timing of the linear attention path against the dense oracle."""

from __future__ import annotations

import time

import numpy as np

from .attention import AttentionInputs, dense_oracle, masked_linear_attention
from .features import build_simrf_map


def random_instance(n: int, m: int, rng, mask_mode="sine_degree", scale=0.5):
    """Random attention inputs with near-identity projections and z in (0.02, 0.98)."""
    X = rng.normal(0.0, scale, (n, m))
    W_Q = np.eye(m) + rng.normal(0.0, 0.1, (m, m))
    W_K = np.eye(m) + rng.normal(0.0, 0.1, (m, m))
    z = rng.uniform(0.02, 0.98, n)
    return AttentionInputs(X, W_Q, W_K, z, mask_mode)


def max_relative_error(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    return float(np.max(np.abs(a - b) / np.abs(b)))


def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def loglog_slope(sizes, times) -> float:
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def time_linear(sizes, m=16, seed=0, repeats=5):
    rng = np.random.default_rng(seed)
    fmap = build_simrf_map(m, seed)
    out = []
    for n in sizes:
        inputs = random_instance(n, m, rng)
        out.append(_best_time(lambda: masked_linear_attention(inputs, fmap), repeats))
    return out


def time_dense(sizes, m=16, seed=0, repeats=3):
    rng = np.random.default_rng(seed)
    fmap = build_simrf_map(m, seed)
    out = []
    for n in sizes:
        inputs = random_instance(n, m, rng)
        out.append(_best_time(lambda: dense_oracle(inputs, fmap), repeats))
    return out


def bench_oracle(
    sizes=(256, 512, 1024),
    m=16,
    seed=0,
    slope_sizes=tuple(2**p for p in range(10, 16)),
    dense_slope_sizes=tuple(2**p for p in range(8, 13)),
    corrupt_mask=False,
    repeats=5,
) -> dict:
    """Compare linear and dense outputs and fit log-log timing slopes.

    ``corrupt_mask`` perturbs the oracle's mask so the equivalence check
    must fail; it exists to exercise the failure path.
    """
    rng = np.random.default_rng(seed)
    fmap = build_simrf_map(m, seed)
    rows = []
    for n in sizes:
        inputs = random_instance(n, m, rng)
        mask = None
        if corrupt_mask:
            mask = np.sin(0.25 * np.pi * (inputs.degree_z[:, None] + inputs.degree_z[None, :]))
            mask[0, 1:] *= 2.0
        t0 = time.perf_counter()
        fast = masked_linear_attention(inputs, fmap)
        t_lin = time.perf_counter() - t0
        t0 = time.perf_counter()
        slow = dense_oracle(inputs, fmap, mask=mask)
        t_dense = time.perf_counter() - t0
        rows.append({"n": n, "max_rel_error": max_relative_error(fast, slow),
                     "linear_seconds": t_lin, "dense_seconds": t_dense})
    report = {"m": m, "seed": seed, "equivalence": rows,
              "max_rel_error": max(r["max_rel_error"] for r in rows)}
    if slope_sizes:
        times = time_linear(slope_sizes, m, seed, repeats)
        report["linear_timing"] = {"sizes": list(slope_sizes), "seconds": times,
                                   "slope": loglog_slope(slope_sizes, times)}
    if dense_slope_sizes:
        times = time_dense(dense_slope_sizes, m, seed, max(1, repeats // 2))
        report["dense_timing"] = {"sizes": list(dense_slope_sizes), "seconds": times,
                                  "slope": loglog_slope(dense_slope_sizes, times)}
    return report
