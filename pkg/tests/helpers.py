"""Shared test oracles, independent of the implementation paths they check."""

from __future__ import annotations

import numpy as np


def subspace_error(gram: np.ndarray, coeff: np.ndarray) -> float:
    """Total squared H1 error of projecting all fields onto span(fields @ coeff).

    Works purely from the Gram matrix: with G = S^T S, fields correspond to
    columns of S and a candidate subspace to range(S @ coeff).
    """
    lam, vec = np.linalg.eigh(gram)
    keep = lam > 1e-13 * max(lam.max(), 1.0)
    s = np.sqrt(lam[keep])[:, None] * vec[:, keep].T  # (rank, n)
    d = s @ coeff
    q, _ = np.linalg.qr(d)
    proj = q.T @ s
    return float(np.trace(gram) - np.sum(proj**2))


def random_subspace_errors(gram: np.ndarray, m: int, draws: int, seed: int) -> np.ndarray:
    """Errors of `draws` random m-dim subspaces of span(fields), vectorized."""
    n = gram.shape[0]
    lam, vec = np.linalg.eigh(gram)
    keep = lam > 1e-13 * max(lam.max(), 1.0)
    s = np.sqrt(lam[keep])[:, None] * vec[:, keep].T  # (rank, n)
    total = float(np.trace(gram))
    rng = np.random.default_rng(seed)
    if m == 1:
        g = rng.standard_normal((n, draws))
        d = s @ g
        d /= np.linalg.norm(d, axis=0, keepdims=True)
        energy = np.sum((d.T @ s) ** 2, axis=1)
    elif m == 2:
        g1 = rng.standard_normal((n, draws))
        g2 = rng.standard_normal((n, draws))
        d1 = s @ g1
        d2 = s @ g2
        q1 = d1 / np.linalg.norm(d1, axis=0, keepdims=True)
        w = d2 - q1 * np.sum(q1 * d2, axis=0, keepdims=True)
        q2 = w / np.linalg.norm(w, axis=0, keepdims=True)
        energy = np.sum((q1.T @ s) ** 2, axis=1) + np.sum((q2.T @ s) ** 2, axis=1)
    else:
        raise ValueError("vectorized sampler supports m in {1, 2}")
    return total - energy


def refined_net_minimum(gram: np.ndarray, m: int, seed: int) -> float:
    """Minimum subspace error over a progressively refined random net."""
    n = gram.shape[0]
    rng = np.random.default_rng(seed)
    best_c = rng.standard_normal((n, m))
    best = subspace_error(gram, best_c)
    for radius, rounds in ((1.0, 4000), (0.3, 4000), (0.1, 4000), (0.03, 4000)):
        for _ in range(rounds):
            cand = best_c + radius * rng.standard_normal((n, m))
            err = subspace_error(gram, cand)
            if err < best:
                best, best_c = err, cand
    return best


def smooth_random_fields(grid, count: int, seed: int) -> np.ndarray:
    """Random smooth nodal fields on a hemisphere grid (low-order polynomials)."""
    rng = np.random.default_rng(seed)
    x, y, z = grid.vertices.T
    feats = np.stack(
        [np.ones_like(x), x, y, z, x * y, y * z, x * z, x**2 - y**2, z**2, x * y * z]
    )
    return rng.standard_normal((count, feats.shape[0])) @ feats
