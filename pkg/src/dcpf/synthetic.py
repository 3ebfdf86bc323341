"""Draw count matrices from the compound Poisson generative process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dcpf.element_dist import ElementDistribution, sample_compound
from dcpf.sparse_data import SparseCountMatrix


@dataclass
class SyntheticData:
    data: SparseCountMatrix
    W: np.ndarray
    H: np.ndarray
    sessions: SparseCountMatrix  # the latent n_ui on the same support
    dist: ElementDistribution | None


def simulate_counts(W, H, dist, rng, block_rows: int = 512):
    """Sample Y given factors: n ~ Poisson(W H^T), y = sum of n elements.

    ``dist=None`` returns the Poisson draws themselves. Rows are processed in
    blocks so the dense rate matrix is never materialised in full.
    """
    U, I = W.shape[0], H.shape[0]
    rows, cols, ns = [], [], []
    for start in range(0, U, block_rows):
        rate = W[start:start + block_rows] @ H.T
        n = rng.poisson(rate)
        r, c = np.nonzero(n)
        rows.append(r + start)
        cols.append(c)
        ns.append(n[r, c])
    rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    ns = np.concatenate(ns) if ns else np.zeros(0, np.int64)
    ys = ns if dist is None else sample_compound(dist, ns, rng)
    return SparseCountMatrix(U, I, rows, cols, ys), SparseCountMatrix(U, I, rows, cols, ns)


def sample_dataset(
    n_users: int,
    n_items: int,
    K: int,
    dist: ElementDistribution | None,
    rng,
    shape: float = 0.3,
    rate: float = 1.0,
) -> SyntheticData:
    """Gamma(shape, rate) factors for users and items, then compound counts."""
    W = rng.gamma(shape, 1.0 / rate, size=(n_users, K))
    H = rng.gamma(shape, 1.0 / rate, size=(n_items, K))
    data, sessions = simulate_counts(W, H, dist, rng)
    return SyntheticData(data, W, H, sessions, dist)
