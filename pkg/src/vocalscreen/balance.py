"""SMOTE oversampling of a minority class in feature space."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SmoteConfig:
    target_count: int
    k_neighbors: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


@dataclass(frozen=True)
class SmoteResult:
    samples: np.ndarray
    base_index: np.ndarray
    neighbor_index: np.ndarray
    gap: np.ndarray


def nearest_neighbors(X: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest other rows of ``X`` (Euclidean, exact)."""
    sq = (X ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.fill_diagonal(d2, np.inf)
    # stable sort keeps index order among equidistant neighbours
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def smote_detailed(minority, cfg: SmoteConfig) -> SmoteResult:
    """SMOTE with the provenance of each synthetic point returned.

    Each synthetic point is ``x + u * (n - x)`` where ``x`` is a uniformly
    chosen minority row, ``n`` one of its ``k`` nearest minority neighbours and
    ``u ~ U[0, 1]``.
    """
    X = np.asarray(minority, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("minority must be a list of equal-length vectors")
    n = len(X)
    if n < 2:
        raise ValueError("SMOTE needs at least two minority samples")
    if cfg.target_count < n:
        raise ValueError(f"target_count {cfg.target_count} is below the minority count {n}")
    n_new = cfg.target_count - n
    if n_new == 0:
        empty = np.zeros(0, dtype=np.int64)
        return SmoteResult(np.zeros((0, X.shape[1])), empty, empty, np.zeros(0))

    k = min(cfg.k_neighbors, n - 1)
    nn = nearest_neighbors(X, k)
    rng = np.random.default_rng(cfg.seed)
    base = rng.integers(0, n, size=n_new)
    neigh = nn[base, rng.integers(0, k, size=n_new)]
    gap = rng.random(n_new)
    samples = X[base] + gap[:, None] * (X[neigh] - X[base])
    return SmoteResult(samples, base, neigh, gap)


def smote(minority, cfg: SmoteConfig) -> np.ndarray:
    return smote_detailed(minority, cfg).samples


def balance_classes(X: np.ndarray, y: np.ndarray, k_neighbors: int = 5, seed: int = 0):
    """Oversample every smaller class up to the size of the largest one.

    Returns ``(X, y)`` with synthetic rows appended after the originals.
    Classes with a single sample are left as they are.
    """
    X = np.asarray(X)
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    target = counts.max()
    parts_x, parts_y = [X], [y]
    for i, (c, count) in enumerate(zip(classes, counts)):
        if count == target or count < 2:
            continue
        flat = X[y == c].reshape(count, -1)
        new = smote(flat, SmoteConfig(target_count=int(target), k_neighbors=k_neighbors,
                                      seed=seed + 7919 * i))
        parts_x.append(new.reshape((-1,) + X.shape[1:]).astype(X.dtype))
        parts_y.append(np.full(len(new), c, dtype=y.dtype))
    return np.concatenate(parts_x), np.concatenate(parts_y)
