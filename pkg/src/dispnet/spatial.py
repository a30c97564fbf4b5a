"""Exact k-nearest-neighbor queries over feature sets.

Low-dimensional sets (D <= 8) are indexed with ``scipy.spatial.cKDTree``;
higher dimensions use an exhaustive scan. Both strategies measure distance with
the same numpy expression and order neighbors by (distance, point id), so
results are identical to brute force, including ties.
"""
import logging
from typing import List, NamedTuple, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ContractError

logger = logging.getLogger(__name__)

TREE_MAX_DIMENSION = 8
# relative gap under which the k-th and (k+1)-th neighbors count as tied
TIE_TOLERANCE = 1e-9
# bound on the number of pairwise distances materialized at once
SCAN_BLOCK = 1 << 21


class Neighbor(NamedTuple):
    id: int
    distance: float


def _distances(points: 'np.ndarray', queries: 'np.ndarray') -> 'np.ndarray':
    """Euclidean distances between each query row and each point row, (q, n)"""
    diff = queries[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def exhaustive_k_nearest(points: 'np.ndarray', queries: 'np.ndarray', k: 'int') -> 'Tuple[np.ndarray, np.ndarray]':
    """Brute-force k nearest neighbors, ties broken by lower point id"""
    points = np.asarray(points, dtype=np.float64)
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    rows = max(1, SCAN_BLOCK // max(1, points.shape[0] * points.shape[1]))
    ids = np.empty((queries.shape[0], k), dtype=np.intp)
    dists = np.empty((queries.shape[0], k), dtype=np.float64)
    for start in range(0, queries.shape[0], rows):
        block = _distances(points, queries[start:start + rows])
        order = np.argsort(block, axis=1, kind='stable')[:, :k]
        ids[start:start + rows] = order
        dists[start:start + rows] = np.take_along_axis(block, order, axis=1)
    return ids, dists


class NeighborIndex:
    """Read-only nearest-neighbor index over an immutable snapshot of a feature set"""
    def __init__(self, points: 'np.ndarray'):
        points = np.array(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[0] == 0 or points.shape[1] == 0:
            raise ContractError(f'neighbor index needs a nonempty (n, D) point set, got shape {points.shape}')
        points.setflags(write=False)
        self.points = points
        self.count, self.dimension = points.shape
        if self.dimension <= TREE_MAX_DIMENSION:
            self.strategy = 'tree'
            self._tree = cKDTree(points)
        else:
            self.strategy = 'flat'
            self._tree = None

    @classmethod
    def build(cls, points: 'np.ndarray') -> 'NeighborIndex':
        return cls(points)

    def _check(self, queries: 'np.ndarray', k: 'int'):
        if queries.ndim != 2 or queries.shape[1] != self.dimension:
            raise ContractError(f'query dimension {queries.shape[-1]} does not match index dimension {self.dimension}')
        if not 1 <= k <= self.count:
            raise ContractError(f'k={k} must lie in [1, {self.count}]')

    def k_nearest_many(self, queries: 'np.ndarray', k: 'int') -> 'Tuple[np.ndarray, np.ndarray]':
        """Ids and distances of the ``k`` nearest points for every query row, ascending"""
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        self._check(queries, k)
        if self.strategy == 'flat' or k == self.count:
            return exhaustive_k_nearest(self.points, queries, k)

        fetch = min(k + 1, self.count)
        _, cand = self._tree.query(queries, k=fetch)
        cand = cand.reshape(queries.shape[0], fetch)
        diff = queries[:, None, :] - self.points[cand]
        cand_dist = np.sqrt(np.sum(diff * diff, axis=-1))
        # order each row by (distance, id)
        order = np.lexsort((cand, cand_dist), axis=1)
        cand = np.take_along_axis(cand, order, axis=1)
        cand_dist = np.take_along_axis(cand_dist, order, axis=1)

        ids = cand[:, :k].copy()
        dists = cand_dist[:, :k].copy()
        if fetch > k:
            kth, nxt = cand_dist[:, k - 1], cand_dist[:, k]
            tied = np.flatnonzero(nxt - kth <= TIE_TOLERANCE * np.maximum(kth, 1e-300))
            if tied.size:
                logger.debug('resolving %d boundary ties by exhaustive scan', tied.size)
                ids[tied], dists[tied] = exhaustive_k_nearest(self.points, queries[tied], k)
        return ids, dists

    def k_nearest(self, query: 'np.ndarray', k: 'int') -> 'List[Neighbor]':
        """The ``k`` nearest points to ``query`` as (point id, distance), ascending by distance"""
        ids, dists = self.k_nearest_many(np.asarray(query, dtype=np.float64)[None, :], k)
        return [Neighbor(int(i), float(d)) for i, d in zip(ids[0], dists[0])]


def build(points: 'np.ndarray') -> 'NeighborIndex':
    return NeighborIndex.build(points)
