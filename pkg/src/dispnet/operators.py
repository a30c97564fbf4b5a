"""Displacement feature extraction, activation-ranked neighbor pooling, latent
max-pooling and up-sampling over feature sets.

For an anchor ``f`` and displacement ``delta`` the closest-feature distance is
``d(f, delta) = min ||(f + delta) - f~||`` over the anchor's candidate
neighbors. A bank channel aggregates ``sum_i sigma_i * tanh(alpha / (d_i + beta))``
and adds the projection ``rho_b . f``.

The argmin is resolved outside the tape and frozen; only the distance to the
selected neighbor is recorded, so gradients reach the anchor, the displacement
and the selected neighbor through ``(f + delta - f~*) / d``.
"""
from dataclasses import dataclass, field
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .constants import ALPHA, BETA, DELTA_INIT_RANGE, KNN_K, SIGMA_INIT_RANGE
from .errors import ContractError
from .spatial import NeighborIndex

logger = logging.getLogger(__name__)

# bound on the number of candidate differences materialized per block
SELECT_BLOCK = 1 << 22


@dataclass(frozen=True)
class FeatureSet:
    """``count x dim`` feature vectors, with the g values of the producing extraction when known"""
    vectors: 'Tensor'
    g: 'Optional[np.ndarray]' = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ContractError(f'feature set needs shape (count >= 1, dim), got {self.vectors.shape}')

    @classmethod
    def from_points(cls, points, requires_grad: 'bool' = False) -> 'FeatureSet':
        return cls(Tensor(points, requires_grad=requires_grad))

    @property
    def count(self) -> 'int':
        return self.vectors.shape[0]

    @property
    def dim(self) -> 'int':
        return self.vectors.shape[1]

    @property
    def data(self) -> 'np.ndarray':
        return self.vectors.data


@dataclass(frozen=True)
class DisplacementBank:
    """Per-output-channel displacements, weights and projections of one extraction"""
    deltas: 'Tensor'  # (d_out, s, d_in)
    sigmas: 'Tensor'  # (d_out, s)
    rhos: 'Tensor'  # (d_out, d_in)
    alpha: 'float' = ALPHA
    beta: 'float' = BETA

    def __post_init__(self):
        if self.beta <= 0:
            raise ContractError(f'beta must be positive, got {self.beta}')
        if self.deltas.ndim != 3:
            raise ContractError(f'deltas must be (d_out, s, d_in), got {self.deltas.shape}')
        d_out, s, d_in = self.deltas.shape
        if self.sigmas.shape != (d_out, s) or self.rhos.shape != (d_out, d_in):
            raise ContractError(
                f'bank parameter shapes disagree: deltas {self.deltas.shape}, '
                f'sigmas {self.sigmas.shape}, rhos {self.rhos.shape}'
            )

    @property
    def d_out(self) -> 'int':
        return self.deltas.shape[0]

    @property
    def s(self) -> 'int':
        return self.deltas.shape[1]

    @property
    def d_in(self) -> 'int':
        return self.deltas.shape[2]

    @classmethod
    def initialize(
        cls,
        rng: 'np.random.Generator',
        d_in: 'int',
        d_out: 'int',
        s: 'int',
        alpha: 'float' = ALPHA,
        beta: 'float' = BETA,
        zero: 'bool' = False,
    ) -> 'DisplacementBank':
        """Local displacements, small weights, variance-1/d_in projections; ``zero`` zeroes sigma and rho"""
        deltas = rng.uniform(-DELTA_INIT_RANGE, DELTA_INIT_RANGE, size=(d_out, s, d_in))
        sigmas = rng.uniform(-SIGMA_INIT_RANGE, SIGMA_INIT_RANGE, size=(d_out, s))
        rhos = rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_out, d_in))
        if zero:
            sigmas = np.zeros_like(sigmas)
            rhos = np.zeros_like(rhos)
        return cls(
            Tensor(deltas, requires_grad=True),
            Tensor(sigmas, requires_grad=True),
            Tensor(rhos, requires_grad=True),
            alpha=alpha,
            beta=beta,
        )

    def parameters(self) -> 'Dict[str, Tensor]':
        return {'deltas': self.deltas, 'sigmas': self.sigmas, 'rhos': self.rhos}

    def with_parameters(self, params: 'Mapping[str, Union[Tensor, np.ndarray]]') -> 'DisplacementBank':
        def pick(name):
            value = params.get(name, getattr(self, name))
            return value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)

        return DisplacementBank(pick('deltas'), pick('sigmas'), pick('rhos'), alpha=self.alpha, beta=self.beta)


@dataclass(frozen=True)
class UpBank:
    """``n_up`` independent banks, one per replicated block"""
    banks: 'Tuple[DisplacementBank, ...]'

    def __post_init__(self):
        if len(self.banks) < 1:
            raise ContractError('up-sampling needs at least one bank')
        first = self.banks[0]
        for bank in self.banks[1:]:
            if (bank.d_in, bank.d_out) != (first.d_in, first.d_out):
                raise ContractError('all up-sampling banks must share d_in and d_out')

    @property
    def n_up(self) -> 'int':
        return len(self.banks)

    @property
    def d_in(self) -> 'int':
        return self.banks[0].d_in

    @property
    def d_out(self) -> 'int':
        return self.banks[0].d_out


def candidate_ids(points: 'np.ndarray', index: 'Optional[NeighborIndex]', k: 'Optional[int]') -> 'np.ndarray':
    """Candidate neighbor ids of every anchor, ascending by id; ``k=None`` means all points"""
    n = points.shape[0]
    if k is None or k >= n:
        return np.broadcast_to(np.arange(n), (n, n))
    if index is None:
        index = NeighborIndex.build(points)
    ids, _ = index.k_nearest_many(points, k)
    return np.sort(ids, axis=1)


def select_closest(points: 'np.ndarray', deltas: 'np.ndarray', cand: 'np.ndarray') -> 'np.ndarray':
    """Id of the candidate closest to ``points[a] + deltas[b, i]`` for every (a, b, i)

    ``cand`` rows must be ascending so ties resolve to the lowest id.
    """
    n, dim = points.shape
    d_out, s, _ = deltas.shape
    k = cand.shape[1]
    rows = max(1, SELECT_BLOCK // (d_out * s * k * dim))
    selected = np.empty((n, d_out, s), dtype=np.intp)
    for start in range(0, n, rows):
        stop = min(n, start + rows)
        queries = points[start:stop, None, None, :] + deltas[None]
        neighbors = points[cand[start:stop]]
        diff = queries[:, :, :, None, :] - neighbors[:, None, None, :, :]
        dist = np.sqrt(np.sum(diff * diff, axis=-1))
        best = np.argmin(dist, axis=-1)
        selected[start:stop] = cand[start:stop][np.arange(stop - start)[:, None, None], best]
    return selected


def displacement_distances(
    fin: 'FeatureSet',
    deltas: 'Tensor',
    index: 'Optional[NeighborIndex]' = None,
    k: 'Optional[int]' = KNN_K,
) -> 'Tuple[Tensor, np.ndarray]':
    """Closest-feature distances ``(count, d_out, s)`` and the frozen selected ids"""
    if deltas.ndim != 3 or deltas.shape[2] != fin.dim:
        raise ContractError(f'displacements {deltas.shape} do not match feature dimension {fin.dim}')
    n, dim = fin.count, fin.dim
    d_out, s, _ = deltas.shape
    selected = select_closest(fin.data, deltas.data, candidate_ids(fin.data, index, k))
    queries = ad.reshape(fin.vectors, (n, 1, 1, dim)) + ad.reshape(deltas, (1, d_out, s, dim))
    chosen = ad.gather(fin.vectors, selected, axis=0)
    return ad.euclidean_norm(queries - chosen), selected


def closest_distance(
    anchor: 'ad.TensorLike',
    delta: 'ad.TensorLike',
    candidates: 'FeatureSet',
    index: 'Optional[NeighborIndex]' = None,
    k: 'Optional[int]' = KNN_K,
) -> 'Tuple[Tensor, int]':
    """Distance from ``anchor + delta`` to the closest candidate, and that candidate's id"""
    anchor, delta = ad.as_tensor(anchor), ad.as_tensor(delta)
    if anchor.shape != (candidates.dim, ) or delta.shape != (candidates.dim, ):
        raise ContractError(
            f'anchor {anchor.shape} and displacement {delta.shape} must match candidate dimension {candidates.dim}'
        )
    if k is None or k >= candidates.count:
        ids = np.arange(candidates.count)
    else:
        if index is None:
            index = NeighborIndex.build(candidates.data)
        ids = np.sort([nb.id for nb in index.k_nearest(anchor.data, k)])
    query = anchor.data + delta.data
    diff = query[None, :] - candidates.data[ids]
    selected = int(ids[np.argmin(np.sqrt(np.sum(diff * diff, axis=-1)))])
    distance = ad.euclidean_norm(anchor + delta - ad.gather(candidates.vectors, selected, axis=0))
    return distance, selected


def g_aggregate(
    anchor: 'ad.TensorLike',
    deltas: 'ad.TensorLike',
    sigmas: 'ad.TensorLike',
    candidates: 'FeatureSet',
    alpha: 'float' = ALPHA,
    beta: 'float' = BETA,
    index: 'Optional[NeighborIndex]' = None,
    k: 'Optional[int]' = KNN_K,
) -> 'Tensor':
    """One channel's displacement response for one anchor"""
    if beta <= 0:
        raise ContractError(f'beta must be positive, got {beta}')
    deltas, sigmas = ad.as_tensor(deltas), ad.as_tensor(sigmas)
    if deltas.ndim != 2 or sigmas.shape != (deltas.shape[0], ) or deltas.shape[0] < 1:
        raise ContractError(f'channel needs deltas (s, D) and sigmas (s,), got {deltas.shape} and {sigmas.shape}')
    total = None
    for i in range(deltas.shape[0]):
        d, _ = closest_distance(anchor, ad.gather(deltas, i, axis=0), candidates, index=index, k=k)
        term = ad.gather(sigmas, i, axis=0) * ad.tanh(ad.reciprocal(d + beta) * alpha)
        total = term if total is None else total + term
    return total


def g_values(
    fin: 'FeatureSet',
    bank: 'DisplacementBank',
    index: 'Optional[NeighborIndex]' = None,
    k: 'Optional[int]' = KNN_K,
) -> 'Tensor':
    """``g_b(f_a)`` for every anchor and channel, ``(count, d_out)``"""
    d, _ = displacement_distances(fin, bank.deltas, index=index, k=k)
    response = ad.tanh(ad.reciprocal(d + bank.beta) * bank.alpha)
    return ad.reduce_sum(response * bank.sigmas, axis=-1)


def feature_extraction(
    fin: 'FeatureSet',
    bank: 'DisplacementBank',
    k: 'Optional[int]' = KNN_K,
    index: 'Optional[NeighborIndex]' = None,
) -> 'FeatureSet':
    """Entry (a, b) = g_b(f_a) + rho_b . f_a; count is preserved"""
    if fin.dim != bank.d_in:
        raise ContractError(f'feature dimension {fin.dim} does not match bank input dimension {bank.d_in}')
    if index is None and k is not None and k < fin.count:
        index = NeighborIndex.build(fin.data)
    g = g_values(fin, bank, index=index, k=k)
    h = ad.matvec(bank.rhos, fin.vectors)
    return FeatureSet(g + h, g=g.data)


def activation(g_row: 'Sequence[float]') -> 'float':
    """Sum of tanh |g| over a row; never negative"""
    return float(np.sum(np.tanh(np.abs(np.asarray(g_row, dtype=np.float64)))))


def activations(fout: 'FeatureSet') -> 'np.ndarray':
    """Per-row activations from the g values cached by the producing extraction"""
    if fout.g is None:
        raise ContractError('feature set carries no cached g values; activations need a feature extraction output')
    return np.sum(np.tanh(np.abs(fout.g)), axis=1)


def pooling_selection(acts: 'np.ndarray', tau: 'int') -> 'np.ndarray':
    """Row ids kept by neighbor pooling, in original relative order"""
    acts = np.asarray(acts, dtype=np.float64)
    if int(tau) != tau or tau < 1:
        raise ContractError(f'tau must be an integer >= 1, got {tau}')
    n = acts.shape[0]
    if n < tau:
        raise ContractError(f'cannot pool {n} vectors with tau={tau}')
    keep = max(1, n // int(tau))
    order = np.lexsort((np.arange(n), -acts))
    return np.sort(order[:keep])


def neighbor_pooling(fout: 'FeatureSet', acts: 'np.ndarray', tau: 'int') -> 'FeatureSet':
    """Keep the 1/tau rows with the highest activations, descriptors unmodified"""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.shape != (fout.count, ):
        raise ContractError(f'{acts.shape[0]} activations for {fout.count} feature vectors')
    kept = pooling_selection(acts, tau)
    g = None if fout.g is None else fout.g[kept]
    return FeatureSet(ad.gather(fout.vectors, kept, axis=0), g=g)


def latent_max_pool(fin: 'FeatureSet') -> 'FeatureSet':
    """Column-wise maximum as a single vector; gradient goes to the lowest-id argmax row"""
    _, neg_max = ad.select_min_index(ad.neg(fin.vectors), axis=0)
    return FeatureSet(ad.reshape(ad.neg(neg_max), (1, fin.dim)))


def upsampling(
    fin: 'FeatureSet',
    up: 'UpBank',
    k: 'Optional[int]' = KNN_K,
    index: 'Optional[NeighborIndex]' = None,
) -> 'FeatureSet':
    """Block u of the output is ``feature_extraction(fin, up.banks[u])``; count grows by n_up"""
    if fin.dim != up.d_in:
        raise ContractError(f'feature dimension {fin.dim} does not match up-sampling input dimension {up.d_in}')
    if index is None and k is not None and k < fin.count:
        index = NeighborIndex.build(fin.data)
    blocks: 'List[FeatureSet]' = [feature_extraction(fin, bank, k=k, index=index) for bank in up.banks]
    if len(blocks) == 1:
        return blocks[0]
    vectors = ad.concat([b.vectors for b in blocks], axis=0)
    return FeatureSet(vectors, g=np.concatenate([b.g for b in blocks], axis=0))
