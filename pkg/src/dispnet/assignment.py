"""Near-optimal bijective matching between equal-size point sets.

Jacobi auction with epsilon scaling: every unassigned source bids for its most
profitable target, each target goes to its highest bidder, and prices rise by
the bid increment. A finished phase at increment ``eps`` is within ``n * eps``
of the optimum, so the last phase uses ``eps <= tolerance * lower_bound / n``.
"""
import logging
from typing import NamedTuple

import numpy as np

from .errors import ContractError

logger = logging.getLogger(__name__)

SCALING_FACTOR = 5.0
DEFAULT_TOLERANCE = 1e-3


class Assignment(NamedTuple):
    targets: 'np.ndarray'  # targets[i] is the target matched to source i
    cost: 'float'


def cost_matrix(source: 'np.ndarray', target: 'np.ndarray') -> 'np.ndarray':
    diff = source[:, None, :] - target[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def lower_bound(costs: 'np.ndarray') -> 'float':
    """Largest of the row-minimum and column-minimum sums; never above the optimum"""
    return float(max(costs.min(axis=1).sum(), costs.min(axis=0).sum()))


def _auction_phase(benefit: 'np.ndarray', prices: 'np.ndarray', eps: 'float') -> 'np.ndarray':
    n = benefit.shape[0]
    owner = np.full(n, -1, dtype=np.intp)
    assigned = np.full(n, -1, dtype=np.intp)
    rounds = 0
    while True:
        bidders = np.flatnonzero(assigned < 0)
        if bidders.size == 0:
            break
        rounds += 1
        values = benefit[bidders] - prices[None, :]
        top2 = np.argpartition(-values, 1, axis=1)[:, :2]
        v_a = np.take_along_axis(values, top2, axis=1)
        first = np.where(v_a[:, 0] >= v_a[:, 1], top2[:, 0], top2[:, 1])
        best = np.max(v_a, axis=1)
        second = np.min(v_a, axis=1)
        bids = prices[first] + (best - second) + eps

        # highest bid per item wins, ties to the lowest bidder id
        order = np.lexsort((bidders, -bids, first))
        items, winners_at = np.unique(first[order], return_index=True)
        winners = bidders[order][winners_at]
        previous = owner[items]
        assigned[previous[previous >= 0]] = -1
        owner[items] = winners
        assigned[winners] = items
        prices[items] = bids[order][winners_at]
    logger.debug('auction phase eps=%.3g settled in %d rounds', eps, rounds)
    return assigned


def auction(costs: 'np.ndarray', tolerance: 'float' = DEFAULT_TOLERANCE) -> 'Assignment':
    """Minimum-cost perfect matching of a square cost matrix, within ``tolerance`` of optimal"""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2 or costs.shape[0] != costs.shape[1] or costs.shape[0] == 0:
        raise ContractError(f'auction needs a nonempty square cost matrix, got {costs.shape}')
    n = costs.shape[0]
    if n == 1:
        return Assignment(np.zeros(1, dtype=np.intp), float(costs[0, 0]))

    bound = lower_bound(costs)
    positive = costs[costs > 0]
    if positive.size == 0:
        return Assignment(np.arange(n), 0.0)
    # with a zero bound, stay below the smallest nonzero cost
    reference = bound if bound > 0 else float(positive.min())
    eps_final = tolerance * reference / n
    eps = max(eps_final, float(np.ptp(costs)) / SCALING_FACTOR)

    benefit = -costs
    prices = np.zeros(n)
    while True:
        assigned = _auction_phase(benefit, prices, eps)
        if eps <= eps_final:
            break
        eps = max(eps_final, eps / SCALING_FACTOR)
    total = float(costs[np.arange(n), assigned].sum())
    return Assignment(assigned, total)


def match(source: 'np.ndarray', target: 'np.ndarray', tolerance: 'float' = DEFAULT_TOLERANCE) -> 'Assignment':
    """Bijective matching of two equal-size clouds under Euclidean cost"""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape:
        raise ContractError(f'assignment needs equal-size clouds, got {source.shape} and {target.shape}')
    return auction(cost_matrix(source, target), tolerance=tolerance)
