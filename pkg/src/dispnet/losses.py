"""Training objectives.

Correspondences are found outside the tape and frozen; each loss records only
the distances to its matched points, so gradients flow to both clouds through
``(p - q) / ||p - q||``.
"""
from dataclasses import dataclass
import logging
from typing import Optional, Tuple

import numpy as np

from . import autodiff as ad
from .assignment import DEFAULT_TOLERANCE, match
from .autodiff import Tensor, TensorLike
from .constants import GAMMA_NUMERATOR, LOG_CLAMP
from .errors import ContractError, NumericFaultError
from .spatial import NeighborIndex

logger = logging.getLogger(__name__)

NEAREST = 'nearest'
ASSIGNMENT = 'assignment'


@dataclass(frozen=True)
class Correspondence:
    """Matched target id and distance for every source point"""
    ids: 'np.ndarray'
    distances: 'np.ndarray'
    mode: 'str' = NEAREST


@dataclass(frozen=True)
class LabeledCloud:
    """Points with per-point class probabilities (one-hot rows for ground truth)"""
    points: 'Tensor'
    labels: 'Tensor'

    def __post_init__(self):
        if self.labels.ndim != 2 or self.labels.shape[0] != self.points.shape[0]:
            raise ContractError(f'labels {self.labels.shape} do not cover {self.points.shape[0]} points')

    @property
    def n_classes(self) -> 'int':
        return self.labels.shape[1]

    @classmethod
    def from_class_ids(cls, points: 'TensorLike', class_ids, n_classes: 'Optional[int]' = None) -> 'LabeledCloud':
        class_ids = np.asarray(class_ids, dtype=np.intp)
        if class_ids.size and class_ids.min() < 0:
            raise ContractError('class ids must be non-negative')
        if n_classes is None:
            n_classes = int(class_ids.max()) + 1 if class_ids.size else 1
        if class_ids.size and class_ids.max() >= n_classes:
            raise ContractError(f'class id {class_ids.max()} is out of range for {n_classes} classes')
        return cls(ad.as_tensor(points), Tensor(np.eye(n_classes)[class_ids]))

    def class_ids(self) -> 'np.ndarray':
        return np.argmax(self.labels.data, axis=1)


def _cloud(name: 'str', cloud: 'TensorLike') -> 'Tensor':
    cloud = ad.as_tensor(cloud)
    if cloud.ndim != 2 or cloud.shape[0] == 0:
        raise ContractError(f'{name} must be a nonempty (n, D) cloud, got shape {cloud.shape}')
    return cloud


def nearest_correspondence(source: 'np.ndarray', target: 'np.ndarray') -> 'Correspondence':
    ids, dists = NeighborIndex(target).k_nearest_many(source, 1)
    return Correspondence(ids[:, 0], dists[:, 0], NEAREST)


def matched_distances(source: 'Tensor', target: 'Tensor', ids: 'np.ndarray') -> 'Tensor':
    return ad.euclidean_norm(source - ad.gather(target, ids, axis=0))


def directed_closest_loss(source: 'TensorLike', target: 'TensorLike') -> 'Tuple[Tensor, Correspondence]':
    """Sum over source points of the distance to their closest target point"""
    source, target = _cloud('source', source), _cloud('target', target)
    if source.shape[1] != target.shape[1]:
        raise ContractError(f'cloud dimensions differ: {source.shape[1]} and {target.shape[1]}')
    corr = nearest_correspondence(source.data, target.data)
    return ad.reduce_sum(matched_distances(source, target, corr.ids)), corr


def assignment_correspondence(source: 'np.ndarray', target: 'np.ndarray',
                              tolerance: 'float' = DEFAULT_TOLERANCE) -> 'Correspondence':
    result = match(source, target, tolerance=tolerance)
    diff = source - target[result.targets]
    return Correspondence(result.targets, np.sqrt(np.sum(diff * diff, axis=-1)), ASSIGNMENT)


def assignment_loss(source: 'TensorLike', target: 'TensorLike', tolerance: 'float' = DEFAULT_TOLERANCE) -> 'Tensor':
    """Sum of distances under a near-optimal bijection between equal-size clouds"""
    source, target = _cloud('source', source), _cloud('target', target)
    if source.shape != target.shape:
        raise ContractError(f'assignment loss needs equal-size clouds, got {source.shape} and {target.shape}')
    corr = assignment_correspondence(source.data, target.data, tolerance=tolerance)
    return ad.reduce_sum(matched_distances(source, target, corr.ids))


def completion_term(source: 'TensorLike', target: 'TensorLike',
                    mode: 'str' = NEAREST) -> 'Tuple[Tensor, Correspondence]':
    """One directed completion term in the configured matching mode"""
    if mode == NEAREST:
        return directed_closest_loss(source, target)
    if mode == ASSIGNMENT:
        source, target = _cloud('source', source), _cloud('target', target)
        if source.shape != target.shape:
            raise ContractError(f'assignment loss needs equal-size clouds, got {source.shape} and {target.shape}')
        corr = assignment_correspondence(source.data, target.data)
        return ad.reduce_sum(matched_distances(source, target, corr.ids)), corr
    raise ContractError(f'unknown completion mode {mode!r}')


def order_window(input_cloud: 'np.ndarray', output_cloud: 'np.ndarray') -> 'Tuple[Correspondence, np.ndarray]':
    """Nearest output point of each input point and whether it lies within the first |input| outputs"""
    corr = nearest_correspondence(input_cloud, output_cloud)
    return corr, (corr.ids < input_cloud.shape[0]).astype(np.float64)


def order_loss(input_cloud: 'TensorLike', output_cloud: 'TensorLike') -> 'Tensor':
    """Distances from input points to their nearest output point, counted only inside the leading window

    The window factor is a constant; it carries no gradient.
    """
    input_cloud, output_cloud = _cloud('input cloud', input_cloud), _cloud('output cloud', output_cloud)
    if output_cloud.shape[0] < input_cloud.shape[0]:
        raise ContractError(f'output has {output_cloud.shape[0]} points, fewer than the {input_cloud.shape[0]} inputs')
    if output_cloud.shape[1] != input_cloud.shape[1]:
        raise ContractError(f'cloud dimensions differ: {input_cloud.shape[1]} and {output_cloud.shape[1]}')
    corr, window = order_window(input_cloud.data, output_cloud.data)
    return ad.reduce_sum(matched_distances(input_cloud, output_cloud, corr.ids) * window)


def gamma(loss_out_gt: 'float', loss_gt_out: 'float') -> 'float':
    """Adaptive semantic weight; grows as the completion losses shrink"""
    total = float(loss_out_gt) + float(loss_gt_out)
    if not np.isfinite(total) or total <= 0:
        raise NumericFaultError('gamma', f'semantic weight undefined for completion loss sum {total}')
    return GAMMA_NUMERATOR / total


def point_cross_entropy(probs: 'Tensor', targets: 'np.ndarray') -> 'Tensor':
    """Per-point binary cross-entropy averaged over classes, (n,)"""
    if not np.all((probs.data >= 0) & (probs.data <= 1)):
        raise NumericFaultError('semantic_loss', 'predicted class probabilities fall outside [0, 1]')
    p = ad.clip(probs, LOG_CLAMP, 1.0 - LOG_CLAMP)
    terms = ad.log(p) * targets + ad.log(1.0 - p) * (1.0 - targets)
    return ad.reduce_sum(terms, axis=1) * (-1.0 / probs.shape[1])


def semantic_loss(
    pred: 'LabeledCloud',
    gt: 'LabeledCloud',
    corr: 'Correspondence',
    completion_losses: 'Tuple[float, float]',
    fixed_gamma: 'Optional[float]' = None,
) -> 'Tensor':
    """Mean per-point cross-entropy against the labels of the matched ground-truth points, times gamma"""
    if corr.ids.shape != (pred.points.shape[0], ):
        raise ContractError(f'correspondence covers {corr.ids.shape[0]} points, prediction has {pred.points.shape[0]}')
    if pred.n_classes != gt.n_classes:
        raise ContractError(f'class counts differ: {pred.n_classes} predicted and {gt.n_classes} ground truth')
    weight = gamma(*completion_losses) if fixed_gamma is None else float(fixed_gamma)
    targets = gt.labels.data[corr.ids]
    per_point = point_cross_entropy(pred.labels, targets)
    return ad.reduce_sum(per_point) * (weight / pred.points.shape[0])
