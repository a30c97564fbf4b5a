"""Evaluation measurements: Chamfer distance, F-Score and voxel IoU.

All functions work on plain numpy arrays outside any tape. Table scale factors
are applied only when a :class:`MetricReport` is built.
"""
from dataclasses import dataclass
import enum
import json
import logging
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .constants import (
    CHAMFER_L1_SCALE,
    CHAMFER_L2_OBJECT_SCALE,
    CHAMFER_L2_SCENE_SCALE,
    FSCORE_SLACK,
    FSCORE_THRESHOLD,
    NYU_CLASSES,
)
from .errors import ContractError
from .spatial import NeighborIndex

logger = logging.getLogger(__name__)

EMPTY = -1
# extent of the normalized cube used when no bounds are given
DEFAULT_BOUNDS = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


class ChamferNorm(str, enum.Enum):
    L1 = 'l1'
    L2 = 'l2'


class ChamferScale(str, enum.Enum):
    """Reporting convention: object benchmarks scale L2 by 1e4, scene benchmarks by 1e3"""
    OBJECT = 'object'
    SCENE = 'scene'

    def factor(self, norm: 'ChamferNorm') -> 'float':
        if ChamferNorm(norm) is ChamferNorm.L1:
            return CHAMFER_L1_SCALE
        return CHAMFER_L2_OBJECT_SCALE if self is ChamferScale.OBJECT else CHAMFER_L2_SCENE_SCALE


def _points(name: 'str', cloud) -> 'np.ndarray':
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[0] == 0:
        raise ContractError(f'{name} must be a nonempty (n, D) cloud, got shape {cloud.shape}')
    return cloud


def nearest_distances(source: 'np.ndarray', target: 'np.ndarray') -> 'np.ndarray':
    _, dists = NeighborIndex(target).k_nearest_many(source, 1)
    return dists[:, 0]


def chamfer(pred, gt, norm: 'ChamferNorm' = ChamferNorm.L2) -> 'float':
    """Symmetric mean nearest-neighbor distance (L1) or squared distance (L2), unscaled"""
    pred, gt = _points('prediction', pred), _points('ground truth', gt)
    forward = nearest_distances(pred, gt)
    backward = nearest_distances(gt, pred)
    if ChamferNorm(norm) is ChamferNorm.L2:
        forward, backward = forward**2, backward**2
    return float((forward.mean() + backward.mean()) / 2.0)


def fscore(pred, gt, threshold: 'float' = FSCORE_THRESHOLD) -> 'float':
    """Harmonic mean of precision and recall at ``threshold``; the boundary counts as a hit"""
    if threshold <= 0:
        raise ContractError(f'threshold must be positive, got {threshold}')
    pred, gt = _points('prediction', pred), _points('ground truth', gt)
    limit = threshold * (1.0 + FSCORE_SLACK)
    precision = float(np.mean(nearest_distances(pred, gt) <= limit))
    recall = float(np.mean(nearest_distances(gt, pred) <= limit))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def grid_extents(x: 'int') -> 'Tuple[int, int, int]':
    if int(x) != x or x < 1:
        raise ContractError(f'voxel resolution must be an integer >= 1, got {x}')
    x = int(x)
    return x, max(1, (x * 3) // 5), x


@dataclass(frozen=True)
class VoxelGrid:
    """Class id per cell, ``EMPTY`` where no point fell"""
    cells: 'np.ndarray'
    origin: 'np.ndarray'
    cell_size: 'np.ndarray'
    outside: 'int' = 0

    @property
    def resolution(self) -> 'Tuple[int, ...]':
        return tuple(self.cells.shape)

    @property
    def occupied(self) -> 'np.ndarray':
        return self.cells != EMPTY

    def centers(self) -> 'np.ndarray':
        """World coordinates of occupied cell centers, in cell iteration order"""
        idx = np.argwhere(self.occupied)
        return self.origin + (idx + 0.5) * self.cell_size

    def center_labels(self) -> 'np.ndarray':
        return self.cells[self.occupied]


def voxelize(cloud, x: 'int', bounds=DEFAULT_BOUNDS, labels=None) -> 'VoxelGrid':
    """Occupancy grid of ``x * floor(0.6x) * x`` cells; a cell's class is the majority label of its points

    Unlabeled clouds mark occupied cells with class 0. Majority ties go to the
    lowest class id; points outside ``bounds`` are counted and skipped.
    """
    extents = np.array(grid_extents(x))
    low, high = (np.asarray(b, dtype=np.float64) for b in bounds)
    if low.shape != (3, ) or high.shape != (3, ) or np.any(high <= low):
        raise ContractError(f'degenerate voxel bounds {tuple(low)} .. {tuple(high)}')
    cell_size = (high - low) / extents
    cells = np.full(tuple(extents), EMPTY, dtype=np.int64)

    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    labels = np.zeros(cloud.shape[0], dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    if labels.shape != (cloud.shape[0], ):
        raise ContractError(f'{labels.shape[0]} labels for {cloud.shape[0]} points')
    if labels.size and labels.min() < 0:
        raise ContractError(f'class labels must be non-negative, got {int(labels.min())}')
    if cloud.shape[0] == 0:
        return VoxelGrid(cells, low, cell_size)

    inside = np.all((cloud >= low) & (cloud <= high), axis=1)
    outside = int(np.count_nonzero(~inside))
    if outside:
        logger.warning('%d points outside voxel bounds were ignored', outside)
    idx = np.floor((cloud[inside] - low) / cell_size).astype(np.int64)
    idx = np.minimum(idx, extents - 1)
    flat = np.ravel_multi_index(idx.T, tuple(extents))
    kept = labels[inside]
    if flat.size:
        n_classes = int(kept.max()) + 1
        votes = np.zeros((cells.size, n_classes), dtype=np.int64)
        np.add.at(votes, (flat, kept), 1)
        hit = np.flatnonzero(votes.sum(axis=1))
        # argmax returns the first maximum, i.e. the lowest class id
        cells.reshape(-1)[hit] = np.argmax(votes[hit], axis=1)
    return VoxelGrid(cells, low, cell_size, outside)


def iou(pred: 'VoxelGrid', gt: 'VoxelGrid',
        classes: 'Optional[Sequence[int]]' = None) -> 'Tuple[Dict[int, float], float]':
    """Per-class intersection over union and the mean over classes present in either grid"""
    if pred.resolution != gt.resolution:
        raise ContractError(f'voxel resolutions differ: {pred.resolution} and {gt.resolution}')
    if classes is None:
        present = np.union1d(np.unique(pred.cells), np.unique(gt.cells))
        classes = [int(c) for c in present if c != EMPTY]
    per_class: 'Dict[int, float]' = {}
    for c in classes:
        p, g = pred.cells == c, gt.cells == c
        union = np.count_nonzero(p | g)
        if union:
            per_class[int(c)] = np.count_nonzero(p & g) / union
    mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean


class MetricReport(BaseModel):
    """Measurements of one sample (or an aggregate), raw and at table scale"""
    sample: str = Field(description='sample identifier, or "aggregate"')
    scale: ChamferScale = Field(default=ChamferScale.OBJECT, description='Chamfer reporting convention')
    chamfer_l1: float = Field(description='raw symmetric L1 Chamfer distance')
    chamfer_l2: float = Field(description='raw symmetric L2 Chamfer distance')
    chamfer_l1_scaled: float = Field(description='L1 Chamfer at table scale')
    chamfer_l2_scaled: float = Field(description='L2 Chamfer at table scale')
    fscore_at_1pct: float = Field(ge=0.0, le=1.0, description='F-Score at threshold 0.01')
    label_accuracy: Optional[float] = Field(default=None, description='per-point label accuracy against matched ground truth')
    per_class_iou: Dict[str, float] = Field(default_factory=dict, description='IoU per present class')
    mean_iou: Optional[float] = Field(default=None, description='mean IoU over present classes')

    class Config:
        use_enum_values = True

    def lines(self) -> 'List[str]':
        """Line-oriented key=value rendering"""
        out = []
        for key, value in self.dict(exclude_none=True).items():
            if isinstance(value, Mapping):
                out.extend(f'{self.sample}.{key}.{k}={v!r}' for k, v in value.items())
            else:
                out.append(f'{self.sample}.{key}={value}')
        return out


def class_name(class_id: 'int') -> 'str':
    return NYU_CLASSES[class_id] if 0 <= class_id < len(NYU_CLASSES) else f'class{class_id}'


def evaluate(
    sample: 'str',
    pred,
    gt,
    scale: 'ChamferScale' = ChamferScale.OBJECT,
    pred_labels=None,
    gt_labels=None,
    voxel_resolution: 'Optional[int]' = None,
) -> 'MetricReport':
    """Full report for one predicted cloud against its ground truth"""
    scale = ChamferScale(scale)
    l1 = chamfer(pred, gt, ChamferNorm.L1)
    l2 = chamfer(pred, gt, ChamferNorm.L2)
    extra = {}
    if pred_labels is not None and gt_labels is not None:
        pred_labels = np.asarray(pred_labels, dtype=np.int64)
        gt_labels = np.asarray(gt_labels, dtype=np.int64)
        ids, _ = NeighborIndex(np.asarray(gt, dtype=np.float64)).k_nearest_many(np.asarray(pred, dtype=np.float64), 1)
        extra['label_accuracy'] = float(np.mean(pred_labels == gt_labels[ids[:, 0]]))
        if voxel_resolution:
            per_class, mean = iou(voxelize(pred, voxel_resolution, labels=pred_labels),
                                  voxelize(gt, voxel_resolution, labels=gt_labels))
            extra['per_class_iou'] = {class_name(c): v for c, v in per_class.items()}
            extra['mean_iou'] = mean
    return MetricReport(
        sample=sample,
        scale=scale,
        chamfer_l1=l1,
        chamfer_l2=l2,
        chamfer_l1_scaled=l1 * scale.factor(ChamferNorm.L1),
        chamfer_l2_scaled=l2 * scale.factor(ChamferNorm.L2),
        fscore_at_1pct=fscore(pred, gt),
        **extra,
    )


def aggregate_reports(reports: 'Sequence[MetricReport]') -> 'Optional[MetricReport]':
    """Mean of every field over ``reports``; per-class IoU averages over the samples where the class appears"""
    if not reports:
        return None
    fields = ('chamfer_l1', 'chamfer_l2', 'chamfer_l1_scaled', 'chamfer_l2_scaled', 'fscore_at_1pct')
    values = {f: float(np.mean([getattr(r, f) for r in reports])) for f in fields}
    accuracies = [r.label_accuracy for r in reports if r.label_accuracy is not None]
    if accuracies:
        values['label_accuracy'] = float(np.mean(accuracies))
    per_class: 'Dict[str, List[float]]' = {}
    for r in reports:
        for name, v in r.per_class_iou.items():
            per_class.setdefault(name, []).append(v)
    if per_class:
        values['per_class_iou'] = {name: float(np.mean(v)) for name, v in per_class.items()}
        values['mean_iou'] = float(np.mean([r.mean_iou for r in reports if r.mean_iou is not None]))
    return MetricReport(sample='aggregate', scale=reports[0].scale, **values)


def render_text(reports: 'Sequence[MetricReport]', aggregate: 'Optional[MetricReport]') -> 'str':
    if aggregate is None:
        return 'empty=true\n'
    lines = [line for r in reports for line in r.lines()]
    lines.extend(aggregate.lines())
    return '\n'.join(lines) + '\n'


def render_json(reports: 'Sequence[MetricReport]', aggregate: 'Optional[MetricReport]') -> 'str':
    document = {
        'empty': aggregate is None,
        'samples': [json.loads(r.json()) for r in reports],
        'aggregate': None if aggregate is None else json.loads(aggregate.json()),
    }
    return json.dumps(document, indent=2, sort_keys=True) + '\n'
