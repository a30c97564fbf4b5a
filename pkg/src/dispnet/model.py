"""Direct encoder-decoder completion network, its objective and its optimizer."""
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from . import autodiff as ad
from .analytics import stepanalytics
from .autodiff import Tape, Tensor
from .config import (
    ArchitectureConfig,
    FeatureExtractionSpec,
    LayerSpec,
    LossWeights,
    MaxPoolSpec,
    NeighborPoolingSpec,
    OptimizerConfig,
    UpSamplingSpec,
)
from .constants import worker_count
from .dataio import Sample
from .errors import ContractError, NumericFaultError
from .losses import (
    ASSIGNMENT,
    LabeledCloud,
    completion_term,
    matched_distances,
    nearest_correspondence,
    order_loss,
    semantic_loss,
)
from .operators import (
    DisplacementBank,
    FeatureSet,
    UpBank,
    activations,
    feature_extraction,
    latent_max_pool,
    neighbor_pooling,
    upsampling,
)

logger = logging.getLogger(__name__)

Params = Union[DisplacementBank, UpBank, None]


class Completion(NamedTuple):
    points: 'Tensor'
    class_probs: 'Optional[Tensor]' = None


class Model:
    """Layer specs paired with their parameter banks"""
    def __init__(self, config: 'ArchitectureConfig', layers: 'Sequence[Tuple[LayerSpec, Params]]'):
        self.config = config
        self.layers: 'List[Tuple[LayerSpec, Params]]' = list(layers)

    @property
    def output_channels(self) -> 'int':
        return self.config.dimension + (self.config.semantic_classes or 0)

    def parameters(self) -> 'Dict[str, Tensor]':
        """Every trainable tensor by a stable dotted name, in layer order"""
        params: 'Dict[str, Tensor]' = OrderedDict()
        for position, (spec, bank) in enumerate(self.layers):
            if isinstance(bank, DisplacementBank):
                for name, t in bank.parameters().items():
                    params[f'{position}.{spec.kind}.{name}'] = t
            elif isinstance(bank, UpBank):
                for u, sub in enumerate(bank.banks):
                    for name, t in sub.parameters().items():
                        params[f'{position}.{spec.kind}.{u}.{name}'] = t
        return params

    def assign(self, values: 'Mapping[str, Union[Tensor, np.ndarray]]') -> 'Model':
        """Replace parameters by name; missing names keep their current tensors"""
        unknown = set(values) - set(self.parameters())
        if unknown:
            raise ContractError(f'unknown parameter names: {sorted(unknown)}')
        by_bank: 'Dict[str, Dict[str, Union[Tensor, np.ndarray]]]' = {}
        for key, value in values.items():
            prefix, _, name = key.rpartition('.')
            by_bank.setdefault(prefix, {})[name] = value
        layers = []
        for position, (spec, bank) in enumerate(self.layers):
            if isinstance(bank, DisplacementBank):
                bank = bank.with_parameters(by_bank.get(f'{position}.{spec.kind}', {}))
            elif isinstance(bank, UpBank):
                subs = []
                for u, sub in enumerate(bank.banks):
                    subs.append(sub.with_parameters(by_bank.get(f'{position}.{spec.kind}.{u}', {})))
                bank = UpBank(tuple(subs))
            layers.append((spec, bank))
        self.layers = layers
        return self


def build_direct(config: 'ArchitectureConfig', seed: 'int' = 0,
                 rng: 'Optional[np.random.Generator]' = None) -> 'Model':
    """Instantiate the layers of ``config`` with freshly initialized banks"""
    rng = np.random.default_rng(seed) if rng is None else rng
    width = config.dimension + (config.semantic_classes or 0)
    last = len(config.layers) - 1
    dim = config.dimension
    layers: 'List[Tuple[LayerSpec, Params]]' = []
    for position, spec in enumerate(config.layers):
        bank: 'Params' = None
        if isinstance(spec, FeatureExtractionSpec):
            bank = DisplacementBank.initialize(rng, dim, spec.d_out, spec.s, config.alpha, config.beta, config.zero_init)
            dim = spec.d_out
        elif isinstance(spec, UpSamplingSpec):
            d_out = width if position == last else spec.d_out
            bank = UpBank(
                tuple(
                    DisplacementBank.initialize(rng, dim, d_out, spec.s, config.alpha, config.beta, config.zero_init)
                    for _ in range(spec.n_up)))
            dim = d_out
        layers.append((spec, bank))
    logger.debug('built %d layers, %d -> %d points', len(layers), config.input_points, config.output_points)
    return Model(config, layers)


def forward(model: 'Model', cloud: 'ad.TensorLike') -> 'Completion':
    """Complete ``cloud``; class probabilities come from a logistic squashing of the extra channels"""
    cloud = ad.as_tensor(cloud)
    cfg = model.config
    if cloud.shape != (cfg.input_points, cfg.dimension):
        raise ContractError(f'model expects {(cfg.input_points, cfg.dimension)} input, got {cloud.shape}')
    features = FeatureSet(cloud)
    for spec, bank in model.layers:
        if isinstance(spec, FeatureExtractionSpec):
            features = feature_extraction(features, bank, k=cfg.knn_k)
        elif isinstance(spec, NeighborPoolingSpec):
            features = neighbor_pooling(features, activations(features), spec.tau)
        elif isinstance(spec, MaxPoolSpec):
            features = latent_max_pool(features)
        else:
            features = upsampling(features, bank, k=cfg.knn_k)
    if not cfg.semantic_classes:
        return Completion(features.vectors)
    points = ad.gather(features.vectors, np.arange(cfg.dimension), axis=1)
    logits = ad.gather(features.vectors, np.arange(cfg.dimension, model.output_channels), axis=1)
    return Completion(points, ad.sigmoid(logits))


@dataclass
class Adam:
    """Adaptive-moment optimizer over named parameter arrays"""
    config: 'OptimizerConfig' = field(default_factory=OptimizerConfig)
    step_count: 'int' = 0
    first: 'Dict[str, np.ndarray]' = field(default_factory=dict)
    second: 'Dict[str, np.ndarray]' = field(default_factory=dict)

    def step(self, params: 'Mapping[str, np.ndarray]', grads: 'Mapping[str, np.ndarray]') -> 'Dict[str, np.ndarray]':
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        lr = cfg.learning_rate_at(t)
        updated = {}
        for name, value in params.items():
            g = grads[name]
            m = cfg.beta1 * self.first.get(name, np.zeros_like(g)) + (1 - cfg.beta1) * g
            v = cfg.beta2 * self.second.get(name, np.zeros_like(g)) + (1 - cfg.beta2) * g * g
            self.first[name], self.second[name] = m, v
            m_hat = m / (1 - cfg.beta1**t)
            v_hat = v / (1 - cfg.beta2**t)
            updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return updated


def _term(name: 'str', fn: 'Callable[[], Tensor]') -> 'Tensor':
    try:
        return fn()
    except NumericFaultError as e:
        raise NumericFaultError(name, f'loss term {name} is not finite ({e})') from e


def objective(model: 'Model', sample: 'Sample', weights: 'LossWeights') -> 'Tuple[Tensor, Dict[str, float]]':
    """Weighted total loss of one sample and every term before weighting"""
    out = forward(model, sample.partial)
    gt = Tensor(sample.complete)
    mode = weights.completion_mode
    l_out_gt, corr = _term('out_gt', lambda: completion_term(out.points, gt, mode))
    if corr.mode == ASSIGNMENT:
        # the bijection read backwards matches every ground-truth point to its output
        inverse = np.argsort(corr.ids)
        l_gt_out = _term('gt_out', lambda: ad.reduce_sum(matched_distances(gt, out.points, inverse)))
    else:
        l_gt_out, _ = _term('gt_out', lambda: completion_term(gt, out.points, mode))
    breakdown = {'out_gt': l_out_gt.item(), 'gt_out': l_gt_out.item()}

    total = l_out_gt * weights.out_gt + l_gt_out * weights.gt_out
    if out.points.shape[0] >= sample.partial.shape[0]:
        l_order = _term('order', lambda: order_loss(sample.partial, out.points))
        breakdown['order'] = l_order.item()
    elif weights.order > 0:
        raise ContractError('order loss needs at least as many output points as input points')
    if weights.order > 0 and 'order' in breakdown:
        total = total + l_order * weights.order
    if out.class_probs is not None and sample.labels is not None:
        n_classes = model.config.semantic_classes
        pred = LabeledCloud(out.points, out.class_probs)
        truth = LabeledCloud.from_class_ids(gt, sample.labels, n_classes)
        if corr.mode != 'nearest':
            corr = nearest_correspondence(out.points.data, gt.data)
        l_sem = _term(
            'semantic', lambda: semantic_loss(pred, truth, corr, (breakdown['out_gt'], breakdown['gt_out']),
                                              weights.semantic_gamma))
        breakdown['semantic'] = l_sem.item()
        if weights.semantic > 0:
            total = total + l_sem * weights.semantic
    breakdown['total'] = total.item()
    return total, breakdown


class StepResult(NamedTuple):
    loss: 'float'
    breakdown: 'Dict[str, float]'


def sample_gradients(model: 'Model', sample: 'Sample', weights: 'LossWeights'):
    params = model.parameters()
    with Tape():
        total, breakdown = objective(model, sample, weights)
        grads = ad.backward(total, leaves=params.values())
    return grads, breakdown


@stepanalytics()
def train_step(
    model: 'Model',
    batch: 'Sequence[Sample]',
    optimizer: 'Adam',
    weights: 'LossWeights',
    workers: 'Optional[int]' = None,
) -> 'StepResult':
    """One optimizer update from gradients summed over ``batch``

    Samples run on independent tapes in a thread pool; the caller's thread merges
    the gradients and applies the update.
    """
    if not batch:
        raise ContractError('training batch is empty')
    workers = min(len(batch), workers or worker_count())
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda s: sample_gradients(model, s, weights), batch))
    else:
        results = [sample_gradients(model, s, weights) for s in batch]

    merged = ad.accumulate_gradients(grads for grads, _ in results)
    breakdown: 'Dict[str, float]' = {}
    for _, terms in results:
        for key, value in terms.items():
            breakdown[key] = breakdown.get(key, 0.0) + value

    params = model.parameters()
    updated = optimizer.step({k: t.data for k, t in params.items()}, {k: merged[t] for k, t in params.items()})
    for name, value in updated.items():
        if not np.all(np.isfinite(value)):
            raise NumericFaultError('adam', f'parameter {name} is not finite after the update')
    model.assign(updated)
    return StepResult(breakdown['total'], breakdown)


def order_statistic(input_cloud: 'np.ndarray', output_cloud: 'np.ndarray') -> 'float':
    """Mean output index of the nearest output point to each input point"""
    corr = nearest_correspondence(np.asarray(input_cloud, dtype=np.float64), np.asarray(output_cloud, dtype=np.float64))
    return float(np.mean(corr.ids))


def complete(model: 'Model', cloud: 'np.ndarray') -> 'Tuple[np.ndarray, Optional[np.ndarray]]':
    """Evaluation-mode completion: points and, with a semantic head, class ids"""
    out = forward(model, cloud)
    labels = None if out.class_probs is None else np.argmax(out.class_probs.data, axis=1)
    return out.points.numpy(), labels
