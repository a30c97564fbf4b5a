import json
import logging
import math
from typing import List, Optional, Tuple, Union

from pydantic import BaseModel, Field, ValidationError, root_validator, validator
from typing_extensions import Annotated, Literal

from .constants import ALPHA, BETA, KNN_K
from .errors import ConfigError, DataIOError
from .metrics import ChamferScale

logger = logging.getLogger(__name__)


class _Strict(BaseModel):
    class Config:
        extra = 'forbid'
        allow_population_by_field_name = True
        validate_assignment = True


class FeatureExtractionSpec(_Strict):
    kind: Literal['feature_extraction'] = 'feature_extraction'
    s: int = Field(gt=0, description='displacements per output channel')
    d_out: int = Field(gt=0, alias='D_out', description='output feature dimension')


class NeighborPoolingSpec(_Strict):
    kind: Literal['neighbor_pooling'] = 'neighbor_pooling'
    tau: int = Field(gt=0, description='keep one in every tau feature vectors')


class MaxPoolSpec(_Strict):
    kind: Literal['max_pool'] = 'max_pool'


class UpSamplingSpec(_Strict):
    kind: Literal['upsampling'] = 'upsampling'
    s: int = Field(gt=0, description='displacements per output channel')
    n_up: int = Field(gt=0, alias='N_up', description='replication factor')
    d_out: int = Field(gt=0, alias='D_out', description='output feature dimension')


LayerSpec = Annotated[Union[FeatureExtractionSpec, NeighborPoolingSpec, MaxPoolSpec, UpSamplingSpec],
                      Field(discriminator='kind')]


class ArchitectureConfig(_Strict):
    """Ordered encoder/decoder layers and operator constants of a direct completion network

    Notes::

    The encoder alternates feature extraction and neighbor pooling, a single
    max-pool collapses the set to one latent vector, and the decoder is made of
    up-sampling layers only. The output count is the product of the decoder's
    replication factors. The last layer must emit ``dimension`` channels; a
    semantic head widens it to ``dimension + semantic_classes`` ::

        >>> desk_architecture().output_points
        1024
    """
    input_points: int = Field(gt=0, description='points per input cloud')
    dimension: int = Field(default=3, gt=0, description='coordinate dimension')
    layers: List[LayerSpec] = Field(description='ordered layer descriptors')
    knn_k: Optional[int] = Field(default=KNN_K, gt=0, description='candidate neighbors per anchor, null for exact')
    alpha: float = Field(default=ALPHA, description='response scale')
    beta: float = Field(default=BETA, gt=0.0, description='distance offset, strictly positive')
    semantic_classes: Optional[int] = Field(default=None, gt=0, alias='semantic_head', description='N_c')
    zero_init: bool = Field(default=False, description='initialize sigma and rho to zero')

    @root_validator(skip_on_failure=True)
    def check_layer_sequence(cls, values):
        layers = values['layers']
        count, dim = values['input_points'], values['dimension']
        seen_features, pooled = False, False
        for position, layer in enumerate(layers):
            where = f'layer {position} ({layer.kind})'
            if isinstance(layer, FeatureExtractionSpec):
                if pooled:
                    raise ConfigError('feature extraction after the max-pool; the decoder takes up-sampling only', where)
                seen_features, dim = True, layer.d_out
            elif isinstance(layer, NeighborPoolingSpec):
                if not seen_features:
                    raise ConfigError('neighbor pooling before any feature extraction', where)
                if pooled:
                    raise ConfigError('neighbor pooling after the max-pool', where)
                if count < layer.tau:
                    raise ConfigError(f'cannot pool {count} vectors with tau={layer.tau}', where)
                if count % layer.tau:
                    logger.warning('%s: %d vectors are not divisible by tau=%d, keeping floor(%d/%d)', where, count,
                                   layer.tau, count, layer.tau)
                count //= layer.tau
            elif isinstance(layer, MaxPoolSpec):
                if pooled:
                    raise ConfigError('more than one max-pool', where)
                pooled, count = True, 1
            else:
                if not pooled:
                    raise ConfigError('up-sampling before the max-pool', where)
                count, dim = count * layer.n_up, layer.d_out
        if not pooled:
            raise ConfigError('architecture needs a max-pool between encoder and decoder', f'{len(layers)} layers')
        if not isinstance(layers[-1], UpSamplingSpec):
            raise ConfigError('architecture must end with an up-sampling layer', f'layer {len(layers) - 1}')
        if dim != values['dimension']:
            raise ConfigError(f'last layer emits {dim} channels, coordinates need {values["dimension"]}',
                              f'layer {len(layers) - 1}')
        return values

    @property
    def output_points(self) -> 'int':
        count = 1
        for layer in self.layers:
            if isinstance(layer, UpSamplingSpec):
                count *= layer.n_up
        return count

    def point_counts(self) -> 'List[int]':
        """Set cardinality after every layer"""
        counts, count = [], self.input_points
        for layer in self.layers:
            if isinstance(layer, NeighborPoolingSpec):
                count //= layer.tau
            elif isinstance(layer, MaxPoolSpec):
                count = 1
            elif isinstance(layer, UpSamplingSpec):
                count *= layer.n_up
            counts.append(count)
        return counts


class OptimizerConfig(_Strict):
    learning_rate: float = Field(default=1e-4, gt=0.0, alias='lr')
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)
    schedule: Literal['constant', 'cosine'] = Field(default='constant', description='learning-rate schedule')
    decay_steps: Optional[int] = Field(default=None, gt=0, description='length of the cosine decay')
    final_lr_fraction: float = Field(default=0.01, gt=0.0, le=1.0, description='learning rate left after decay')

    @root_validator(skip_on_failure=True)
    def decay_needs_length(cls, values):
        if values['schedule'] == 'cosine' and values['decay_steps'] is None:
            raise ConfigError('cosine schedule needs decay_steps', 'optimizer.decay_steps')
        return values

    def learning_rate_at(self, step: 'int') -> 'float':
        """Step size of the 1-based ``step``; the cosine schedule holds its floor past ``decay_steps``"""
        if self.schedule == 'constant':
            return self.learning_rate
        progress = min(max(step - 1, 0), self.decay_steps) / self.decay_steps
        floor = self.final_lr_fraction
        return self.learning_rate * (floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * progress)))


class LossWeights(_Strict):
    out_gt: float = Field(default=1.0, ge=0.0, description='weight of the output-to-ground-truth term')
    gt_out: float = Field(default=1.0, ge=0.0, description='weight of the ground-truth-to-output term')
    order: float = Field(default=1.0, ge=0.0, description='weight of the order term')
    semantic: float = Field(default=1.0, ge=0.0, description='weight of the semantic term, on top of gamma')
    completion_mode: Literal['nearest', 'assignment'] = Field(default='nearest')
    semantic_gamma: Optional[float] = Field(default=None,
                                            gt=0.0,
                                            description='fixed semantic weight replacing the adaptive one')


class SyntheticSpec(_Strict):
    family: Literal['plane', 'box', 'cylinder', 'room'] = Field(default='box', description='shape family')
    complete_points: int = Field(default=1024, gt=0)
    partial_points: int = Field(default=256, gt=0)
    camera: Tuple[float, float, float] = Field(default=(0.0, 0.0, 1.0), description='viewing direction of the cut')
    cut: float = Field(default=0.0, description='offset of the visibility plane along the camera axis')
    seed: int = Field(default=0)
    class_ids: Optional[List[int]] = Field(default=None, description='label per primitive, in generation order')

    @validator('camera')
    def nonzero_camera(cls, camera):
        if not any(camera):
            raise ConfigError('camera direction must be nonzero', str(camera))
        return camera


class DatasetConfig(_Strict):
    root: Optional[str] = Field(default=None, description='dataset root with <split>/partial and <split>/complete')
    split: str = Field(default='train')
    eval_split: str = Field(default='test')
    synthetic: Optional[SyntheticSpec] = Field(default=None, description='train on a generated pair instead')

    @root_validator(skip_on_failure=True)
    def one_source(cls, values):
        if values['root'] is None and values['synthetic'] is None:
            raise ConfigError('dataset needs a root directory or a synthetic spec', 'dataset')
        return values


class ReportConfig(_Strict):
    chamfer_scale: ChamferScale = Field(default=ChamferScale.OBJECT)
    voxel_resolution: Optional[int] = Field(default=None, gt=0, description='x of the x * 0.6x * x IoU grid')
    write_xyz: bool = Field(default=True, description='emit plot-ready xyz text next to completions')

    class Config:
        use_enum_values = True


class RunConfig(_Strict):
    architecture: ArchitectureConfig
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    losses: LossWeights = Field(default_factory=LossWeights)
    dataset: DatasetConfig
    report: ReportConfig = Field(default_factory=ReportConfig)
    seed: int = Field(default=0)
    steps: int = Field(default=500, ge=0)
    batch_size: int = Field(default=1, gt=0)
    checkpoint_every: int = Field(default=100, gt=0)
    out: str = Field(default='runs/dispnet', description='output directory')

    @root_validator(skip_on_failure=True)
    def synthetic_counts(cls, values):
        synthetic, arch = values['dataset'].synthetic, values['architecture']
        if synthetic is not None and arch.dimension != 3:
            raise ConfigError('synthetic pairs are three-dimensional', f'dimension={arch.dimension}')
        if values['losses'].semantic > 0 and arch.semantic_classes is None:
            values['losses'] = values['losses'].copy(update={'semantic': 0.0})
        return values

    def echo(self) -> 'str':
        return self.json(by_alias=False, indent=2, sort_keys=True) + '\n'


def parse_run_config(obj) -> 'RunConfig':
    try:
        return RunConfig.parse_obj(obj)
    except ValidationError as e:
        raise ConfigError('invalid run configuration', str(e)) from e


def load_run_config(path: 'str') -> 'RunConfig':
    try:
        with open(path) as f:
            obj = json.load(f)
    except OSError as e:
        raise DataIOError(f'cannot read config {path}: {e}') from e
    except json.JSONDecodeError as e:
        raise ConfigError(f'config {path} is not valid JSON', f'line {e.lineno} column {e.colno}') from e
    return parse_run_config(obj)


def full_direct_architecture(semantic_classes: 'Optional[int]' = None) -> 'ArchitectureConfig':
    """Full-size direct architecture: 2048 input points completed to 16384"""
    fe, pool, up = FeatureExtractionSpec, NeighborPoolingSpec, UpSamplingSpec
    return ArchitectureConfig(
        input_points=2048,
        semantic_classes=semantic_classes,
        layers=[
            fe(s=10, d_out=16), pool(tau=8),
            fe(s=10, d_out=64), pool(tau=4),
            fe(s=10, d_out=64), pool(tau=4),
            fe(s=10, d_out=64), MaxPoolSpec(),
            up(s=5, n_up=2, d_out=256),
            up(s=10, n_up=8, d_out=64),
            up(s=10, n_up=4, d_out=64),
            up(s=10, n_up=4, d_out=32),
            up(s=10, n_up=8, d_out=3),
            up(s=10, n_up=1, d_out=3),
            up(s=10, n_up=8, d_out=3),
        ],
    )  # yapf: disable


def desk_architecture(semantic_classes: 'Optional[int]' = None) -> 'ArchitectureConfig':
    """Laptop-scale direct architecture: 256 input points completed to 1024

    The decoder is shallow and wide: four 32-channel seeds, then one bank per
    group of four output points, so every output point has its own readout.
    """
    fe, pool, up = FeatureExtractionSpec, NeighborPoolingSpec, UpSamplingSpec
    return ArchitectureConfig(
        input_points=256,
        semantic_classes=semantic_classes,
        layers=[
            fe(s=4, d_out=16), pool(tau=4),
            fe(s=4, d_out=32), pool(tau=4),
            fe(s=4, d_out=32), pool(tau=4),
            fe(s=4, d_out=64), MaxPoolSpec(),
            up(s=4, n_up=4, d_out=32),
            up(s=2, n_up=256, d_out=3),
        ],
    )  # yapf: disable


def tiny_architecture() -> 'ArchitectureConfig':
    """8 input points completed to 16, small enough for exhaustive oracles"""
    return ArchitectureConfig(
        input_points=8,
        knn_k=None,
        layers=[
            FeatureExtractionSpec(s=2, d_out=4),
            NeighborPoolingSpec(tau=2),
            FeatureExtractionSpec(s=2, d_out=4),
            MaxPoolSpec(),
            UpSamplingSpec(s=2, n_up=2, d_out=4),
            UpSamplingSpec(s=2, n_up=2, d_out=4),
            UpSamplingSpec(s=2, n_up=4, d_out=3),
        ],
    )


def overfit_run_config(out: 'str' = 'runs/overfit', semantic: 'bool' = False, order: 'bool' = True) -> 'RunConfig':
    """Desk architecture fitted to one synthetic pair

    Matching is bijective so every ground-truth point claims its own output, and
    the step size decays along a cosine to 1% so outputs settle on their targets.
    """
    arch = desk_architecture(semantic_classes=3 if semantic else None)
    synthetic = SyntheticSpec(
        family='room' if semantic else 'box',
        complete_points=arch.output_points,
        partial_points=arch.input_points,
        class_ids=[0, 1, 2] if semantic else None,
    )
    steps = 1000
    return RunConfig(
        architecture=arch,
        optimizer=OptimizerConfig(learning_rate=2e-3, schedule='cosine', decay_steps=steps),
        losses=LossWeights(
            order=1.0 if order else 0.0,
            semantic=1.0 if semantic else 0.0,
            completion_mode='assignment',
        ),
        dataset=DatasetConfig(synthetic=synthetic),
        steps=steps,
        checkpoint_every=250,
        out=out,
    )
