from .autodiff import Tape, Tensor, backward
from .config import (
    ArchitectureConfig,
    LossWeights,
    RunConfig,
    desk_architecture,
    full_direct_architecture,
    overfit_run_config,
    tiny_architecture,
)
from .dataio import Sample
from .errors import BaseDispnetError
from .model import Adam, Model, build_direct, forward, train_step
from .operators import FeatureSet, feature_extraction, latent_max_pool, neighbor_pooling, upsampling
from .spatial import NeighborIndex

__version__ = '0.3.0'
