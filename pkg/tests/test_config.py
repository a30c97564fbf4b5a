import json

import pytest

from dispnet.config import (
    ArchitectureConfig,
    FeatureExtractionSpec,
    LossWeights,
    MaxPoolSpec,
    NeighborPoolingSpec,
    OptimizerConfig,
    RunConfig,
    UpSamplingSpec,
    desk_architecture,
    full_direct_architecture,
    load_run_config,
    overfit_run_config,
    parse_run_config,
    tiny_architecture,
)
from dispnet.errors import ConfigError, DataIOError


def layers_of(*kinds):
    build = {
        'fe': lambda: FeatureExtractionSpec(s=2, d_out=4),
        'pool': lambda: NeighborPoolingSpec(tau=2),
        'max': MaxPoolSpec,
        'up': lambda: UpSamplingSpec(s=2, n_up=2, d_out=3),
    }
    return [build[k]() for k in kinds]


def test_full_architecture_counts():
    arch = full_direct_architecture()
    assert arch.input_points == 2048
    assert arch.output_points == 16384
    counts = arch.point_counts()
    pooled = [c for c, layer in zip(counts, arch.layers) if layer.kind in ('neighbor_pooling', 'max_pool')]
    assert pooled == [256, 64, 16, 1]
    assert counts[-1] == 16384


def test_desk_architecture_counts():
    arch = desk_architecture()
    assert (arch.input_points, arch.output_points) == (256, 1024)
    assert arch.point_counts()[-1] == 1024
    decoder = [layer for layer in arch.layers if layer.kind == 'upsampling']
    assert [layer.n_up for layer in decoder] == [4, 256]


def test_tiny_architecture():
    arch = tiny_architecture()
    assert (arch.input_points, arch.output_points, arch.knn_k) == (8, 16, None)


@pytest.mark.parametrize('kinds, offending', [
    (('pool', 'fe', 'max', 'up'), 'layer 0'),
    (('fe', 'max', 'fe', 'up'), 'layer 2'),
    (('fe', 'up', 'max', 'up'), 'layer 1'),
    (('fe', 'max', 'max', 'up'), 'layer 2'),
    (('fe', 'max', 'pool', 'up'), 'layer 2'),
    (('fe', 'pool', 'up'), 'layer 2'),
    (('fe', 'max'), 'layer 1'),
])
def test_invalid_layer_sequences(kinds, offending):
    with pytest.raises(ConfigError) as err:
        ArchitectureConfig(input_points=8, layers=layers_of(*kinds))
    assert offending in str(err.value)


def test_missing_max_pool():
    with pytest.raises(ConfigError):
        ArchitectureConfig(input_points=8, layers=layers_of('fe', 'pool'))


def test_last_layer_must_emit_coordinates():
    layers = layers_of('fe', 'max') + [UpSamplingSpec(s=1, n_up=2, d_out=5)]
    with pytest.raises(ConfigError):
        ArchitectureConfig(input_points=8, layers=layers)


def test_pooling_needs_enough_vectors():
    with pytest.raises(ConfigError):
        ArchitectureConfig(input_points=1, layers=layers_of('fe', 'pool', 'max', 'up'))


def test_aliases():
    spec = FeatureExtractionSpec(s=3, D_out=16)
    assert spec.d_out == 16
    assert UpSamplingSpec(s=1, N_up=4, D_out=3).n_up == 4
    assert OptimizerConfig(lr=0.5).learning_rate == 0.5


def test_layers_parse_from_plain_dicts():
    arch = ArchitectureConfig.parse_obj({
        'input_points': 4,
        'layers': [
            {'kind': 'feature_extraction', 's': 1, 'D_out': 2},
            {'kind': 'max_pool'},
            {'kind': 'upsampling', 's': 1, 'N_up': 3, 'D_out': 3},
        ],
    })
    assert arch.output_points == 3
    assert isinstance(arch.layers[1], MaxPoolSpec)


def test_optimizer_defaults():
    cfg = OptimizerConfig()
    assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps) == (1e-4, 0.9, 0.999, 1e-8)


def test_constant_rate_ignores_step():
    cfg = OptimizerConfig(learning_rate=3e-3)
    assert cfg.learning_rate_at(1) == cfg.learning_rate_at(10_000) == 3e-3


def test_cosine_rate_endpoints():
    cfg = OptimizerConfig(learning_rate=2e-3, schedule='cosine', decay_steps=100)
    assert cfg.learning_rate_at(1) == pytest.approx(2e-3)
    assert cfg.learning_rate_at(51) == pytest.approx(2e-3 * (0.01 + 0.99 * 0.5))
    assert cfg.learning_rate_at(101) == pytest.approx(2e-5)
    assert cfg.learning_rate_at(5000) == pytest.approx(2e-5)
    rates = [cfg.learning_rate_at(t) for t in range(1, 102)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_cosine_needs_decay_steps():
    with pytest.raises(ConfigError):
        OptimizerConfig(schedule='cosine')


def test_overfit_preset_matches_bijectively():
    cfg = overfit_run_config()
    assert cfg.losses.completion_mode == 'assignment'
    assert (cfg.optimizer.schedule, cfg.optimizer.decay_steps) == ('cosine', cfg.steps)


def test_run_config_round_trip():
    cfg = overfit_run_config(out='runs/x', semantic=True)
    again = parse_run_config(json.loads(cfg.echo()))
    assert again == cfg
    assert again.architecture.semantic_classes == 3
    assert again.dataset.synthetic.family == 'room'


def test_semantic_weight_dropped_without_head():
    cfg = RunConfig(architecture=tiny_architecture(),
                    losses=LossWeights(semantic=1.0),
                    dataset={'synthetic': {}})
    assert cfg.losses.semantic == 0.0


def test_unknown_keys_rejected():
    obj = json.loads(overfit_run_config().echo())
    obj['optimizer']['momentum'] = 0.5
    with pytest.raises(ConfigError):
        parse_run_config(obj)


def test_dataset_needs_a_source():
    obj = json.loads(overfit_run_config().echo())
    obj['dataset'] = {}
    with pytest.raises(ConfigError):
        parse_run_config(obj)


def test_zero_camera_rejected():
    obj = json.loads(overfit_run_config().echo())
    obj['dataset']['synthetic']['camera'] = [0, 0, 0]
    with pytest.raises(ConfigError):
        parse_run_config(obj)


def test_load_run_config(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(overfit_run_config().echo())
    assert load_run_config(str(path)).steps == 1000


def test_load_missing_config(tmp_path):
    with pytest.raises(DataIOError):
        load_run_config(str(tmp_path / 'absent.json'))


def test_load_malformed_config(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text('{"architecture": ')
    with pytest.raises(ConfigError) as err:
        load_run_config(str(path))
    assert 'line 1' in str(err.value)
