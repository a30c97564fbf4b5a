"""Central finite-difference checks of every recorded derivative.

Each target builds seeded random instances, evaluates the analytic gradient
with :func:`dispnet.autodiff.backward` and compares it, coordinate by
coordinate, with ``(f(x + h) - f(x - h)) / 2h``. Instances whose discrete
choices (gathered indices, selected minima) change under a small perturbation
sit too close to a tie and are rejected instead of compared.
"""
import logging
import zlib
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .config import LossWeights, tiny_architecture
from .dataio import Sample
from .errors import ContractError
from .losses import Correspondence, LabeledCloud, assignment_loss, directed_closest_loss, order_loss, semantic_loss
from .model import Model, build_direct, objective
from .operators import (
    DisplacementBank,
    FeatureSet,
    UpBank,
    activations,
    closest_distance,
    feature_extraction,
    g_aggregate,
    latent_max_pool,
    neighbor_pooling,
    upsampling,
)

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4
TIE_MARGIN = 1e-3
GRAD_FLOOR = 1e-3
MAX_COORDINATES = 24
# draws allowed per requested instance before a target gives up on its quota
ATTEMPTS_PER_INSTANCE = 4
SCOPES = ('primitive', 'operator', 'loss', 'model')

Inputs = Dict[str, np.ndarray]
Objective = Callable[[Dict[str, Tensor]], Tensor]


class Instance(NamedTuple):
    inputs: 'Inputs'
    fn: 'Objective'


class CheckResult(NamedTuple):
    target: 'str'
    scope: 'str'
    worst_error: 'float'
    accepted: 'int'
    rejected: 'int'
    requested: 'int' = 1

    @property
    def passed(self) -> 'bool':
        """Every requested instance was compared (rejected ties do not count) and all agreed"""
        return self.accepted >= max(self.requested, 1) and self.worst_error <= TOLERANCE


def _evaluate(fn: 'Objective', inputs: 'Inputs') -> 'Tuple[float, Tuple[bytes, ...]]':
    """Value of ``fn`` and the discrete choices it made"""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    with Tape(record_all=True) as tape:
        out = fn(leaves)
        signature = tuple(
            (rec.attrs['indices'] if rec.primitive.name == 'gather' else rec.ctx).tobytes()
            for rec in tape.records
            if rec.primitive.name in ('gather', 'select_min_index'))
    return out.item(), signature


def analytic_gradients(fn: 'Objective', inputs: 'Inputs') -> 'Dict[str, np.ndarray]':
    leaves = {k: Tensor(v, requires_grad=True) for k, v in inputs.items()}
    with Tape():
        grads = ad.backward(fn(leaves), leaves=leaves.values())
    return {k: grads[t] for k, t in leaves.items()}


def relative_error(analytic: 'float', numeric: 'float') -> 'float':
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_FLOOR)


def check_instance(instance: 'Instance',
                   rng: 'np.random.Generator',
                   step: 'float' = STEP,
                   max_coordinates: 'int' = MAX_COORDINATES) -> 'Optional[float]':
    """Worst relative error over sampled coordinates, or None when the instance sits near a tie"""
    _, base = _evaluate(instance.fn, instance.inputs)
    grads = analytic_gradients(instance.fn, instance.inputs)
    worst = 0.0
    for name, value in instance.inputs.items():
        flat = value.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coordinates:
            coords = np.sort(rng.choice(flat.size, size=max_coordinates, replace=False))
        for c in coords:
            sides = {}
            for offset in (-TIE_MARGIN, TIE_MARGIN, -step, step):
                moved = flat.copy()
                moved[c] += offset
                value_at, signature = _evaluate(instance.fn, {**instance.inputs, name: moved.reshape(value.shape)})
                if signature != base:
                    return None
                sides[offset] = value_at
            numeric = (sides[step] - sides[-step]) / (2 * step)
            worst = max(worst, relative_error(float(grads[name].reshape(-1)[c]), numeric))
    return worst


def _weights(rng, shape):
    return rng.normal(size=shape)


def _weighted(t: 'Tensor', w: 'np.ndarray') -> 'Tensor':
    return ad.reduce_sum(t * w)


def _away_from(rng, shape, low, high):
    """Values with magnitudes in [low, high] and random signs"""
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


# primitives


def _add(rng):
    w = _weights(rng, (3, 4))
    return Instance({'a': rng.normal(size=(3, 4)), 'b': rng.normal(size=(4, ))},
                    lambda t: _weighted(ad.add(t['a'], t['b']), w))


def _mul(rng):
    w = _weights(rng, (3, 4))
    return Instance({'a': rng.normal(size=(3, 4)), 'b': rng.normal(size=(3, 1))},
                    lambda t: _weighted(ad.mul(t['a'], t['b']), w))


def _matvec(rng):
    w = _weights(rng, (5, 3))
    return Instance({'m': rng.normal(size=(3, 4)), 'x': rng.normal(size=(5, 4))},
                    lambda t: _weighted(ad.matvec(t['m'], t['x']), w))


def _norm(rng):
    w = _weights(rng, (5, ))
    return Instance({'x': _away_from(rng, (5, 3), 0.2, 1.0)}, lambda t: _weighted(ad.euclidean_norm(t['x']), w))


def _tanh(rng):
    w = _weights(rng, (3, 4))
    return Instance({'x': rng.normal(size=(3, 4))}, lambda t: _weighted(ad.tanh(t['x']), w))


def _reciprocal(rng):
    w = _weights(rng, (3, 4))
    return Instance({'x': _away_from(rng, (3, 4), 0.5, 2.0)}, lambda t: _weighted(ad.reciprocal(t['x']), w))


def _sum(rng):
    w = _weights(rng, (3, 2))
    return Instance({'x': rng.normal(size=(3, 4, 2))}, lambda t: _weighted(ad.reduce_sum(t['x'], axis=1), w))


def _gather(rng):
    idx = rng.integers(0, 5, size=(4, ))
    w = _weights(rng, (4, 3))
    return Instance({'x': rng.normal(size=(5, 3))}, lambda t: _weighted(ad.gather(t['x'], idx, axis=0), w))


def _select_min(rng):
    w = _weights(rng, (4, ))
    return Instance({'x': rng.normal(size=(4, 5))}, lambda t: _weighted(ad.select_min_index(t['x'], axis=1)[1], w))


def _log(rng):
    w = _weights(rng, (3, 4))
    return Instance({'x': rng.uniform(0.5, 2.0, size=(3, 4))}, lambda t: _weighted(ad.log(t['x']), w))


def _clip(rng):
    inside = rng.uniform(0.0, 0.8, size=(3, 4))
    outside = rng.uniform(1.2, 2.0, size=(3, 4))
    x = np.where(rng.random((3, 4)) < 0.5, inside, outside) * rng.choice([-1.0, 1.0], size=(3, 4))
    w = _weights(rng, (3, 4))
    return Instance({'x': x}, lambda t: _weighted(ad.clip(t['x'], -1.0, 1.0), w))


def _concat(rng):
    w = _weights(rng, (5, 3))
    return Instance({'a': rng.normal(size=(2, 3)), 'b': rng.normal(size=(3, 3))},
                    lambda t: _weighted(ad.concat([t['a'], t['b']], axis=0), w))


def _reshape(rng):
    w = _weights(rng, (2, 6))
    return Instance({'x': rng.normal(size=(3, 4))}, lambda t: _weighted(ad.reshape(t['x'], (2, 6)), w))


# operators


def _bank(t: 'Dict[str, Tensor]', prefix: 'str' = '') -> 'DisplacementBank':
    return DisplacementBank(t[prefix + 'deltas'], t[prefix + 'sigmas'], t[prefix + 'rhos'])


def _bank_inputs(rng, d_in, d_out, s, prefix=''):
    return {
        prefix + 'deltas': rng.uniform(-0.3, 0.3, size=(d_out, s, d_in)),
        prefix + 'sigmas': rng.uniform(-0.5, 0.5, size=(d_out, s)),
        prefix + 'rhos': rng.normal(0.0, 0.5, size=(d_out, d_in)),
    }


def _closest_distance(rng):
    inputs = {'anchor': rng.normal(size=3), 'delta': rng.uniform(-0.3, 0.3, size=3), 'candidates': rng.normal(size=(6, 3))}
    return Instance(inputs, lambda t: closest_distance(t['anchor'], t['delta'], FeatureSet(t['candidates']), k=None)[0])


def _g_aggregate(rng):
    inputs = {
        'anchor': rng.normal(size=3),
        'deltas': rng.uniform(-0.3, 0.3, size=(2, 3)),
        'sigmas': rng.uniform(-0.5, 0.5, size=2),
        'candidates': rng.normal(size=(6, 3)),
    }
    return Instance(
        inputs, lambda t: g_aggregate(t['anchor'], t['deltas'], t['sigmas'], FeatureSet(t['candidates']), k=None))


def _feature_extraction(rng):
    inputs = {'features': rng.normal(size=(6, 3)), **_bank_inputs(rng, 3, 2, 2)}
    w = _weights(rng, (6, 2))
    return Instance(inputs, lambda t: _weighted(feature_extraction(FeatureSet(t['features']), _bank(t), k=4).vectors, w))


def _neighbor_pooling(rng):
    inputs = {'features': rng.normal(size=(6, 3)), **_bank_inputs(rng, 3, 2, 2)}
    w = _weights(rng, (3, 2))

    def fn(t):
        fout = feature_extraction(FeatureSet(t['features']), _bank(t), k=4)
        return _weighted(neighbor_pooling(fout, activations(fout), 2).vectors, w)

    return Instance(inputs, fn)


def _upsampling(rng):
    inputs = {'features': rng.normal(size=(4, 3)), **_bank_inputs(rng, 3, 2, 2, 'u0.'), **_bank_inputs(rng, 3, 2, 2, 'u1.')}
    w = _weights(rng, (8, 2))

    def fn(t):
        up = UpBank((_bank(t, 'u0.'), _bank(t, 'u1.')))
        return _weighted(upsampling(FeatureSet(t['features']), up, k=None).vectors, w)

    return Instance(inputs, fn)


def _latent_max_pool(rng):
    w = _weights(rng, (1, 4))
    return Instance({'features': rng.normal(size=(5, 4))},
                    lambda t: _weighted(latent_max_pool(FeatureSet(t['features'])).vectors, w))


# losses


def _directed_closest(rng):
    return Instance({'source': rng.normal(size=(5, 3)), 'target': rng.normal(size=(6, 3))},
                    lambda t: directed_closest_loss(t['source'], t['target'])[0])


def _assignment(rng):
    return Instance({'source': rng.normal(size=(5, 3)), 'target': rng.normal(size=(5, 3))},
                    lambda t: assignment_loss(t['source'], t['target']))


def _order(rng):
    inputs = rng.normal(size=(3, 3))
    output = np.concatenate([inputs + rng.normal(0.0, 0.1, size=(3, 3)), rng.normal(size=(3, 3))])
    return Instance({'input': inputs, 'output': output}, lambda t: order_loss(t['input'], t['output']))


def _semantic(rng):
    n, n_classes = 5, 3
    truth = LabeledCloud.from_class_ids(rng.normal(size=(6, 3)), rng.integers(0, n_classes, size=6), n_classes)
    corr = Correspondence(rng.integers(0, 6, size=n), np.zeros(n))

    def fn(t):
        pred = LabeledCloud(Tensor(np.zeros((n, 3))), t['probs'])
        return semantic_loss(pred, truth, corr, (0.3, 0.2))

    return Instance({'probs': rng.uniform(0.05, 0.95, size=(n, n_classes))}, fn)


# model


def _model(rng):
    config = tiny_architecture()
    model = build_direct(config, rng=rng)
    params = model.parameters()
    names = [n for n in params if n.endswith('deltas')][:1] + [n for n in params if n.endswith('rhos')][-1:]
    sample = Sample(rng.normal(size=(config.input_points, 3)), rng.normal(size=(config.output_points, 3)))
    weights = LossWeights()

    def fn(t):
        return objective(Model(config, model.layers).assign(t), sample, weights)[0]

    return Instance({n: params[n].numpy() for n in names}, fn)


TARGETS: 'Dict[str, Sequence[Tuple[str, Callable[[np.random.Generator], Instance]]]]' = {
    'primitive': [
        ('add', _add),
        ('mul', _mul),
        ('matvec', _matvec),
        ('euclidean_norm', _norm),
        ('tanh', _tanh),
        ('reciprocal', _reciprocal),
        ('sum', _sum),
        ('gather', _gather),
        ('select_min_index', _select_min),
        ('log', _log),
        ('clip', _clip),
        ('concat', _concat),
        ('reshape', _reshape),
    ],
    'operator': [
        ('closest_distance', _closest_distance),
        ('g_aggregate', _g_aggregate),
        ('feature_extraction', _feature_extraction),
        ('neighbor_pooling', _neighbor_pooling),
        ('upsampling', _upsampling),
        ('latent_max_pool', _latent_max_pool),
    ],
    'loss': [
        ('directed_closest_loss', _directed_closest),
        ('assignment_loss', _assignment),
        ('order_loss', _order),
        ('semantic_loss', _semantic),
    ],
    'model': [
        ('direct_model', _model),
    ],
}


def check_target(scope: 'str', target: 'str', builder, instances: 'int', seed: 'int',
                 max_coordinates: 'int' = MAX_COORDINATES) -> 'CheckResult':
    worst, accepted, rejected = 0.0, 0, 0
    for i in range(instances * ATTEMPTS_PER_INSTANCE):
        if accepted >= instances:
            break
        rng = np.random.default_rng([seed, SCOPES.index(scope), zlib.crc32(target.encode()), i])
        error = check_instance(builder(rng), rng, max_coordinates=max_coordinates)
        if error is None:
            rejected += 1
            continue
        accepted += 1
        worst = max(worst, error)
    if accepted < instances:
        logger.warning('%s/%s accepted only %d of %d instances after %d draws', scope, target, accepted, instances,
                       accepted + rejected)
    result = CheckResult(target, scope, worst, accepted, rejected, instances)
    logger.debug('%s/%s worst=%.3e accepted=%d rejected=%d', scope, target, worst, accepted, rejected)
    return result


def run_gradcheck(scope: 'str' = 'all', instances: 'int' = 100, seed: 'int' = 0,
                  max_coordinates: 'int' = MAX_COORDINATES) -> 'List[CheckResult]':
    scopes = SCOPES if scope == 'all' else (scope, )
    results = []
    for s in scopes:
        if s not in TARGETS:
            raise ContractError(f'unknown gradcheck scope {s!r}')
        for target, builder in TARGETS[s]:
            results.append(check_target(s, target, builder, instances, seed, max_coordinates))
    return results


def render_table(results: 'Sequence[CheckResult]') -> 'str':
    lines = [f'{"scope":<10} {"target":<24} {"worst_rel_error":>16} {"accepted":>9} {"rejected":>9} status']
    for r in results:
        status = 'PASS' if r.passed else 'FAIL'
        lines.append(f'{r.scope:<10} {r.target:<24} {r.worst_error:>16.3e} {r.accepted:>9d} {r.rejected:>9d} {status}')
    return '\n'.join(lines) + '\n'
