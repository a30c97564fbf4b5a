"""``dispnet`` command line: train, eval, complete and gradcheck."""
import argparse
import logging
import os
import sys
from time import perf_counter
from typing import List, Optional, Sequence

import numpy as np

from .analytics import use_collector
from .checkpoint import check_architecture, load_checkpoint, restore_rng, save_checkpoint
from .config import (
    ArchitectureConfig,
    LossWeights,
    OptimizerConfig,
    RunConfig,
    desk_architecture,
    full_direct_architecture,
    load_run_config,
    overfit_run_config,
    parse_run_config,
    tiny_architecture,
)
from .constants import COMPLETE_TIME, EVAL_SAMPLE, EVAL_TIME, EXIT_OK
from .dataio import Sample, load_manifest, normalize, read_ply, resample, write_ply, write_xyz
from .datadog import configure_metrics
from .errors import BaseDispnetError, ConfigError, DataIOError
from .filesystem import write_text
from .gradcheck import SCOPES, render_table, run_gradcheck
from .metrics import aggregate_reports, evaluate, render_json, render_text
from .model import Adam, build_direct, complete, train_step
from .synthetic import synthetic_sample

logger = logging.getLogger(__name__)

LOG_FORMAT = '[%(asctime)s] [%(levelname)s] [%(name)s] %(message)s'
EXIT_GRADCHECK_FAILED = 1


def _chamfer_preset(architecture: 'ArchitectureConfig') -> 'RunConfig':
    """Overfit pair with nearest-point matching at a constant step size"""
    return overfit_run_config().copy(update={
        'architecture': architecture,
        'losses': LossWeights(),
        'optimizer': OptimizerConfig(learning_rate=2e-3),
    })


PRESETS = {
    'overfit': lambda: overfit_run_config(),
    'overfit-semantic': lambda: overfit_run_config(semantic=True),
    'desk': lambda: _chamfer_preset(desk_architecture()),
    'full': lambda: _chamfer_preset(full_direct_architecture()),
    'tiny': lambda: overfit_run_config().copy(update={'architecture': tiny_architecture()}),
}


def resolve_config(args: 'argparse.Namespace') -> 'RunConfig':
    """Config file or preset, then command-line overrides"""
    cfg = load_run_config(args.config) if args.config else PRESETS[args.preset]()
    cfg = parse_run_config(cfg.dict())
    updates = {}
    if args.seed is not None:
        updates['seed'] = args.seed
    if args.out is not None:
        updates['out'] = args.out
    if getattr(args, 'steps', None) is not None:
        updates['steps'] = args.steps
        if cfg.optimizer.schedule == 'cosine' and args.steps > 0:
            updates['optimizer'] = {**cfg.optimizer.dict(), 'decay_steps': args.steps}
    if updates:
        cfg = parse_run_config({**cfg.dict(), **updates})
    return cfg


def fit_counts(sample: 'Sample', input_points: 'int', output_points: 'int', seed: 'int') -> 'Sample':
    rng = np.random.default_rng(seed)
    keep_in = resample(sample.partial, input_points, rng)
    keep_out = resample(sample.complete, output_points, rng)
    labels = None if sample.labels is None else sample.labels[keep_out]
    return Sample(sample.partial[keep_in], sample.complete[keep_out], labels, sample.name)


def load_samples(cfg: 'RunConfig', split: 'str') -> 'List[Sample]':
    arch = cfg.architecture
    if cfg.dataset.root is None:
        sample = synthetic_sample(cfg.dataset.synthetic, name=f'synthetic-{cfg.dataset.synthetic.family}')
        return [fit_counts(sample, arch.input_points, arch.output_points, cfg.seed)]
    manifest = load_manifest(cfg.dataset.root, split, arch.input_points, arch.output_points)
    return list(manifest.samples(cfg.seed))


def write_reports(out: 'str', cfg: 'RunConfig', model, samples: 'Sequence[Sample]', statsd=None) -> None:
    reports = []
    for sample in samples:
        start = perf_counter()
        points, labels = complete(model, sample.partial)
        reports.append(
            evaluate(sample.name, points, sample.complete, cfg.report.chamfer_scale, labels, sample.labels,
                     cfg.report.voxel_resolution))
        if statsd is not None:
            statsd.timing(EVAL_TIME, perf_counter() - start)
            statsd.increment(EVAL_SAMPLE)
    aggregate = aggregate_reports(reports)
    write_text(os.path.join(out, 'report.txt'), render_text(reports, aggregate))
    write_text(os.path.join(out, 'report.json'), render_json(reports, aggregate))
    if aggregate is None:
        logger.info('empty split, wrote empty report')
    else:
        logger.info('chamfer_l2=%.6g fscore=%.4f over %d samples', aggregate.chamfer_l2, aggregate.fscore_at_1pct,
                    len(reports))


def cmd_train(args: 'argparse.Namespace') -> 'int':
    cfg = resolve_config(args)
    os.makedirs(cfg.out, exist_ok=True)
    write_text(os.path.join(cfg.out, 'config.json'), cfg.echo())
    statsd = configure_metrics(command='train', run_name=os.path.basename(os.path.abspath(cfg.out)))
    use_collector(statsd)

    samples = load_samples(cfg, cfg.dataset.split)
    if not samples:
        raise DataIOError(f'no training pairs in {cfg.dataset.root}/{cfg.dataset.split}')
    model = build_direct(cfg.architecture, seed=cfg.seed)
    optimizer = Adam(cfg.optimizer)
    rng = np.random.default_rng(cfg.seed)
    echo = cfg.dict()

    curve: 'List[str]' = []
    try:
        for step in range(1, cfg.steps + 1):
            first = (step - 1) * cfg.batch_size
            batch = [samples[(first + j) % len(samples)] for j in range(cfg.batch_size)]
            result = train_step(model, batch, optimizer, cfg.losses)
            line = f'step={step} ' + ' '.join(f'{k}={v:.9g}' for k, v in result.breakdown.items())
            curve.append(line)
            logger.info(line)
            if step % cfg.checkpoint_every == 0:
                save_checkpoint(os.path.join(cfg.out, f'checkpoint-{step}.dspn'), model, optimizer, cfg.seed, rng, echo)
    finally:
        write_text(os.path.join(cfg.out, 'loss_curve.txt'), ''.join(line + '\n' for line in curve))

    save_checkpoint(os.path.join(cfg.out, 'final.dspn'), model, optimizer, cfg.seed, rng, echo)
    write_reports(cfg.out, cfg, model, samples, statsd)
    statsd.flush()
    return EXIT_OK


def _checkpoint_and_config(args: 'argparse.Namespace'):
    if not args.checkpoint:
        raise ConfigError('a checkpoint is required', '--checkpoint')
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        cfg = resolve_config(args)
        check_architecture(ckpt.model.config, cfg.architecture)
    elif ckpt.run_config is not None:
        cfg = parse_run_config(ckpt.run_config)
        overrides = {k: v for k, v in (('seed', args.seed), ('out', args.out)) if v is not None}
        if overrides:
            cfg = parse_run_config({**cfg.dict(), **overrides})
    else:
        raise ConfigError('checkpoint carries no run configuration; pass one', '--config')
    return ckpt, cfg


def cmd_eval(args: 'argparse.Namespace') -> 'int':
    ckpt, cfg = _checkpoint_and_config(args)
    split = args.split or cfg.dataset.eval_split
    statsd = configure_metrics(command='eval')
    samples = load_samples(cfg, split)
    os.makedirs(cfg.out, exist_ok=True)
    write_reports(cfg.out, cfg, ckpt.model, samples, statsd)
    statsd.flush()
    return EXIT_OK


def cmd_complete(args: 'argparse.Namespace') -> 'int':
    ckpt, cfg = _checkpoint_and_config(args)
    arch = ckpt.model.config
    start = perf_counter()
    cloud = read_ply(args.input)
    partial, transform = normalize(cloud.points)
    if partial.shape[0] != arch.input_points:
        logger.warning('input has %d points, resampling to %d', partial.shape[0], arch.input_points)
    rng = restore_rng(None, cfg.seed)
    partial = partial[resample(partial, arch.input_points, rng)]
    points, labels = complete(ckpt.model, partial)
    points = transform.invert(points)
    write_ply(args.output, points, labels)
    if cfg.report.write_xyz:
        write_xyz(os.path.splitext(args.output)[0] + '.xyz', points, labels)
    statsd = configure_metrics(command='complete')
    statsd.timing(COMPLETE_TIME, perf_counter() - start)
    statsd.flush()
    logger.info('wrote %d points to %s', points.shape[0], args.output)
    return EXIT_OK


def cmd_gradcheck(args: 'argparse.Namespace') -> 'int':
    seed = 0 if args.seed is None else args.seed
    results = run_gradcheck(args.scope, instances=args.instances, seed=seed)
    sys.stdout.write(render_table(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        logger.error('gradient check failed for %s (worst relative error %.3e)', r.target, r.worst_error)
    return EXIT_GRADCHECK_FAILED if failed else EXIT_OK


def build_parser() -> 'argparse.ArgumentParser':
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='run configuration JSON')
    common.add_argument('--preset', choices=sorted(PRESETS), default='overfit', help='configuration when --config is absent')
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('--out', default=None, help='output directory')
    common.add_argument('--checkpoint', default=None, help='checkpoint file')
    common.add_argument('-v', '--verbose', action='store_true')

    parser = argparse.ArgumentParser(prog='dispnet', description='point-cloud completion with displacement operators')
    sub = parser.add_subparsers(dest='command', required=True)

    train = sub.add_parser('train', parents=[common], help='train a model')
    train.add_argument('--steps', type=int, default=None)
    train.set_defaults(handler=cmd_train)

    ev = sub.add_parser('eval', parents=[common], help='evaluate a checkpoint on a split')
    ev.add_argument('--split', default=None)
    ev.set_defaults(handler=cmd_eval)

    comp = sub.add_parser('complete', parents=[common], help='complete one PLY file')
    comp.add_argument('input')
    comp.add_argument('output')
    comp.set_defaults(handler=cmd_complete)

    grad = sub.add_parser('gradcheck', parents=[common], help='finite-difference gradient checks')
    grad.add_argument('--scope', choices=SCOPES + ('all', ), default='all')
    grad.add_argument('--instances', type=int, default=100)
    grad.set_defaults(handler=cmd_gradcheck)
    return parser


def main(argv: 'Optional[Sequence[str]]' = None) -> 'int':
    args = build_parser().parse_args(argv)
    logging.basicConfig(format=LOG_FORMAT, level=logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.handler(args)
    except BaseDispnetError as e:
        logger.error('%s: %s', e.event_name, e)
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
