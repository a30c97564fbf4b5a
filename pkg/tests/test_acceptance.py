"""Overfitting runs on the desk architecture; minutes each, so marked slow"""
import unittest.mock

import numpy as np
import pytest

from dispnet import analytics
from dispnet.cli import load_samples
from dispnet.config import overfit_run_config
from dispnet.losses import nearest_correspondence
from dispnet.metrics import chamfer, fscore
from dispnet.model import Adam, build_direct, complete, order_statistic, train_step


def overfit(semantic=False, order=True):
    cfg = overfit_run_config(semantic=semantic, order=order)
    assert 500 <= cfg.steps <= 2000
    sample = load_samples(cfg, 'train')[0]
    model = build_direct(cfg.architecture, seed=cfg.seed)
    optimizer = Adam(cfg.optimizer)
    with unittest.mock.patch.object(analytics, 'statsd', unittest.mock.Mock()):
        curve = [train_step(model, [sample], optimizer, cfg.losses, workers=1).breakdown for _ in range(cfg.steps)]
    points, labels = complete(model, sample.partial)
    return sample, points, labels, curve


@pytest.fixture(scope='module')
def runs():
    cache = {}

    def get(semantic=False, order=True):
        key = (semantic, order)
        if key not in cache:
            cache[key] = overfit(semantic=semantic, order=order)
        return cache[key]

    return get


@pytest.mark.slow
def test_desk_overfit_fits_the_pair(runs):
    sample, points, _, _ = runs()
    assert points.shape == sample.complete.shape
    assert chamfer(points, sample.complete) < 1e-3
    assert fscore(points, sample.complete, threshold=0.01) > 0.95


@pytest.mark.slow
def test_order_term_drops_below_a_tenth(runs):
    _, _, _, curve = runs()
    assert curve[-1]['order'] < 0.1 * curve[0]['order']


@pytest.mark.slow
def test_order_term_pulls_inputs_to_leading_outputs(runs):
    sample, ordered, _, _ = runs(order=True)
    _, unordered, _, _ = runs(order=False)
    assert order_statistic(sample.partial, ordered) < order_statistic(sample.partial, unordered)


@pytest.mark.slow
def test_semantic_overfit_labels_points(runs):
    sample, points, labels, curve = runs(semantic=True)
    assert labels is not None
    assert curve[-1]['semantic'] < curve[0]['semantic']
    truth = sample.labels[nearest_correspondence(points, sample.complete).ids]
    assert np.mean(labels == truth) > 0.9
