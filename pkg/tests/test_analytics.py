import unittest.mock

import pytest

from dispnet import analytics
from dispnet.analytics import stepanalytics, use_collector
from dispnet.constants import TRAIN_LOSS, TRAIN_STEP_FAULT, TRAIN_STEP_SUCCESS, TRAIN_STEP_TIME
from dispnet.errors import ConfigError, NumericFaultError
from dispnet.model import StepResult


@pytest.fixture(scope='function')
def statsd():
    o = unittest.mock.Mock()
    o.increment = unittest.mock.Mock()
    o.timing = unittest.mock.Mock()
    o.gauge = unittest.mock.Mock()
    return o


@pytest.fixture(params=[True, False], ids=['verbose', 'quiet'])
def verbose(request):
    return request.param


def test_successful_step(statsd, verbose):
    @stepanalytics(statsd=statsd, verbose=verbose)
    def step():
        return StepResult(0.25, {'total': 0.25})

    assert step().loss == 0.25
    statsd.increment.assert_called_once_with(TRAIN_STEP_SUCCESS)
    assert statsd.timing.call_args[0][0] == TRAIN_STEP_TIME
    assert statsd.timing.call_args[0][1] >= 0.0
    if verbose:
        statsd.gauge.assert_called_once_with(TRAIN_LOSS, 0.25)
    else:
        statsd.gauge.assert_not_called()


@pytest.mark.parametrize('fault,tag', [
    (NumericFaultError('out_gt'), 'step_error:numericfault'),
    (ConfigError('bad layer'), 'step_error:config'),
])
def test_faulted_step(statsd, fault, tag):
    @stepanalytics(statsd=statsd)
    def step():
        raise fault

    with pytest.raises(type(fault)):
        step()
    statsd.increment.assert_called_once_with(TRAIN_STEP_FAULT, tags=[tag])
    statsd.timing.assert_called_once()


def test_foreign_exceptions_are_not_counted(statsd):
    @stepanalytics(statsd=statsd)
    def step():
        raise KeyError('x')

    with pytest.raises(KeyError):
        step()
    statsd.increment.assert_not_called()
    statsd.timing.assert_called_once()


def test_default_collector_is_swappable(statsd):
    @stepanalytics()
    def step():
        return StepResult(1.0, {})

    previous = analytics.statsd
    use_collector(statsd)
    try:
        step()
    finally:
        use_collector(previous)
    statsd.increment.assert_called_once_with(TRAIN_STEP_SUCCESS)


def test_wraps_metadata():
    @stepanalytics(statsd=unittest.mock.Mock())
    def documented_step():
        """one step"""

    assert documented_step.__name__ == 'documented_step'
    assert documented_step.__doc__ == 'one step'
