import functools
from time import perf_counter
from typing import Callable, Optional

import datadog

from .constants import TRAIN_LOSS, TRAIN_STEP_FAULT, TRAIN_STEP_SUCCESS, TRAIN_STEP_TIME, VERBOSE_METRICS
from .errors import BaseDispnetError


def stepanalytics(
    statsd: 'Optional[datadog.ThreadStats]' = None,
    verbose: 'bool' = VERBOSE_METRICS,
):
    """Decorator for training steps to record timing and outcome counters

    - Record and send step timing to Datadog
    - Count successful steps, and faulted steps tagged with the fault's ``event_name``
    - Re-raise every fault after counting it

    ``statsd`` defaults to the module-level :data:`statsd` so the CLI can swap in
    the collector returned by ``configure_metrics``.
    """
    def wrapper(step_fn: 'Callable') -> 'Callable':
        @functools.wraps(step_fn)
        def driver(*args, **kwargs):
            collector = statsd or globals()['statsd']
            start: float = perf_counter()
            try:
                result = step_fn(*args, **kwargs)
            except BaseDispnetError as e:
                collector.increment(TRAIN_STEP_FAULT, tags=[f'step_error:{e.event_name}'])
                raise
            finally:
                collector.timing(TRAIN_STEP_TIME, perf_counter() - start)
            collector.increment(TRAIN_STEP_SUCCESS)
            if verbose:
                collector.gauge(TRAIN_LOSS, getattr(result, 'loss', float('nan')))
            return result

        return driver

    return wrapper


statsd = datadog.statsd


def use_collector(collector) -> None:
    """Route every decorated step through ``collector``"""
    global statsd
    statsd = collector
