from typing import List, Optional

from datadog import ThreadStats, initialize

from .constants import DATADOG_API_KEY, DATADOG_APP_KEY, DISPNET_WORK, HOSTNAME, PLATFORM_MACHINE


def run_tags(run_name: 'str', command: 'str', dispnet_work: 'str' = DISPNET_WORK,
             source: 'str' = HOSTNAME) -> 'List[str]':
    """Constant tags attached to every metric of one CLI invocation"""
    tags = [
        f'dispnet_work:{dispnet_work}',
        f'run_name:{run_name}',
        f'command:{command}',
        f'host:{source}',
        f'machine:{PLATFORM_MACHINE}',
    ]
    if dispnet_work == 'local':
        tags.append('testing')
    return tags


def configure_metrics(datadog_api_key: 'Optional[str]' = DATADOG_API_KEY,
                      datadog_app_key: 'Optional[str]' = DATADOG_APP_KEY,
                      run_name: 'str' = 'dispnet',
                      command: 'str' = 'train',
                      dispnet_work: 'str' = DISPNET_WORK,
                      source: 'str' = HOSTNAME,
                      tags: 'Optional[List[str]]' = None,
                      disabled: 'bool' = False,
                      flush_interval: 'int' = 10) -> ThreadStats:
    """
    Build the step/eval metric collector; it only ships when a datadog key is set
    :return: datadog.ThreadStats
    """
    if not (datadog_api_key or datadog_app_key):
        disabled = True
    else:
        initialize(api_key=datadog_api_key, app_key=datadog_app_key, host_name=source)

    if tags is None:
        tags = run_tags(run_name, command, dispnet_work, source)
    metrics_collector = ThreadStats(namespace='dispnet', constant_tags=tags)
    metrics_collector.start(flush_interval=flush_interval, disabled=disabled)
    return metrics_collector
