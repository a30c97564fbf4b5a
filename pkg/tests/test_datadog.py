from unittest import TestCase

from datadog import ThreadStats

from dispnet.constants import TRAIN_STEP_SUCCESS, TRAIN_STEP_TIME
from dispnet.datadog import configure_metrics, run_tags

DATADOG_API_KEY = 'my_api_key'
DATADOG_APP_KEY = 'my_app_key'

RUN_NAME = 'desk-overfit'
COMMAND = 'train'
# Set the environment name, "local" is used for testing
DISPNET_WORK = 'local'
# Set the hostname, "localhost" is used for testing
SOURCE = 'localhost'


class TestDatadog(TestCase):

    def setUp(self):
        # disabled keeps the flush thread from shipping anything during tests
        self.collector = configure_metrics(DATADOG_API_KEY,
                                           DATADOG_APP_KEY,
                                           RUN_NAME,
                                           COMMAND,
                                           DISPNET_WORK,
                                           SOURCE,
                                           disabled=True)

    def tearDown(self):
        self.collector.flush()
        self.collector = None

    def test_datadog_collector_config(self):
        assert self.collector is not None
        assert isinstance(self.collector, ThreadStats)
        assert f'run_name:{RUN_NAME}' in self.collector.constant_tags
        assert 'testing' in self.collector.constant_tags

    def test_datadog_context_manager(self):
        with self.collector.timer(TRAIN_STEP_TIME):
            self.collector.increment(TRAIN_STEP_SUCCESS, tags=['command:train'])

    def test_without_keys_collector_is_disabled(self):
        collector = configure_metrics(None, None)
        assert isinstance(collector, ThreadStats)
        collector.increment(TRAIN_STEP_SUCCESS)
        collector.flush()

    def test_run_tags(self):
        tags = run_tags(RUN_NAME, 'eval', 'production', SOURCE)
        assert 'command:eval' in tags
        assert 'testing' not in tags
