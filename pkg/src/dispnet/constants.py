import os
import platform

# Datadog metric keys
TRAIN_STEP_TIME = 'dispnet.train.step.time'
TRAIN_STEP_SUCCESS = 'dispnet.train.step.success'
TRAIN_STEP_FAULT = 'dispnet.train.step.fault'
TRAIN_LOSS = 'dispnet.train.loss'
EVAL_SAMPLE = 'dispnet.eval.sample'
EVAL_TIME = 'dispnet.eval.time'
COMPLETE_TIME = 'dispnet.complete.time'

DATADOG_API_KEY = os.getenv('DATADOG_API_KEY')
DATADOG_APP_KEY = os.getenv('DATADOG_APP_KEY')

PLATFORM_MACHINE = platform.machine()
HOSTNAME = os.getenv('HOSTNAME', 'localhost')


def dnenv(name, default=None):
    return os.getenv('DISPNET_' + name, default)


DISPNET_WORK = dnenv('WORK', 'local')
VERBOSE_METRICS = bool(dnenv('VERBOSE_METRICS', False))


def worker_count() -> int:
    """Number of data-parallel workers, read on every call so tests can override it"""
    try:
        return max(1, int(dnenv('WORKERS', '1')))
    except ValueError:
        return 1


# Operator defaults
KNN_K = 16
ALPHA = 1.0
BETA = 1e-3
DELTA_INIT_RANGE = 0.1
SIGMA_INIT_RANGE = 0.5

# Loss and metric defaults
LOG_CLAMP = 1e-7
GAMMA_NUMERATOR = 0.01
FSCORE_THRESHOLD = 0.01
FSCORE_SLACK = 1e-9
CHAMFER_L1_SCALE = 1e3
CHAMFER_L2_OBJECT_SCALE = 1e4
CHAMFER_L2_SCENE_SCALE = 1e3

# Semantic scene completion classes, empty space excluded
NYU_CLASSES = (
    'ceiling',
    'floor',
    'wall',
    'window',
    'chair',
    'bed',
    'sofa',
    'table',
    'tvs',
    'furniture',
    'objects',
)

# Exit codes of the command line surface
EXIT_OK = 0
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_CONFIG = 4
