from typing import ClassVar, Optional, Sequence


class BaseDispnetError(Exception):
    event_name: 'ClassVar[str]' = 'dispnet'
    exit_code: 'ClassVar[int]' = 1

    def __init_subclass__(cls):
        super().__init_subclass__()
        exc_name = cls.__name__
        if exc_name.endswith('Error'):
            exc_name = exc_name[:exc_name.rindex('Error')]
        cls.event_name = exc_name.lower()


class ContractError(BaseDispnetError):
    """A caller violated an operation's precondition"""


class ShapeError(ContractError):
    """Primitive inputs do not conform to its shape rules"""
    def __init__(self, primitive: 'str', *extents: 'Sequence[int]', detail: 'str' = ''):
        self.primitive = primitive
        self.extents = tuple(tuple(e) for e in extents)
        shapes = ', '.join(str(e) for e in self.extents)
        super().__init__(f'{primitive}: incompatible extents {shapes}' + (f' ({detail})' if detail else ''))


class TapeError(ContractError):
    """Backward pass requested on a non-scalar root, a foreign tape or a consumed tape"""


class NumericFaultError(BaseDispnetError):
    """A computation produced NaN or Inf"""
    exit_code = 3

    def __init__(self, source: 'str', message: 'Optional[str]' = None):
        self.source = source
        super().__init__(message or f'non-finite value produced by {source}')


class ConfigError(BaseDispnetError):
    """Configuration failed validation"""
    exit_code = 4

    def __init__(self, message: 'str', offending: 'Optional[str]' = None):
        self.offending = offending
        super().__init__(message if offending is None else f'{message}: {offending}')


class ConfigMismatchError(ConfigError):
    """Run configuration disagrees with the architecture stored in a checkpoint"""


class DataIOError(BaseDispnetError):
    """Input could not be read or output could not be written"""
    exit_code = 2


class PlyParseError(DataIOError):
    """Malformed polygon file"""
    def __init__(self, path: 'str', message: 'str', offset: 'Optional[str]' = None):
        self.path = path
        self.offset = offset
        where = f' at {offset}' if offset else ''
        super().__init__(f'{path}{where}: {message}')


class ManifestError(DataIOError):
    """Dataset directory layout is inconsistent"""


class CheckpointError(DataIOError):
    """Checkpoint could not be written or read"""


class CheckpointCorruptError(CheckpointError):
    """Bad magic, truncated payload or checksum mismatch"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported by this release"""


class GenerationError(BaseDispnetError):
    """Synthetic sample specification cannot be realized"""
