"""Binary checkpoint files.

Layout: 8-byte magic ``DSPNCKPT``, little-endian u32 format version, u32 header
length, UTF-8 JSON header, little-endian float64 payload (parameters in layout
order, then the optimizer's first and second moments), and an 8-byte blake2b
digest of everything before it.
"""
import hashlib
import json
import logging
import struct
from typing import Any, Dict, List, NamedTuple, Optional

import numpy as np

from .config import ArchitectureConfig, OptimizerConfig
from .errors import CheckpointCorruptError, CheckpointError, CheckpointVersionError, ConfigMismatchError
from .filesystem import write_bytes
from .model import Adam, Model, build_direct

logger = logging.getLogger(__name__)

MAGIC = b'DSPNCKPT'
FORMAT_VERSION = 1
DIGEST_SIZE = 8
_PREFIX = struct.Struct('<8sII')
_LE_F8 = np.dtype('<f8')


class Checkpoint(NamedTuple):
    model: 'Model'
    optimizer: 'Adam'
    seed: 'int'
    rng_state: 'Optional[Dict[str, Any]]'
    run_config: 'Optional[Dict[str, Any]]'


def _digest(blob: 'bytes') -> 'bytes':
    return hashlib.blake2b(blob, digest_size=DIGEST_SIZE).digest()


def encode(model: 'Model',
           optimizer: 'Optional[Adam]' = None,
           seed: 'int' = 0,
           rng: 'Optional[np.random.Generator]' = None,
           run_config: 'Optional[Dict[str, Any]]' = None) -> 'bytes':
    optimizer = optimizer or Adam()
    params = model.parameters()
    header = {
        'architecture': json.loads(model.config.json(by_alias=False)),
        'run': run_config,
        'parameters': [[name, list(t.shape)] for name, t in params.items()],
        'optimizer': {
            'config': json.loads(optimizer.config.json(by_alias=False)),
            'step': optimizer.step_count,
            'moments': sorted(optimizer.first),
        },
        'seed': seed,
        'rng_state': None if rng is None else rng.bit_generator.state,
    }
    head = json.dumps(header, sort_keys=True).encode('utf-8')
    chunks = [t.data for t in params.values()]
    for name in header['optimizer']['moments']:
        chunks.extend([optimizer.first[name], optimizer.second[name]])
    payload = b''.join(np.ascontiguousarray(c, dtype=_LE_F8).tobytes() for c in chunks)
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + payload
    return body + _digest(body)


def save_checkpoint(path: 'str', model: 'Model', optimizer: 'Optional[Adam]' = None, seed: 'int' = 0,
                    rng: 'Optional[np.random.Generator]' = None,
                    run_config: 'Optional[Dict[str, Any]]' = None) -> None:
    """Write a checkpoint atomically; an existing file is replaced only once the new one is complete"""
    blob = encode(model, optimizer, seed=seed, rng=rng, run_config=run_config)
    try:
        write_bytes(path, blob)
    except OSError as e:
        raise CheckpointError(f'cannot write checkpoint {path}: {e}') from e
    logger.info('wrote checkpoint %s (%d bytes)', path, len(blob))


def decode(blob: 'bytes', source: 'str' = '<bytes>') -> 'Checkpoint':
    if len(blob) < _PREFIX.size + DIGEST_SIZE:
        raise CheckpointCorruptError(f'{source}: file too short to be a checkpoint')
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointCorruptError(f'{source}: bad magic {magic!r}')
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f'{source}: checkpoint format version {version} is not supported (expected {FORMAT_VERSION}); '
            f're-save it with a release that writes version {FORMAT_VERSION}')
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if _digest(body) != digest:
        raise CheckpointCorruptError(f'{source}: checksum mismatch (truncated or modified file)')

    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + head_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointCorruptError(f'{source}: unreadable header: {e}') from e
    payload = np.frombuffer(body[start + head_len:], dtype=_LE_F8)

    layout: 'List' = header['parameters']
    moments: 'List[str]' = header['optimizer']['moments']
    shapes = {name: tuple(shape) for name, shape in layout}
    sizes = [int(np.prod(shape)) for _, shape in layout]
    expected = sum(sizes) + 2 * sum(int(np.prod(shapes[m])) for m in moments)
    if payload.size != expected:
        raise CheckpointCorruptError(f'{source}: payload holds {payload.size} values, layout needs {expected}')

    arch = ArchitectureConfig.parse_obj(header['architecture'])
    model = build_direct(arch)
    if [[n, list(t.shape)] for n, t in model.parameters().items()] != layout:
        raise CheckpointCorruptError(f'{source}: parameter layout does not match its architecture')

    offset = 0

    def take(shape):
        nonlocal offset
        size = int(np.prod(shape))
        value = payload[offset:offset + size].astype(np.float64).reshape(shape)
        offset += size
        return value

    model.assign({name: take(shapes[name]) for name, _ in layout})
    optimizer = Adam(OptimizerConfig.parse_obj(header['optimizer']['config']), header['optimizer']['step'])
    for name in moments:
        optimizer.first[name] = take(shapes[name])
        optimizer.second[name] = take(shapes[name])
    return Checkpoint(model, optimizer, header['seed'], header['rng_state'], header['run'])


def load_checkpoint(path: 'str') -> 'Checkpoint':
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise CheckpointError(f'cannot read checkpoint {path}: {e}') from e
    return decode(blob, source=path)


def restore_rng(state: 'Optional[Dict[str, Any]]', seed: 'int') -> 'np.random.Generator':
    rng = np.random.default_rng(seed)
    if state is not None:
        rng.bit_generator.state = state
    return rng


def check_architecture(stored: 'ArchitectureConfig', requested: 'ArchitectureConfig') -> None:
    """Refuse to pair a run configuration with a checkpoint of another architecture"""
    if stored.dict() != requested.dict():
        raise ConfigMismatchError('run configuration architecture differs from the checkpoint',
                                  f'checkpoint {stored.json()} vs config {requested.json()}')
