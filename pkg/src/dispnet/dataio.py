"""Point-cloud files and dataset directories.

PLY files carry ``x``, ``y``, ``z`` vertex properties and optionally an integer
``class`` property. Datasets follow ``<root>/<split>/partial/*.ply`` paired by
file name with ``<root>/<split>/complete/*.ply``; per-point labels come from
``<root>/<split>/labels/*.ply`` when present, else from the complete file.
"""
import io
import logging
import os
from typing import Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
import plyfile
from plyfile import PlyData, PlyElement
from pydantic import BaseModel, Field

from .errors import ContractError, DataIOError, ManifestError, PlyParseError
from .filesystem import OutputFile, write_text

logger = logging.getLogger(__name__)

COORDINATES = ('x', 'y', 'z')
CLASS_PROPERTY = 'class'


class Sample(NamedTuple):
    """One training or evaluation pair; ``labels`` index the complete cloud's points"""
    partial: 'np.ndarray'
    complete: 'np.ndarray'
    labels: 'Optional[np.ndarray]' = None
    name: 'str' = 'sample'


class PlyCloud(NamedTuple):
    points: 'np.ndarray'
    labels: 'Optional[np.ndarray]' = None

    @property
    def n_classes(self) -> 'Optional[int]':
        if self.labels is None:
            return None
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _offset(err: 'Exception') -> 'Optional[str]':
    line = getattr(err, 'line', None)
    if line is not None:
        return f'header line {line}'
    row = getattr(err, 'row', None)
    if row is not None:
        element = getattr(err, 'element', None)
        name = getattr(element, 'name', element)
        return f'{name} row {row}'
    return None


def read_ply(path: 'str') -> 'PlyCloud':
    """Vertices of an ASCII or binary little-endian PLY file; unknown properties are skipped"""
    if not os.path.isfile(path):
        raise DataIOError(f'no such PLY file: {path}')
    try:
        data = PlyData.read(path)
    except plyfile.PlyParseError as e:
        raise PlyParseError(path, str(e), _offset(e)) from e
    except (ValueError, EOFError, UnicodeDecodeError) as e:
        raise PlyParseError(path, str(e)) from e
    except OSError as e:
        raise DataIOError(f'cannot read {path}: {e}') from e

    if 'vertex' not in data:
        raise PlyParseError(path, 'no vertex element', 'header')
    vertex = data['vertex'].data
    names = vertex.dtype.names or ()
    for axis in COORDINATES:
        if axis not in names:
            raise PlyParseError(path, f'missing coordinate property {axis!r}', 'header')
        if vertex.dtype[axis].kind != 'f':
            raise PlyParseError(path, f'coordinate property {axis!r} is {vertex.dtype[axis]}, not floating point',
                                'header')
    points = np.stack([np.asarray(vertex[a], dtype=np.float64) for a in COORDINATES], axis=1)
    labels = None
    if CLASS_PROPERTY in names:
        if vertex.dtype[CLASS_PROPERTY].kind not in 'iu':
            raise PlyParseError(path, f'{CLASS_PROPERTY!r} property must be an integer', 'header')
        labels = np.asarray(vertex[CLASS_PROPERTY], dtype=np.int64)
    return PlyCloud(points, labels)


def write_ply(path: 'str', cloud: 'np.ndarray', labels: 'Optional[np.ndarray]' = None, binary: 'bool' = True) -> None:
    """Float64 coordinates and an optional int32 class property"""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ContractError(f'PLY output needs an (n, 3) cloud, got {cloud.shape}')
    fields = [(a, '<f8') for a in COORDINATES]
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape != (cloud.shape[0], ):
            raise ContractError(f'{labels.shape[0]} labels for {cloud.shape[0]} points')
        fields.append((CLASS_PROPERTY, '<i4'))
    vertex = np.empty(cloud.shape[0], dtype=fields)
    for i, a in enumerate(COORDINATES):
        vertex[a] = cloud[:, i]
    if labels is not None:
        vertex[CLASS_PROPERTY] = labels
    ply = PlyData([PlyElement.describe(vertex, 'vertex')], text=not binary, byte_order='<')
    try:
        with OutputFile(path) as tmp:
            ply.write(tmp)
    except OSError as e:
        raise DataIOError(f'cannot write {path}: {e}') from e


def write_xyz(path: 'str', cloud: 'np.ndarray', labels: 'Optional[np.ndarray]' = None) -> None:
    """Whitespace-separated ``x y z [class]`` rows for plotting tools"""
    cloud = np.asarray(cloud, dtype=np.float64)
    buf = io.StringIO()
    if labels is None:
        np.savetxt(buf, cloud, fmt='%.9g')
    else:
        rows = np.column_stack([cloud, np.asarray(labels, dtype=np.float64)])
        np.savetxt(buf, rows, fmt=['%.9g', '%.9g', '%.9g', '%d'])
    try:
        write_text(path, buf.getvalue())
    except OSError as e:
        raise DataIOError(f'cannot write {path}: {e}') from e


class Transform(NamedTuple):
    center: 'np.ndarray'
    scale: 'float'

    def apply(self, cloud: 'np.ndarray') -> 'np.ndarray':
        return (np.asarray(cloud, dtype=np.float64) - self.center) / self.scale

    def invert(self, cloud: 'np.ndarray') -> 'np.ndarray':
        return np.asarray(cloud, dtype=np.float64) * self.scale + self.center


def normalize(cloud: 'np.ndarray') -> 'Tuple[np.ndarray, Transform]':
    """Center on the bounding box and scale so the longest axis spans [-1, 1]"""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[0] == 0:
        raise ContractError(f'cannot normalize cloud of shape {cloud.shape}')
    low, high = cloud.min(axis=0), cloud.max(axis=0)
    scale = float(np.max(high - low)) / 2.0
    if scale <= 0:
        raise ContractError('cannot normalize a cloud with zero extent')
    transform = Transform((low + high) / 2.0, scale)
    return transform.apply(cloud), transform


def denormalize(cloud: 'np.ndarray', transform: 'Transform') -> 'np.ndarray':
    return transform.invert(cloud)


def resample(cloud: 'np.ndarray', count: 'int', rng: 'np.random.Generator') -> 'np.ndarray':
    """Indices bringing ``cloud`` to ``count`` rows

    Short clouds keep every point and gain uniformly drawn duplicates; long
    clouds keep a uniformly drawn subset in original order.
    """
    n = len(cloud)
    if n == 0 or count < 1:
        raise ContractError(f'cannot resample {n} points to {count}')
    if n == count:
        return np.arange(n)
    if n < count:
        return np.concatenate([np.arange(n), rng.integers(0, n, size=count - n)])
    return np.sort(rng.choice(n, size=count, replace=False))


class ManifestRecord(BaseModel):
    name: str
    partial: str
    complete: str
    labels: Optional[str] = None


class DatasetManifest(BaseModel):
    """Paired files of one split and the point counts they are resampled to"""
    root: str
    split: str
    input_points: int = Field(gt=0)
    output_points: int = Field(gt=0)
    records: List[ManifestRecord] = Field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def save(self, path: 'str') -> None:
        write_text(path, self.json(indent=2) + '\n')

    def load_sample(self, position: 'int', seed: 'int' = 0) -> 'Tuple[Sample, Transform]':
        """Normalized, resampled pair; the transform is derived from the partial cloud

        Only the partial cloud is guaranteed to fit the unit cube. The complete cloud
        shares its transform, so regions the scan missed can land outside [-1, 1].
        """
        record = self.records[position]
        partial = read_ply(record.partial)
        complete = read_ply(record.complete)
        labels = read_ply(record.labels).labels if record.labels else complete.labels
        if labels is not None and labels.shape[0] != complete.points.shape[0]:
            raise ManifestError(f'{record.name}: {labels.shape[0]} labels for {complete.points.shape[0]} points')

        rng = np.random.default_rng([seed, position])
        partial_points, transform = normalize(partial.points)
        if partial.points.shape[0] != self.input_points:
            logger.warning('%s: resampling partial cloud from %d to %d points', record.name, partial.points.shape[0],
                           self.input_points)
        keep_in = resample(partial_points, self.input_points, rng)
        keep_out = resample(complete.points, self.output_points, rng)
        sample = Sample(
            partial_points[keep_in],
            transform.apply(complete.points)[keep_out],
            None if labels is None else labels[keep_out],
            record.name,
        )
        return sample, transform

    def samples(self, seed: 'int' = 0) -> 'Iterator[Sample]':
        for position in range(len(self.records)):
            yield self.load_sample(position, seed)[0]


def load_manifest(root: 'str', split: 'str', input_points: 'int', output_points: 'int') -> 'DatasetManifest':
    """Pair the partial and complete files of ``split``; a missing split is an empty manifest"""
    if not os.path.isdir(root):
        raise DataIOError(f'dataset root does not exist: {root}')
    base = os.path.join(root, split)
    partial_dir, complete_dir, labels_dir = (os.path.join(base, d) for d in ('partial', 'complete', 'labels'))

    def listing(directory):
        if not os.path.isdir(directory):
            return set()
        return {f for f in os.listdir(directory) if f.lower().endswith('.ply')}

    partials, completes, label_files = listing(partial_dir), listing(complete_dir), listing(labels_dir)
    for orphan in sorted(partials ^ completes):
        side = 'partial' if orphan in partials else 'complete'
        raise ManifestError(f'orphan {side} file without counterpart: {os.path.join(base, side, orphan)}')
    records = [
        ManifestRecord(
            name=os.path.splitext(name)[0],
            partial=os.path.join(partial_dir, name),
            complete=os.path.join(complete_dir, name),
            labels=os.path.join(labels_dir, name) if name in label_files else None,
        ) for name in sorted(partials)
    ]
    logger.info('manifest %s/%s: %d pairs', root, split, len(records))
    return DatasetManifest(root=root, split=split, input_points=input_points, output_points=output_points,
                           records=records)
