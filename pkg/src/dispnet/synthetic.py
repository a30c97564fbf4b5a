"""Seeded partial/complete pairs sampled from simple surfaces.

Every shape is a set of primitives, each a union of flat or curved patches with
one class id. The complete cloud is an area-weighted surface sample; the partial
cloud keeps only points on the camera side of the plane ``p . camera >= cut``.
"""
import logging
from typing import Callable, List, NamedTuple, Sequence, Tuple

import numpy as np

from .config import SyntheticSpec
from .dataio import Sample, resample
from .errors import GenerationError

logger = logging.getLogger(__name__)


class Patch(NamedTuple):
    area: 'float'
    sample: 'Callable[[np.random.Generator, int], np.ndarray]'


class Primitive(NamedTuple):
    name: 'str'
    patches: 'Sequence[Patch]'

    @property
    def area(self) -> 'float':
        return float(sum(p.area for p in self.patches))


class SyntheticPair(NamedTuple):
    partial: 'np.ndarray'
    complete: 'np.ndarray'
    labels: 'np.ndarray'


def rectangle(origin, u, v) -> 'Patch':
    origin, u, v = (np.asarray(a, dtype=np.float64) for a in (origin, u, v))

    def sample(rng, n):
        ab = rng.uniform(0.0, 1.0, size=(n, 2))
        return origin + ab[:, :1] * u + ab[:, 1:] * v

    return Patch(float(np.linalg.norm(np.cross(u, v))), sample)


def plane(center=(0.0, 0.0, 0.0), half=(1.0, 1.0)) -> 'Primitive':
    cx, cy, cz = center
    hx, hy = half
    return Primitive('plane', [rectangle((cx - hx, cy - hy, cz), (2 * hx, 0, 0), (0, 2 * hy, 0))])


def box(center=(0.0, 0.0, 0.0), half=(0.8, 0.5, 0.6)) -> 'Primitive':
    c, h = np.asarray(center, dtype=np.float64), np.asarray(half, dtype=np.float64)
    low = c - h
    ex, ey, ez = np.diag(2 * h)
    faces = [
        rectangle(low, ex, ey), rectangle(low + ez, ex, ey),
        rectangle(low, ex, ez), rectangle(low + ey, ex, ez),
        rectangle(low, ey, ez), rectangle(low + ex, ey, ez),
    ]  # yapf: disable
    return Primitive('box', faces)


def cylinder(center=(0.0, 0.0, 0.0), radius=0.6, half_height=0.8) -> 'Primitive':
    c = np.asarray(center, dtype=np.float64)

    def lateral(rng, n):
        theta = rng.uniform(0.0, 2 * np.pi, size=n)
        z = rng.uniform(-half_height, half_height, size=n)
        return c + np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)

    def cap(height):
        def sample(rng, n):
            theta = rng.uniform(0.0, 2 * np.pi, size=n)
            r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=n))
            return c + np.stack([r * np.cos(theta), r * np.sin(theta), np.full(n, height)], axis=1)

        return Patch(np.pi * radius**2, sample)

    return Primitive('cylinder', [
        Patch(2 * np.pi * radius * 2 * half_height, lateral),
        cap(-half_height),
        cap(half_height),
    ])


def room() -> 'List[Primitive]':
    """Floor, back wall and a box standing on the floor"""
    floor = Primitive('floor', [rectangle((-1.0, -0.9, -0.9), (2.0, 0, 0), (0, 0, 1.8))])
    wall = Primitive('wall', [rectangle((-1.0, -0.9, -0.9), (2.0, 0, 0), (0, 1.8, 0))])
    furniture = box(center=(0.3, -0.6, 0.3), half=(0.3, 0.3, 0.3))
    return [floor, wall, Primitive('furniture', furniture.patches)]


FAMILIES = {
    'plane': lambda: [plane()],
    'box': lambda: [box()],
    'cylinder': lambda: [cylinder()],
    'room': room,
}


def allocate(total: 'int', weights: 'np.ndarray') -> 'np.ndarray':
    """Largest-remainder split of ``total`` proportional to ``weights``, at least one each"""
    if total < len(weights):
        raise GenerationError(f'{total} points cannot cover {len(weights)} surfaces')
    share = weights / weights.sum() * (total - len(weights))
    counts = np.floor(share).astype(np.int64)
    remainder = total - len(weights) - counts.sum()
    counts[np.argsort(-(share - counts), kind='stable')[:remainder]] += 1
    return counts + 1


def sample_surface(primitives: 'Sequence[Primitive]', count: 'int',
                   rng: 'np.random.Generator') -> 'Tuple[np.ndarray, np.ndarray]':
    """Area-weighted surface points and the index of the primitive each came from"""
    patches = [(i, patch) for i, prim in enumerate(primitives) for patch in prim.patches]
    counts = allocate(count, np.array([patch.area for _, patch in patches]))
    points, owner = [], []
    for (i, patch), n in zip(patches, counts):
        points.append(patch.sample(rng, int(n)))
        owner.append(np.full(int(n), i, dtype=np.int64))
    return np.concatenate(points), np.concatenate(owner)


def generate_synthetic(spec: 'SyntheticSpec') -> 'SyntheticPair':
    """Complete cloud, its camera-side partial view and per-point primitive labels"""
    primitives = FAMILIES[spec.family]()
    class_ids = list(range(len(primitives))) if spec.class_ids is None else list(spec.class_ids)
    if len(class_ids) != len(primitives):
        raise GenerationError(f'{spec.family} has {len(primitives)} primitives but {len(class_ids)} class ids')
    camera = np.asarray(spec.camera, dtype=np.float64)
    camera /= np.linalg.norm(camera)

    rng = np.random.default_rng(spec.seed)
    complete, owner = sample_surface(primitives, spec.complete_points, rng)
    labels = np.asarray(class_ids, dtype=np.int64)[owner]

    visible = np.flatnonzero(complete @ camera >= spec.cut)
    if visible.size == 0:
        raise GenerationError(f'no surface of {spec.family} is visible from camera {tuple(spec.camera)}')
    if visible.size < spec.partial_points:
        logger.debug('only %d visible points for a %d-point partial view', visible.size, spec.partial_points)
    partial = complete[visible[resample(visible, spec.partial_points, rng)]]
    return SyntheticPair(partial, complete, labels)


def synthetic_sample(spec: 'SyntheticSpec', name: 'str' = 'synthetic') -> 'Sample':
    pair = generate_synthetic(spec)
    return Sample(pair.partial, pair.complete, pair.labels, name)
