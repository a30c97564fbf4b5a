"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tape` records every primitive application whose inputs require
gradients while it is the active tape. :func:`backward` walks the records of
the tape that produced the root in reverse order, visiting each node once.

Primitives live in a registry keyed by name; each one supplies ``forward`` and
``vjp`` (vector-Jacobian product). Composite operations elsewhere in the package
are built exclusively from these primitives.
"""
import contextvars
import logging
from typing import Any, ClassVar, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, NumericFaultError, ShapeError, TapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_ACTIVE_TAPE: 'contextvars.ContextVar[Optional[Tape]]' = contextvars.ContextVar('dispnet_tape', default=None)


class Tensor:
    """Immutable dense array of float64 values, optionally tracked for gradients"""
    __slots__ = ('data', 'requires_grad', '_tape', '_node')

    def __init__(self, data, requires_grad: 'bool' = False):
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NumericFaultError('tensor', 'tensor created from non-finite values')
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._node = -1

    @classmethod
    def _wrap(cls, arr: 'np.ndarray', requires_grad: 'bool') -> 'Tensor':
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE)
        arr.setflags(write=False)
        t.data = arr
        t.requires_grad = requires_grad
        t._tape = None
        t._node = -1
        return t

    @property
    def shape(self) -> 'Tuple[int, ...]':
        return self.data.shape

    @property
    def ndim(self) -> 'int':
        return self.data.ndim

    @property
    def size(self) -> 'int':
        return self.data.size

    def item(self) -> 'float':
        return float(self.data)

    def numpy(self) -> 'np.ndarray':
        return self.data.copy()

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data, False)

    def __repr__(self):
        return f'Tensor(shape={self.shape}, requires_grad={self.requires_grad})'

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / other)


TensorLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: 'TensorLike') -> 'Tensor':
    return value if isinstance(value, Tensor) else Tensor(value)


class Record(NamedTuple):
    primitive: 'Primitive'
    inputs: 'Tuple[Tensor, ...]'
    output: 'Tensor'
    ctx: 'Any'
    attrs: 'Dict[str, Any]'


class Tape:
    """Define-by-run recording of primitive applications

    Use as a context manager; the tape is active for the current thread (and
    asyncio task) only, so independent workers record on independent tapes::

        with Tape():
            loss = reduce_sum(x * x)
        grads = backward(loss)

    ``record_all`` also records applications on constants, which exposes every
    discrete choice of a computation to inspection.
    """
    def __init__(self, record_all: 'bool' = False):
        self.record_all = record_all
        self.records: 'List[Record]' = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> 'Tape':
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc, value, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def record(self, primitive: 'Primitive', inputs: 'Tuple[Tensor, ...]', output: 'Tensor', ctx, attrs):
        if self.consumed:
            raise TapeError('cannot record on a tape that has already been consumed')
        output._tape = self
        output._node = len(self.records)
        self.records.append(Record(primitive, inputs, output, ctx, attrs))


def active_tape() -> 'Optional[Tape]':
    return _ACTIVE_TAPE.get()


class GradientMap(dict):
    """Maps leaf tensors to gradients; leaves never reached map to zeros"""
    def __missing__(self, tensor: 'Tensor') -> 'np.ndarray':
        return np.zeros(tensor.shape, dtype=DTYPE)


def unbroadcast(grad: 'np.ndarray', shape: 'Tuple[int, ...]') -> 'np.ndarray':
    """Sum out dimensions that were broadcast"""
    if grad.shape == shape:
        return grad
    if shape == ():
        return np.asarray(grad.sum(), dtype=DTYPE)
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    reduce_dims = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if reduce_dims:
        grad = grad.sum(axis=reduce_dims, keepdims=True)
    return grad.reshape(shape)


class Primitive:
    name: 'ClassVar[str]'
    returns_index: 'ClassVar[bool]' = False

    def forward(self, *arrays, **attrs) -> 'Tuple[np.ndarray, Any]':
        raise NotImplementedError

    def vjp(self, ctx, grad: 'np.ndarray', *arrays, **attrs) -> 'Tuple[Optional[np.ndarray], ...]':
        raise NotImplementedError


PRIMITIVES: 'Dict[str, Primitive]' = {}


def register(cls):
    PRIMITIVES[cls.name] = cls()
    return cls


def _broadcast_shape(name, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape, detail='not broadcastable') from None


def _check_axis(name, x, axis):
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ShapeError(name, x.shape, detail=f'axis {axis} out of range')
    return axis % x.ndim


@register
class Add(Primitive):
    name = 'add'

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a + b, None

    def vjp(self, ctx, grad, a, b):
        return grad, grad


@register
class Mul(Primitive):
    name = 'mul'

    def forward(self, a, b):
        _broadcast_shape(self.name, a, b)
        return a * b, None

    def vjp(self, ctx, grad, a, b):
        return grad * b, grad * a


@register
class Matvec(Primitive):
    """``M (m, n)`` applied to every trailing vector of ``x (..., n)``"""
    name = 'matvec'

    def forward(self, m, x):
        if m.ndim != 2 or x.ndim < 1 or x.shape[-1] != m.shape[1]:
            raise ShapeError(self.name, m.shape, x.shape)
        return x @ m.T, None

    def vjp(self, ctx, grad, m, x):
        rows, cols = m.shape
        gm = grad.reshape(-1, rows).T @ x.reshape(-1, cols)
        return gm, grad @ m


@register
class EuclideanNorm(Primitive):
    """Norm over the last axis; the gradient at a zero vector is defined as zero"""
    name = 'euclidean_norm'

    def forward(self, x):
        if x.ndim < 1:
            raise ShapeError(self.name, x.shape, detail='needs at least one axis')
        out = np.sqrt(np.sum(x * x, axis=-1))
        return out, out

    def vjp(self, ctx, grad, x):
        nonzero = ctx > 0
        safe = np.where(nonzero, ctx, 1.0)
        scale = np.where(nonzero, grad / safe, 0.0)
        return (scale[..., None] * x, )


@register
class Tanh(Primitive):
    name = 'tanh'

    def forward(self, x):
        out = np.tanh(x)
        return out, out

    def vjp(self, ctx, grad, x):
        return (grad * (1.0 - ctx * ctx), )


@register
class Reciprocal(Primitive):
    name = 'reciprocal'

    def forward(self, x):
        out = 1.0 / x
        return out, out

    def vjp(self, ctx, grad, x):
        return (-grad * ctx * ctx, )


@register
class Sum(Primitive):
    name = 'sum'

    def forward(self, x, axis=None):
        if axis is not None:
            _check_axis(self.name, x, axis)
        return np.sum(x, axis=axis), None

    def vjp(self, ctx, grad, x, axis=None):
        if axis is None:
            return (np.broadcast_to(grad, x.shape).copy(), )
        axis = axis % x.ndim
        return (np.broadcast_to(np.expand_dims(grad, axis), x.shape).copy(), )


@register
class Gather(Primitive):
    """``np.take`` along ``axis``; indices are constants"""
    name = 'gather'

    def forward(self, x, indices=None, axis=0):
        axis = _check_axis(self.name, x, axis)
        idx = np.asarray(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
            raise ShapeError(self.name, x.shape, idx.shape, detail=f'index out of range along axis {axis}')
        return np.take(x, idx, axis=axis), None

    def vjp(self, ctx, grad, x, indices=None, axis=0):
        axis = axis % x.ndim
        idx = np.asarray(indices)
        gx = np.zeros(x.shape, dtype=DTYPE)
        target = np.moveaxis(gx, axis, 0)
        source = np.moveaxis(grad, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(target, idx, source)
        return (gx, )


@register
class SelectMinIndex(Primitive):
    """Minimum along ``axis``; the index is returned as a constant"""
    name = 'select_min_index'
    returns_index = True

    def forward(self, x, axis=-1):
        axis = _check_axis(self.name, x, axis)
        if x.shape[axis] == 0:
            raise ShapeError(self.name, x.shape, detail='empty reduction axis')
        index = np.argmin(x, axis=axis)
        values = np.take_along_axis(x, np.expand_dims(index, axis), axis=axis).squeeze(axis)
        return values, index

    def vjp(self, ctx, grad, x, axis=-1):
        axis = axis % x.ndim
        gx = np.zeros(x.shape, dtype=DTYPE)
        np.put_along_axis(gx, np.expand_dims(ctx, axis), np.expand_dims(grad, axis), axis=axis)
        return (gx, )


@register
class Log(Primitive):
    name = 'log'

    def forward(self, x):
        return np.log(x), None

    def vjp(self, ctx, grad, x):
        return (grad / x, )


@register
class Clip(Primitive):
    name = 'clip'

    def forward(self, x, low=None, high=None):
        return np.clip(x, low, high), None

    def vjp(self, ctx, grad, x, low=None, high=None):
        inside = (x >= low) & (x <= high)
        return (np.where(inside, grad, 0.0), )


@register
class Concat(Primitive):
    name = 'concat'

    def forward(self, *xs, axis=0):
        if not xs:
            raise ShapeError(self.name, detail='nothing to concatenate')
        first = xs[0]
        axis = _check_axis(self.name, first, axis)
        for x in xs[1:]:
            if x.ndim != first.ndim or x.shape[:axis] + x.shape[axis + 1:] != first.shape[:axis] + first.shape[axis + 1:]:
                raise ShapeError(self.name, first.shape, x.shape)
        return np.concatenate(xs, axis=axis), None

    def vjp(self, ctx, grad, *xs, axis=0):
        axis = axis % xs[0].ndim
        bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return tuple(np.split(grad, bounds, axis=axis))


@register
class Reshape(Primitive):
    name = 'reshape'

    def forward(self, x, shape=None):
        shape = tuple(shape)
        if int(np.prod(shape)) != x.size:
            raise ShapeError(self.name, x.shape, shape, detail='element count differs')
        return x.reshape(shape), None

    def vjp(self, ctx, grad, x, shape=None):
        return (grad.reshape(x.shape), )


def primitive_apply(op: 'str', *inputs: 'TensorLike', **attrs):
    """Apply the registered primitive ``op``, recording it on the active tape when needed

    ``select_min_index`` returns ``(index, values)``; every other primitive returns a Tensor.
    """
    try:
        primitive = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f'unknown primitive {op!r}') from None
    tensors = tuple(as_tensor(x) for x in inputs)
    arrays = tuple(t.data for t in tensors)
    with np.errstate(all='ignore'):
        out, ctx = primitive.forward(*arrays, **attrs)
    out = np.asarray(out, dtype=DTYPE)
    if not np.all(np.isfinite(out)):
        raise NumericFaultError(op)

    tape = _ACTIVE_TAPE.get()
    requires = tape is not None and any(t.requires_grad for t in tensors)
    result = Tensor._wrap(out, requires)
    if requires or (tape is not None and tape.record_all):
        tape.record(primitive, tensors, result, ctx, attrs)
    if primitive.returns_index:
        return ctx, result
    return result


def backward(root: 'Tensor', leaves: 'Optional[Iterable[Tensor]]' = None) -> 'GradientMap':
    """Gradients of the scalar ``root`` with respect to every leaf that requires them

    Leaves passed in ``leaves`` always appear in the result, with zeros when
    ``root`` does not depend on them. A tape can be consumed once; a second
    backward pass over it raises :class:`TapeError`.
    """
    if root.ndim != 0:
        raise TapeError(f'backward needs a scalar root, got shape {root.shape}')
    tape = root._tape
    if tape is None:
        raise TapeError('root was not produced on a tape')
    if tape.consumed:
        raise TapeError('tape already consumed by a previous backward pass')

    result = GradientMap()
    pending: 'Dict[int, np.ndarray]' = {id(root): np.ones((), dtype=DTYPE)}
    for rec in reversed(tape.records[:root._node + 1]):
        grad = pending.pop(id(rec.output), None)
        if grad is None:
            continue
        arrays = tuple(t.data for t in rec.inputs)
        input_grads = rec.primitive.vjp(rec.ctx, grad, *arrays, **rec.attrs)
        for t, ig in zip(rec.inputs, input_grads):
            if ig is None or not t.requires_grad:
                continue
            ig = unbroadcast(np.asarray(ig, dtype=DTYPE), t.shape)
            if t._tape is tape:
                key = id(t)
                pending[key] = pending[key] + ig if key in pending else ig
            elif t in result:
                result[t] = result[t] + ig
            else:
                result[t] = ig

    tape.consumed = True
    tape.records = []
    for leaf in leaves or ():
        if leaf not in result:
            result[leaf] = np.zeros(leaf.shape, dtype=DTYPE)
    return result


def accumulate_gradients(maps: 'Iterable[GradientMap]') -> 'GradientMap':
    """Merge per-worker gradient maps by summation (single writer)"""
    merged = GradientMap()
    for grads in maps:
        for leaf, g in grads.items():
            merged[leaf] = merged[leaf] + g if leaf in merged else g.copy()
    return merged


def add(a: 'TensorLike', b: 'TensorLike') -> 'Tensor':
    return primitive_apply('add', a, b)


def mul(a: 'TensorLike', b: 'TensorLike') -> 'Tensor':
    return primitive_apply('mul', a, b)


def neg(a: 'TensorLike') -> 'Tensor':
    return primitive_apply('mul', a, -1.0)


def matvec(m: 'TensorLike', x: 'TensorLike') -> 'Tensor':
    return primitive_apply('matvec', m, x)


def euclidean_norm(x: 'TensorLike') -> 'Tensor':
    return primitive_apply('euclidean_norm', x)


def tanh(x: 'TensorLike') -> 'Tensor':
    return primitive_apply('tanh', x)


def reciprocal(x: 'TensorLike') -> 'Tensor':
    return primitive_apply('reciprocal', x)


def reduce_sum(x: 'TensorLike', axis: 'Optional[int]' = None) -> 'Tensor':
    return primitive_apply('sum', x, axis=axis)


def gather(x: 'TensorLike', indices, axis: 'int' = 0) -> 'Tensor':
    return primitive_apply('gather', x, indices=np.asarray(indices, dtype=np.intp), axis=axis)


def select_min_index(x: 'TensorLike', axis: 'int' = -1) -> 'Tuple[np.ndarray, Tensor]':
    return primitive_apply('select_min_index', x, axis=axis)


def log(x: 'TensorLike') -> 'Tensor':
    return primitive_apply('log', x)


def clip(x: 'TensorLike', low: 'float', high: 'float') -> 'Tensor':
    return primitive_apply('clip', x, low=low, high=high)


def concat(xs: 'Sequence[TensorLike]', axis: 'int' = 0) -> 'Tensor':
    return primitive_apply('concat', *xs, axis=axis)


def reshape(x: 'TensorLike', shape: 'Sequence[int]') -> 'Tensor':
    return primitive_apply('reshape', x, shape=tuple(shape))


def sigmoid(x: 'TensorLike') -> 'Tensor':
    """Logistic squashing composed from tanh: (1 + tanh(x / 2)) / 2"""
    return mul(add(tanh(mul(x, 0.5)), 1.0), 0.5)
