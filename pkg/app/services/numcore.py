"""
Dense float64 tensors with reverse-mode automatic differentiation.

Each op builds a new Tensor that remembers its parents and a closure mapping
the output gradient to parent gradients. ``Tensor.backward`` records the tape
of reachable nodes, sorted by creation order, and walks it in reverse exactly
once per node.

Broadcasting follows numpy for add/mul/div and batched matmul; nothing else
broadcasts.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from app.core.errors import ContractViolation, DimensionError, MaskError
from app.core.logging import get_logger

logger = get_logger(__name__)

DTYPE = np.float64
LAYER_NORM_EPS = 1e-5

_sequence = itertools.count()

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]


class Tensor:
    """A float64 array plus the bookkeeping needed for backpropagation."""

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _op: str = ''):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE else data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Optional[Callable[[np.ndarray], tuple]] = None
        self._op = _op
        self._seq = next(_sequence)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}, op={self._op or 'leaf'})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError('item (needs a single element)', self.shape)
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError('backward (implicit seed needs a scalar)', self.shape)
            grad = np.ones_like(self.data)
        Tape.record(self).run(self, np.asarray(grad, dtype=DTYPE))

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes if axes else None)


@dataclass
class Tape:
    """Nodes reachable from a root, in creation order."""
    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        seen: set[int] = set()
        stack = [root]
        nodes = []
        while stack:
            node = stack.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq)
        return cls(nodes)

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        pending: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf: accumulate
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, _parents=tuple(parents) if requires_grad else (), _op=op)
    if requires_grad:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# elementwise

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('add', a, b)
    return _make(a.data + b.data, (a, b), 'add',
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), 'neg', lambda g: (-g,))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('sub', a, b)
    return _make(a.data - b.data, (a, b), 'sub',
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('mul', a, b)
    return _make(a.data * b.data, (a, b), 'mul',
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('div', a, b)
    out = a.data / b.data
    return _make(out, (a, b), 'div',
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), 'exp', lambda g: (g * out,))


def ln(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), 'ln', lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), 'sqrt', lambda g: (g * 0.5 / out,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    positive = a.data > 0
    return _make(np.where(positive, a.data, 0.0), (a,), 'relu', lambda g: (g * positive,))


def clamp_max(a: ArrayLike, ceiling: float) -> Tensor:
    """min(a, ceiling); gradient passes only where a < ceiling."""
    a = as_tensor(a)
    below = a.data < ceiling
    return _make(np.where(below, a.data, ceiling), (a,), 'clamp_max', lambda g: (g * below,))


# ---------------------------------------------------------------------------
# reductions and shape

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), 'sum', backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum_(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError('reshape', a.shape, tuple(shape)) from None
    return _make(out, (a,), 'reshape', lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise DimensionError(f'transpose axes {list(axes)}', a.shape)
    inverse = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), 'transpose', lambda g: (g.transpose(inverse),))


def swap_last(a: ArrayLike) -> Tensor:
    """Transpose the two trailing axes."""
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-2], axes[-1] = axes[-1], axes[-2]
    return transpose(a, axes)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise DimensionError('concat', *[p.shape for p in parts]) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _make(out, parts, 'concat', lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a: ArrayLike, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``start:stop`` along one axis."""
    a = as_tensor(a)
    axis = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[axis]:
        raise DimensionError(f'slice [{start}:{stop}] on axis {axis}', a.shape)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), 'slice', backward)


def take(a: ArrayLike, indices: np.ndarray) -> Tensor:
    """Gather rows of ``a`` (first axis) at integer ``indices`` of any shape."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[0]):
        raise DimensionError('take (index out of range)', a.shape, indices.shape)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, indices, g)
        return (full,)

    return _make(a.data[indices], (a,), 'take', backward)


def cumsum_lastdim(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.cumsum(a.data, axis=-1), (a,), 'cumsum',
                 lambda g: (np.flip(np.cumsum(np.flip(g, -1), axis=-1), -1),))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product over the trailing two axes.

    Leading (batch) axes must match exactly, or ``b`` may be a plain 2-D
    weight shared across the batch.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError('matmul', a.shape, b.shape)
    shared_weight = b.ndim == 2 and a.ndim > 2
    if not shared_weight and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError('matmul', a.shape, b.shape)

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if shared_weight:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), 'matmul', backward)


def softmax_lastdim(x: ArrayLike, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Softmax over the last axis with optional boolean mask (True = keep).

    Masked entries receive exactly zero probability.

    Raises:
        MaskError: if some row has no unmasked entry
    """
    x = as_tensor(x)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        try:
            mask = np.broadcast_to(mask, x.shape)
        except ValueError:
            raise DimensionError('softmax mask', x.shape, mask.shape) from None
        if not mask.any(axis=-1).all():
            raise MaskError("softmax row is fully masked; at least one valid entry is required")
        shifted = np.where(mask, x.data, -np.inf)
    else:
        shifted = x.data
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), 'softmax', backward)


def log_softmax_lastdim(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _make(out, (x,), 'log_softmax',
                 lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: ArrayLike, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply gamma/beta."""
    x = as_tensor(x)
    width = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    parents = [x]
    out = xhat
    if gamma is not None:
        if gamma.shape != (width,) or beta is None or beta.shape != (width,):
            raise DimensionError('layer_norm affine', x.shape, gamma.shape)
        parents += [gamma, beta]
        out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        if gamma is None:
            return (dx,)
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, parents, 'layer_norm', backward)


def l2_normalize_lastdim(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return div(x, sqrt(sum_(mul(x, x), axis=-1, keepdims=True)))


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: dict[str, float]
    worst_param: Optional[str] = None
    worst_index: Optional[tuple[int, ...]] = None
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Mapping[str, Tensor], Iterable[Tensor]],
    step: float = 1e-6,
    tol: float = 1e-5,
    floor: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare reverse-mode gradients with central finite differences.

    The per-coordinate error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
    the floor keeps round-off on near-zero gradients from dominating.

    Args:
        f: zero-argument function rebuilding the scalar loss from the current params
        params: tensors to check, by name or as a plain sequence
        step: finite-difference step, within [1e-7, 1e-4]
        tol: pass threshold for the maximum relative error
        floor: denominator floor
        max_coords: if given, check at most this many random coordinates per tensor
        seed: seed for coordinate subsampling

    Returns:
        Report with the maximum relative error overall and per tensor
    """
    if not 1e-7 <= step <= 1e-4:
        raise ContractViolation(f"finite-difference step {step} outside [1e-7, 1e-4]")
    named = dict(params) if isinstance(params, Mapping) else {str(i): p for i, p in enumerate(params)}
    for p in named.values():
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in named.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(max_rel_error=0.0, tol=tol, per_param={})
    for name, p in named.items():
        if not p.data.flags.c_contiguous:
            p.data = np.array(p.data, dtype=np.float64)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for i in coords:
            original = flat[i]
            flat[i] = original + step
            plus = f().item()
            flat[i] = original - step
            minus = f().item()
            flat[i] = original
            numeric = (plus - minus) / (2 * step)
            exact = analytic[name].reshape(-1)[i]
            err = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            report.checked += 1
            if err > worst:
                worst = err
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst_param = name
                report.worst_index = tuple(int(v) for v in np.unravel_index(i, p.shape))
        report.per_param[name] = worst
    logger.debug(f"grad_check | max_rel_error={report.max_rel_error:.3e}, checked={report.checked}, "
                 f"worst={report.worst_param}{report.worst_index or ''}")
    return report
