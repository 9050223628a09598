"""Dense tensors with reverse-mode automatic differentiation.

Every array lives in a :class:`Tensor` backed by a numpy array.  Operations
build a graph of closures; :func:`backward` walks it in reverse topological
order and accumulates gradients into leaf tensors.

Precision is a process-wide mode (``f64`` for tests and gradient checks,
``f32`` for training) selected with :func:`set_mode` or the ``MSGBART_MODE``
environment variable.  Modes are never mixed inside one run.
"""

from __future__ import annotations

import contextlib
import os
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

_MODES = {"f32": np.float32, "f64": np.float64}
_mode = os.environ.get("MSGBART_MODE", "f32")
if _mode not in _MODES:
    raise ValueError(f"MSGBART_MODE must be one of {sorted(_MODES)}, got {_mode!r}")

COSINE_EPS = 1e-12
LAYER_NORM_EPS = 1e-5
PROB_FLOOR = 1e-12
MASK_VALUE = -1e9


def set_mode(mode: str) -> None:
    global _mode
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {sorted(_MODES)}, got {mode!r}")
    _mode = mode


def get_mode() -> str:
    return _mode


def dtype():
    return _MODES[_mode]


class Tensor:
    """A node in the computation graph.

    ``data`` is a numpy array in the current precision; ``grad`` is filled by
    :func:`backward` for leaves created with ``requires_grad=True``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return _node(a.data / b.data, (a, b), bw)


def power(x: Tensor, exponent: float) -> Tensor:
    """``x ** exponent`` for a constant exponent."""
    out = x.data**exponent
    return _node(out, (x,), lambda g: (g * exponent * x.data ** (exponent - 1),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.data)
    return _node(y, (x,), lambda g: (g / (2.0 * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return _node(x.data * on, (x,), lambda g: (g * on,))


_dropout_rng: Optional[np.random.Generator] = None


@contextlib.contextmanager
def dropout_enabled(rng: np.random.Generator):
    """Turn :func:`dropout` on inside the block, drawing masks from ``rng``."""
    global _dropout_rng
    prev, _dropout_rng = _dropout_rng, rng
    try:
        yield
    finally:
        _dropout_rng = prev


def dropout(x: Tensor, p: float) -> Tensor:
    """Inverted dropout; the identity unless inside :func:`dropout_enabled`."""
    if _dropout_rng is None or p <= 0.0:
        return x
    keep = (_dropout_rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def bw(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _node(np.where(cond, a.data, b.data), (a, b), bw)


# ----------------------------------------------------------------------------
# shape and reductions
# ----------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _node(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Tensor, index) -> Tensor:
    basic = all(isinstance(i, (int, slice, type(Ellipsis))) for i in (index if isinstance(index, tuple) else (index,)))

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(x.data[index], (x,), bw)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / count)


def mean_pool(x: Tensor, axis: int, mask: Optional[np.ndarray] = None, keepdims: bool = False) -> Tensor:
    """Mean over ``axis``, counting only positions where ``mask`` is true."""
    if mask is None:
        return mean(x, axis, keepdims)
    m = np.asarray(mask, dtype=dtype())
    weights = m / np.maximum(m.sum(axis=axis, keepdims=True), 1.0)
    while weights.ndim < x.ndim:
        weights = weights[..., None]
    return sum_(mul(x, weights), axis, keepdims)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _node(np.stack([t.data for t in tensors], axis=axis), tensors, bw)


def select_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick one row per leading position: ``x[..., index[...], :]``.

    ``x`` has shape ``[*lead, K, d]`` and ``index`` has shape ``lead``.
    """
    idx = np.asarray(index, dtype=np.int64)[..., None, None]
    out = np.take_along_axis(x.data, idx, axis=-2)[..., 0, :]

    def bw(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, idx, g[..., None, :], axis=-2)
        return (full,)

    return _node(out, (x,), bw)


# ----------------------------------------------------------------------------
# linear algebra
# ----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _node(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ----------------------------------------------------------------------------
# normalisation, probabilities, losses
# ----------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv = 1.0 / np.sqrt((centred**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True) - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])]
        raise IndexError(f"embedding id {int(bad.flat[0])} out of range for table with {table.shape[0]} rows")

    def bw(g):
        flat = ids.reshape(-1)
        rows = g.reshape(-1, table.shape[1])
        if flat.size * table.shape[0] <= 1 << 22:
            onehot = np.zeros((table.shape[0], flat.size), dtype=g.dtype)
            onehot[flat, np.arange(flat.size)] = 1.0
            return (onehot @ rows,)
        full = np.zeros_like(table.data)
        np.add.at(full, flat, rows)
        return (full,)

    return _node(table.data[ids], (table,), bw)


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine along the last axis, ``a.b / (|a||b| + 1e-12)``.

    Two zero vectors give 0 rather than an error.
    """
    a, b = as_tensor(a), as_tensor(b)
    dot = (a.data * b.data).sum(axis=-1, keepdims=True)
    na = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=-1, keepdims=True))
    den = na * nb + COSINE_EPS
    ua = np.divide(a.data, na, out=np.zeros(np.broadcast_shapes(a.shape, na.shape)), where=na > 0)
    ub = np.divide(b.data, nb, out=np.zeros(np.broadcast_shapes(b.shape, nb.shape)), where=nb > 0)

    def bw(g):
        g = g[..., None]
        ga = g * (b.data / den - dot * nb * ua / den**2)
        gb = g * (a.data / den - dot * na * ub / den**2)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node((dot / den)[..., 0], (a, b), bw)


def _clamped_log(p: np.ndarray):
    clamped = np.maximum(p, PROB_FLOOR)
    return np.log(clamped), (p >= PROB_FLOOR)


def cross_entropy(dist: Tensor, target_id: int) -> Tensor:
    """``-log(dist[target])`` for a single probability vector, floored at 1e-12."""
    if not 0 <= target_id < dist.shape[-1]:
        raise IndexError(f"target id {target_id} out of range for distribution of size {dist.shape[-1]}")
    return nll(dist.reshape(1, -1), np.array([target_id]))


def nll(probs: Tensor, targets, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under probability rows.

    ``probs`` is ``[*lead, V]``; ``targets`` and ``mask`` are ``lead``-shaped.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size and (targets.min() < 0 or targets.max() >= probs.shape[-1]):
        raise IndexError(f"target id out of range for distribution of size {probs.shape[-1]}")
    m = np.ones(targets.shape, dtype=dtype()) if mask is None else np.asarray(mask, dtype=dtype())
    count = max(float(m.sum()), 1.0)
    idx = targets[..., None]
    picked = np.take_along_axis(probs.data, idx, axis=-1)[..., 0]
    logp, live = _clamped_log(picked)
    value = -(logp * m).sum() / count

    def bw(g):
        full = np.zeros_like(probs.data)
        local = -g * m * live / np.maximum(picked, PROB_FLOOR) / count
        np.put_along_axis(full, idx, local[..., None], axis=-1)
        return (full,)

    return _node(np.asarray(value), (probs,), bw)


# ----------------------------------------------------------------------------
# parameters and backward
# ----------------------------------------------------------------------------


class ParamStore:
    """Named trainable tensors, iterated in lexicographic name order.

    Each parameter carries a group tag (``lm`` or ``gvp`` in the model) used
    to assign learning rates.
    """

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._groups: Dict[str, str] = {}

    def add(self, name: str, value, group: str = "default") -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        self._groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def names(self) -> List[str]:
        return sorted(self._params)

    def items(self) -> List[Tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def group(self, name: str) -> str:
        return self._groups[name]

    def groups(self) -> Dict[str, List[str]]:
        out: Dict[str, List[str]] = {}
        for name in self.names():
            out.setdefault(self._groups[name], []).append(name)
        return out

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def count(self) -> int:
        return int(sum(t.data.size for t in self._params.values()))

    def cast(self) -> None:
        """Re-cast every parameter to the current precision mode."""
        for t in self._params.values():
            t.data = t.data.astype(dtype())
            t.grad = None


def _topological(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    seen = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Optional[ParamStore] = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    With ``params`` given, their grads are zeroed first so parameters the
    loss does not reach end up with an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        params.zero_grad()
    if not loss.requires_grad:
        return
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# ----------------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------------


def grad_check_report(
    f: Callable[[], Tensor],
    params: ParamStore,
    eps: float = 1e-5,
    max_coords: Optional[int] = 16,
    seed: int = 0,
    names: Optional[Iterable[str]] = None,
) -> Dict[str, float]:
    """Per-parameter max relative error between backward() and central differences.

    Relative error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    At most ``max_coords`` coordinates per parameter are probed, chosen by a
    seeded generator; ``None`` probes all of them.
    """
    if get_mode() != "f64":
        raise RuntimeError("gradient checks need 64-bit mode; call set_mode('f64')")
    loss = f()
    backward(loss, params)
    analytic = {n: params[n].grad.copy() for n in params.names()}
    rng = np.random.default_rng(seed)
    report: Dict[str, float] = {}
    for name in names if names is not None else params.names():
        t = params[name]
        flat = t.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = f().item()
            flat[c] = orig - eps
            down = f().item()
            flat[c] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic[name].reshape(-1)[c]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        report[name] = worst
    return report


def grad_check(f: Callable[[], Tensor], params: ParamStore, eps: float = 1e-5, **kwargs) -> float:
    report = grad_check_report(f, params, eps, **kwargs)
    return max(report.values()) if report else 0.0
