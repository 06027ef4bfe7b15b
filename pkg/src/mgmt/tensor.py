"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parents and a backward closure on
the output tensor; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order and accumulates gradients into leaf tensors.

Row-gather and segment reductions are the workhorses of localized graph
attention. Their scatter halves go through ``scipy.sparse`` CSR products,
which are both fast and deterministic in summation order.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

LAYER_NORM_EPS = 1e-5
FD_STEP = 1e-5

_state = threading.local()


class NonFiniteError(ValueError):
    """Raised when a tensor would hold NaN or Inf values."""


class ContractError(ValueError):
    """Raised when an operation precondition is violated."""


class DimensionError(ValueError):
    """Raised on incompatible tensor shapes."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _debug() -> bool:
    return getattr(_state, "debug", False)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Assert finiteness after every operation in the current thread."""
    prev = _debug()
    _state.debug = enabled
    try:
        yield
    finally:
        _state.debug = prev


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if _debug():
            _check_finite(data, f"output of {op}")
        needs = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        out._op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
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
        return mul(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor._result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return Tensor._result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    if np.isscalar(b):
        c = float(b)
        return Tensor._result(a.data * c, (a,), lambda g: (g * c,), "scale")
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return Tensor._result(ad / bd, (a, b), backward, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def identity(x: Tensor) -> Tensor:
    return x


ACTIVATIONS = {"relu": relu, "identity": identity}


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return Tensor._result(y, (x,), lambda g: (g * y,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return Tensor._result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ------------------------------------------------------------------- shaping


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with gradients ``a.grad += g bᵀ`` and ``b.grad += aᵀ g``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._result(ad @ bd, (a, b), backward, "matmul")


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis: ``(..., k), (..., k) -> (...)``."""
    if a.shape != b.shape:
        raise DimensionError(f"rowwise_dot shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        g = g[..., None]
        return g * bd, g * ad

    return Tensor._result(np.einsum("...k,...k->...", ad, bd), (a, b), backward, "rowwise_dot")


def transpose(x: Tensor) -> Tensor:
    return Tensor._result(x.data.T, (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor._result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._result(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis), 1.0 / n)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._result(data, tuple(tensors), backward, "concat")


# ------------------------------------------------------- gather and segments


class Index:
    """Integer row index with a cached CSR scatter matrix for backward passes."""

    __slots__ = ("idx", "size", "_scatter")

    def __init__(self, idx, size: int):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.size = int(size)
        self._scatter = None

    def __len__(self) -> int:
        return len(self.idx)

    @property
    def scatter(self) -> sp.csr_matrix:
        if self._scatter is None:
            n = len(self.idx)
            self._scatter = sp.csr_matrix(
                (np.ones(n), (self.idx, np.arange(n))), shape=(self.size, n)
            )
        return self._scatter


def _scatter_rows(S: sp.csr_matrix, g: np.ndarray) -> np.ndarray:
    flat = g.reshape(g.shape[0], -1)
    out = np.asarray(S @ flat)
    return out.reshape((S.shape[0],) + g.shape[1:])


def take_rows(x: Tensor, index: Index) -> Tensor:
    """Gather rows ``x[index]`` along axis 0."""
    if index.size != x.shape[0]:
        raise DimensionError(f"index built for {index.size} rows, tensor has {x.shape[0]}")
    return Tensor._result(
        x.data[index.idx], (x,), lambda g: (_scatter_rows(index.scatter, g),), "take_rows"
    )


class Segments:
    """Contiguous, non-empty row segments given by sorted segment ids."""

    __slots__ = ("ids", "starts", "count", "_index")

    def __init__(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise ContractError("segments need at least one row")
        if np.any(np.diff(ids) < 0):
            raise ContractError("segment ids must be sorted")
        count = int(ids[-1]) + 1
        starts = np.searchsorted(ids, np.arange(count))
        if ids[0] != 0 or np.any(np.diff(np.append(starts, ids.size)) == 0):
            raise ContractError("every segment must be non-empty")
        self.ids = ids
        self.starts = starts
        self.count = count
        self._index = None

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(np.append(self.starts, self.ids.size))

    @property
    def index(self) -> Index:
        if self._index is None:
            self._index = Index(self.ids, self.count)
        return self._index


def segment_sum(x: Tensor, seg: Segments) -> Tensor:
    ids = seg.ids
    data = np.add.reduceat(x.data, seg.starts, axis=0)
    return Tensor._result(data, (x,), lambda g: (g[ids],), "segment_sum")


def segment_mean(x: Tensor, seg: Segments) -> Tensor:
    ids = seg.ids
    sizes = seg.sizes.reshape((-1,) + (1,) * (x.ndim - 1)).astype(np.float64)
    data = np.add.reduceat(x.data, seg.starts, axis=0) / sizes
    return Tensor._result(data, (x,), lambda g: ((g / sizes)[ids],), "segment_mean")


def segment_max(x: Tensor, seg: Segments) -> Tensor:
    data = np.maximum.reduceat(x.data, seg.starts, axis=0)
    hit = x.data == data[seg.ids]
    # route each segment's gradient to the first maximal row only
    first = np.zeros_like(hit)
    for j in range(hit.shape[1] if hit.ndim > 1 else 1):
        col = hit[:, j] if hit.ndim > 1 else hit
        rows = np.flatnonzero(col)
        keep = rows[np.unique(seg.ids[rows], return_index=True)[1]]
        if hit.ndim > 1:
            first[keep, j] = True
        else:
            first[keep] = True
    ids = seg.ids

    def backward(g):
        return (np.where(first, g[ids], 0.0),)

    return Tensor._result(data, (x,), backward, "segment_max")


def segment_softmax(scores: Tensor, seg: Segments) -> Tensor:
    """Softmax over each segment of rows, independently per trailing column."""
    s = scores.data
    ids, starts = seg.ids, seg.starts
    shifted = s - np.maximum.reduceat(s, starts, axis=0)[ids]
    e = np.exp(shifted)
    y = e / np.add.reduceat(e, starts, axis=0)[ids]

    def backward(g):
        inner = np.add.reduceat(g * y, starts, axis=0)[ids]
        return (y * (g - inner),)

    return Tensor._result(y, (scores,), backward, "segment_softmax")


# ------------------------------------------------------------ normalisation


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over ``mask``; masked entries come out exactly zero."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise DimensionError(f"mask {mask.shape} does not match scores {scores.shape}")
    if not mask.any(axis=-1).all():
        raise ContractError("masked_softmax: a row has no unmasked entries")
    s = scores.data
    row_max = np.where(mask, s, -np.inf).max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, s - row_max, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._result(y, (scores,), backward, "masked_softmax")


def softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row standardisation followed by a per-feature affine map."""
    d = x.shape[-1]
    if d < 2:
        raise DimensionError(f"layer_norm needs at least 2 features, got {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gam = scale.data

    def backward(g):
        dxhat = g * gam
        dx = inv_std / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).reshape(-1, d).sum(axis=0), g.reshape(-1, d).sum(axis=0)

    return Tensor._result(xhat * gam + shift.data, (x, scale, shift), backward, "layer_norm")


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {b}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise IndexError(f"label out of range [0, {c})")
    logp = log_softmax(logits.data)
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return Tensor._result(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("adam_step: params, grads and state differ in length")
    t = state.t + 1
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        mhat = m / (1.0 - beta1**t)
        vhat = v / (1.0 - beta2**t)
        new_params.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        ms.append(m)
        vs.append(v)
    return new_params, AdamState(t, ms, vs)


class Adam:
    """In-place Adam over a list of leaf tensors."""

    def __init__(self, params: list[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = (beta1, beta2)
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        new, self.state = adam_step(
            [p.data for p in self.params], [p.grad for p in self.params], self.state,
            self.lr, *self.betas, self.eps,
        )
        for p, d in zip(self.params, new):
            p.data = d


# ---------------------------------------------------------------- grad check


def _rel_err(auto: np.ndarray, fd: np.ndarray) -> float:
    if not (np.isfinite(auto).all() and np.isfinite(fd).all()):
        raise ContractError("grad_check: non-finite gradient")
    if auto.size == 0:
        return 0.0
    return float(np.max(np.abs(auto - fd) / np.maximum(1.0, np.abs(fd))))


def grad_check(f, point, step: float = FD_STEP) -> float:
    """Max relative error between autodiff and central differences of ``f`` at ``point``.

    ``f`` maps a Tensor to a scalar Tensor.
    """
    point = np.array(point, dtype=np.float64)
    x = Tensor(point, requires_grad=True)
    y = f(x)
    if not np.isfinite(y.data).all():
        raise ContractError("grad_check: non-finite function value")
    if y.requires_grad:
        y.backward()
        auto = x.grad.copy()
    else:
        auto = np.zeros_like(point)
    fd = np.zeros_like(point)
    flat = point.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        with no_grad():
            hi = float(f(Tensor(point)).data)
        flat[i] = orig - step
        with no_grad():
            lo = float(f(Tensor(point)).data)
        flat[i] = orig
        fd.reshape(-1)[i] = (hi - lo) / (2.0 * step)
    return _rel_err(auto, fd)


def grad_check_params(loss_fn, params: list[Tensor], step: float = FD_STEP,
                      max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Like :func:`grad_check`, but perturbs parameter tensors in place.

    ``loss_fn()`` must rebuild the graph from the current parameter values.
    ``max_coords`` optionally subsamples coordinates per tensor.
    """
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for p in params:
        auto = p.grad.reshape(-1).copy()
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        fd = np.empty(len(coords))
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                hi = float(loss_fn().data)
            flat[i] = orig - step
            with no_grad():
                lo = float(loss_fn().data)
            flat[i] = orig
            fd[j] = (hi - lo) / (2.0 * step)
        worst = max(worst, _rel_err(auto[coords], fd))
    return worst
