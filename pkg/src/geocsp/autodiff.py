"""Dense float64 tensors with a reverse-mode tape, stable reductions and Adam.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape nothing is recorded, so evaluation code pays no bookkeeping cost::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    (grad_w,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, erf

from .errors import ConfigError, DegenerateInputError, NumericError, ShapeError, UsageError

COSINE_EPS = 1e-12

_ACTIVE_TAPES: list["Tape"] = []


def _check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by {what}")
    return arr


class Tensor:
    """A float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = _check_finite(arr, "Tensor construction")
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive operations for one differentiation pass."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradient of scalar ``target`` with respect to each of ``sources``.

        Sources that ``target`` does not depend on get a zero gradient.
        """
        if target.data.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        source_ids = {id(s) for s in sources}
        if id(target) not in source_ids and not any(node.out is target for node in self.nodes):
            raise UsageError("gradient target was not recorded on this tape")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _record(out_data: np.ndarray, parents: tuple[Tensor, ...], backward, name: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(out_data, name)
    out.requires_grad = False
    if _ACTIVE_TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _ACTIVE_TAPES[-1].nodes.append(_Node(out, parents, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
        "div",
    )


def square(a: Tensor) -> Tensor:
    return _record(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return _record(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
    return _record(x * cdf, (a,), lambda g: (g * (cdf + x * pdf),), "gelu")


def log_sigmoid(x):
    """``log(sigmoid(x))`` computed as ``-softplus(-x)``.

    Accepts a float (returns a float) or a Tensor (returns a recorded Tensor).
    ``log(1 - sigmoid(x))`` is ``log_sigmoid(-x)``.
    """
    if not isinstance(x, Tensor):
        x = float(x)
        if not np.isfinite(x):
            raise NumericError("log_sigmoid of a non-finite value")
        return float(-np.logaddexp(0.0, -x))
    return _record(
        -np.logaddexp(0.0, -x.data), (x,), lambda g: (g * expit(-x.data),), "log_sigmoid"
    )


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not align")
    return _record(
        a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), "matmul"
    )


def transpose(a: Tensor) -> Tensor:
    return _record(a.data.T, (a,), lambda g: (g.T,), "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, index) -> Tensor:
    """Gather ``a[index]`` (any numpy index); repeated indices accumulate gradient."""
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
        "concat",
    )


def tsum(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis)), (a,), backward, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / count)


# ---------------------------------------------------------------- reductions


def logsumexp(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor over entries where ``mask`` is True."""
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    if not mask.any(axis=1).all():
        raise DegenerateInputError("logsumexp row with no unmasked entries")
    masked = np.where(mask, x, -np.inf)
    shift = masked.max(axis=1, keepdims=True)
    w = np.where(mask, np.exp(masked - shift), 0.0)
    total = w.sum(axis=1, keepdims=True)
    out = (shift + np.log(total))[:, 0]
    soft = w / total
    return _record(out, (a,), lambda g: (g[:, None] * soft,), "logsumexp")


def log_softmax_entry(scores, index: int, temperature: float = 1.0):
    """``scores[index]/t - logsumexp(scores/t)`` for a single score vector."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    raw = isinstance(scores, Tensor)
    s = as_tensor(scores)
    if s.ndim != 1:
        raise ShapeError(f"scores must be a vector, got shape {s.shape}")
    scaled = reshape(s * (1.0 / temperature), (1, -1))
    out = take(scaled, (0, index)) - take(logsumexp(scaled), 0)
    return out if raw else out.item()


# ---------------------------------------------------------------- similarity


def _pair_matrix(values: np.ndarray, ia: np.ndarray, ib: np.ndarray, shape) -> np.ndarray:
    flat = np.bincount(ia * shape[1] + ib, weights=values, minlength=shape[0] * shape[1])
    return flat.reshape(shape)


def _check_pairs(a: Tensor, b: Tensor, ia, ib, name: str):
    ia = np.asarray(ia, dtype=np.intp)
    ib = np.asarray(ib, dtype=np.intp)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"{name} needs matching row widths, got {a.shape} and {b.shape}")
    if ia.shape != ib.shape:
        raise ShapeError(f"{name} index arrays differ in length")
    return ia, ib


def pair_cosine(a: Tensor, b: Tensor, ia, ib) -> Tensor:
    """Cosine similarity between rows ``a[ia[k]]`` and ``b[ib[k]]`` for each k.

    Uses ``a.b / max(sqrt(|a|^2 |b|^2), 1e-12)``; identical rows score exactly 1.
    """
    ia, ib = _check_pairs(a, b, ia, ib, "pair_cosine")
    sq_a_rows = np.einsum("ij,ij->i", a.data, a.data)
    sq_b_rows = np.einsum("ij,ij->i", b.data, b.data)
    sq_a, sq_b = sq_a_rows[ia], sq_b_rows[ib]
    dot = np.einsum("ij,ij->i", a.data[ia], b.data[ib])
    norms = np.sqrt(sq_a * sq_b)
    guarded = norms <= COSINE_EPS
    denom = np.where(guarded, COSINE_EPS, norms)
    out = dot / denom

    def backward(g):
        shape = (len(a), len(b))
        w = _pair_matrix(g / denom, ia, ib, shape)
        # the guard branch has a constant denominator, so only the dot term remains
        ra = np.where(guarded, 0.0, g * out / np.where(sq_a > 0, sq_a, 1.0))
        rb = np.where(guarded, 0.0, g * out / np.where(sq_b > 0, sq_b, 1.0))
        ga = w @ b.data - np.bincount(ia, weights=ra, minlength=shape[0])[:, None] * a.data
        gb = w.T @ a.data - np.bincount(ib, weights=rb, minlength=shape[1])[:, None] * b.data
        return ga, gb

    return _record(out, (a, b), backward, "pair_cosine")


def pair_dot(a: Tensor, b: Tensor, ia, ib) -> Tensor:
    """Dot product between rows ``a[ia[k]]`` and ``b[ib[k]]`` for each k."""
    ia, ib = _check_pairs(a, b, ia, ib, "pair_dot")

    def backward(g):
        w = _pair_matrix(g, ia, ib, (len(a), len(b)))
        return w @ b.data, w.T @ a.data

    return _record(np.einsum("ij,ij->i", a.data[ia], b.data[ib]), (a, b), backward, "pair_dot")


def cosine_similarity(a, b):
    """Cosine similarity of two vectors; returns a float unless given Tensors."""
    raw = isinstance(a, Tensor) or isinstance(b, Tensor)
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity needs equal-length vectors, got {a.shape}, {b.shape}")
    if not (np.any(a.data) or np.any(b.data)):
        raise DegenerateInputError("cosine_similarity of two zero vectors")
    out = take(pair_cosine(reshape(a, (1, -1)), reshape(b, (1, -1)), [0], [0]), 0)
    return out if raw else out.item()


# ---------------------------------------------------------------- layers


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class Linear:
    """Affine map ``x @ weight + bias`` with Glorot-uniform init."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        weight = np.asarray(weight, dtype=np.float64)
        bias = np.asarray(bias, dtype=np.float64)
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ShapeError(f"bias {bias.shape} does not match weight {weight.shape}")
        self.weight = Tensor(weight, requires_grad=True)
        self.bias = Tensor(bias, requires_grad=True)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "Linear":
        return cls(glorot_uniform(n_in, n_out, rng), np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"Linear expects width {self.n_in}, got {x.shape[-1]}")
        return matmul(x, self.weight) + self.bias


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence, **kwargs) -> "AdamState":
        arrays = [p.data if isinstance(p, Tensor) else np.asarray(p) for p in params]
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], **kwargs)


def adam_step(params: Sequence, grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update applied in place to ``params``.

    ``params`` may hold Tensors or float arrays. Returns ``(params, state)``.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state have different lengths")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        arr = p.data if isinstance(p, Tensor) else p
        if arr.shape != g.shape or m.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {arr.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


@dataclass
class Adam:
    """Adam over a fixed list of parameter tensors."""

    params: list[Tensor]
    lr: float
    state: AdamState = field(init=False)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        self.state = AdamState.zeros_like(self.params)

    def step(self, grads: Sequence[np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr)

    def minimize(self, loss_fn: Callable[[], Tensor]) -> float:
        """Evaluate ``loss_fn`` on a fresh tape, step, and return the loss value."""
        with Tape() as tape:
            loss = loss_fn()
        self.step(tape.gradient(loss, self.params))
        return loss.item()


# ---------------------------------------------------------------- verification


def finite_difference_check(f: Callable, point, eps: float = 1e-5) -> float:
    """Worst coordinatewise relative error between tape and central-difference gradients.

    ``f`` receives a Tensor (or a list of Tensors when ``point`` is a list of
    arrays) and must return a scalar Tensor. The relative error denominator
    is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    multi = isinstance(point, (list, tuple))
    arrays = [np.array(p, dtype=np.float64) for p in (point if multi else [point])]

    def call(values):
        ts = [Tensor(v, requires_grad=True) for v in values]
        return ts, f(ts if multi else ts[0])

    with Tape() as tape:
        leaves, out = call(arrays)
    analytic = tape.gradient(out, leaves)

    worst = 0.0
    for k, base in enumerate(arrays):
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = call(arrays)[1].item()
            flat[i] = orig - eps
            down = call(arrays)[1].item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            a = analytic[k].reshape(-1)[i]
            denom = max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, abs(a - numeric) / denom)
    return worst
