"""Dense matrix math with reverse-mode gradients, plus the SGD optimizer.

Every op works on a single matrix or on a stack of matrices (leading batch
axis); reductions and products always act on the trailing two axes. Each op
checks its forward value and raises :class:`NonFiniteError` naming itself if
anything overflowed.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import NonFiniteError, ShapeError

DTYPE = np.float64


class Tensor:
    """A value in the computation graph.

    ``grad`` is filled in by :meth:`backward`. Leaves created with
    ``requires_grad=False`` are treated as constants.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), op="leaf"):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def T(self):
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into every leaf's ``grad``."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            seed = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        for node in order:
            node.grad = None
        self.grad = np.asarray(seed, dtype=DTYPE)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    g = _unbroadcast(g, t.data.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(data, parents, op, backward) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data, _parents=tuple(parents), op=op)
    if out.requires_grad:
        out._backward = backward
    return out


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _node(a.data - b.data, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    """Elementwise product (broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _node(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    """Elementwise quotient (broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        _accumulate(a, g / b.data)
        _accumulate(b, -g * out / b.data)

    return _node(out, (a, b), "div", backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def backward(g):
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        _accumulate(a, np.swapaxes(g, -1, -2))

    return _node(np.swapaxes(a.data, -1, -2), (a,), "transpose", backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        _accumulate(a, g * mask)

    return _node(a.data * mask, (a,), "relu", backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(g):
        _accumulate(a, g * sign)

    return _node(np.abs(a.data), (a,), "abs", backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _node(out, (a,), "log", backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out)

    return _node(out, (a,), "exp", backward)


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with max-shift."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))

    return _node(out, (x,), "softmax_rows", backward)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(out)

    def backward(g):
        _accumulate(x, g - p * g.sum(axis=-1, keepdims=True))

    return _node(out, (x,), "log_softmax_rows", backward)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.data.shape[-1]
    if gain.data.shape[-1] != n or bias.data.shape[-1] != n:
        raise ShapeError(f"layer_norm: gain/bias width must be {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        _accumulate(bias, g)
        _accumulate(gain, g * xhat)
        gx = g * gain.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        _accumulate(x, gx)

    return _node(out, (x, gain, bias), "layer_norm", backward)


def mean_rows(x) -> Tensor:
    """Mean over the row axis: (..., M, D) -> (..., D)."""
    x = as_tensor(x)
    m = x.data.shape[-2]

    def backward(g):
        _accumulate(x, np.broadcast_to(g[..., None, :], x.data.shape) / m)

    return _node(x.data.mean(axis=-2), (x,), "mean_rows", backward)


def total(x) -> Tensor:
    """Sum of every entry."""
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _node(np.asarray(x.data.sum()), (x,), "sum", backward)


def sum_last(x, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        if not keepdims:
            g = g[..., None]
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _node(x.data.sum(axis=-1, keepdims=keepdims), (x,), "sum_last", backward)


def sum_squares(x) -> Tensor:
    """Squared Frobenius norm over all entries."""
    x = as_tensor(x)

    def backward(g):
        _accumulate(x, 2.0 * g * x.data)

    return _node(np.asarray((x.data * x.data).sum()), (x,), "sum_squares", backward)


def concat_last(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    na = a.data.shape[-1]
    bshape = a.data.shape[:-1] + b.data.shape[-1:]
    bb = np.broadcast_to(b.data, bshape)

    def backward(g):
        _accumulate(a, g[..., :na])
        _accumulate(b, g[..., na:])

    return _node(np.concatenate([a.data, bb], axis=-1), (a, b), "concat", backward)


def slice_rows(x, stop: int) -> Tensor:
    """First ``stop`` rows of a matrix (used for the position table)."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[..., :stop, :] = g
        _accumulate(x, full)

    return _node(x.data[..., :stop, :], (x,), "slice_rows", backward)


def offdiag(x) -> Tensor:
    """(B, B) -> (B, B-1): drop each row's diagonal entry."""
    x = as_tensor(x)
    b = x.data.shape[-1]
    keep = ~np.eye(b, dtype=bool)

    def backward(g):
        full = np.zeros_like(x.data)
        full[keep] = g.reshape(-1)
        _accumulate(x, full)

    return _node(x.data[keep].reshape(b, b - 1), (x,), "offdiag", backward)


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).data)


def apply_mask(x, mask: np.ndarray) -> Tensor:
    """Multiply by a fixed dropout mask (already holding the 1/(1-rate) scale)."""
    return mul(x, Tensor(mask))


# ------------------------------------------------------------------- dropout


def dropout(x, rate: float, rng_seed, training: bool):
    """Inverted dropout. Returns ``(output, mask)``.

    The mask is drawn from a Philox stream keyed by ``rng_seed`` so the same
    seed always yields the same mask.
    """
    x = as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones_like(x.data)
    rng = np.random.Generator(np.random.Philox(key=_philox_key(rng_seed)))
    keep = rng.random(x.data.shape) >= rate
    mask = keep / (1.0 - rate)
    return apply_mask(x, mask), mask


def _philox_key(seed) -> int:
    if isinstance(seed, (tuple, list)):
        ss = np.random.SeedSequence([int(s) for s in seed])
        return int(ss.generate_state(2, np.uint64)[0])
    return int(seed) & ((1 << 64) - 1)


# ------------------------------------------------------------ parameter store


class ParamStore:
    """Ordered name -> matrix map with a parallel gradient slot per entry."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=DTYPE)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self):
        return list(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for name, value in self.params.items():
            self.grads[name] = np.zeros_like(value)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    def subset(self, prefixes) -> "ParamStore":
        return ParamStore({k: v for k, v in self.params.items() if k.startswith(tuple(prefixes))})

    def update(self, other: "ParamStore") -> None:
        for name, value in other.items():
            if name in self.params:
                self.params[name] = value.copy()
                self.grads[name] = np.zeros_like(value)
            else:
                self.add(name, value)

    def count(self, prefixes=None) -> int:
        return sum(v.size for k, v in self.params.items()
                   if prefixes is None or k.startswith(tuple(prefixes)))

    def leaves(self, names=None) -> dict[str, Tensor]:
        """Tensor views of the parameters; ``names`` selects which track gradients."""
        wanted = set(self.params if names is None else names)
        return {k: Tensor(v, requires_grad=k in wanted) for k, v in self.params.items()}


def linear_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for dense layers."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def gradient_of(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: ParamStore,
                names=None) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` on leaf tensors and backpropagate.

    Returns the loss value and a gradient for every parameter (zero for those
    the loss does not touch or that are not in ``names``).
    """
    leaves = params.leaves(names)
    loss = loss_fn(leaves)
    if loss.data.size != 1:
        raise ShapeError("loss must be a scalar")
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for k, t in leaves.items():
        grads[k] = np.zeros_like(t.data) if t.grad is None else np.array(t.grad)
    return loss.item(), grads


def finite_diff_grad(loss_fn: Callable[[dict[str, Tensor]], Tensor], params: ParamStore,
                     h: float = 1e-5, names=None) -> dict[str, np.ndarray]:
    """Central differences, one scalar entry at a time."""
    if h <= 0:
        raise ValueError("step size must be positive")
    work = params.copy()
    names = list(work.params if names is None else names)

    def value():
        with np.errstate(over="raise"):
            return loss_fn(work.leaves(())).item()

    grads = {k: np.zeros_like(v) for k, v in work.params.items()}
    for name in names:
        arr = work.params[name]
        flat = arr.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            g[i] = (up - down) / (2.0 * h)
    return grads


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                       floor: float = 1e-6) -> float:
    """Largest per-parameter ``max|a - n| / max(max|a|, max|n|, floor)``."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), floor)
        worst = max(worst, float(np.abs(a - n).max(initial=0.0)) / scale)
    return worst


# ----------------------------------------------------------------- optimizer

NO_DECAY_SUFFIXES = (".b", ".b1", ".b2", ".bias", ".gain")


@dataclass
class OptimizerState:
    momentum_buffers: dict[str, np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 0.01
    epoch: int = 0
    total_epochs: int = 0

    @classmethod
    def for_params(cls, params: ParamStore, momentum=0.9, weight_decay=0.01,
                   total_epochs=0) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()}, momentum,
                   weight_decay, 0, total_epochs)


def decays(name: str) -> bool:
    return not name.endswith(NO_DECAY_SUFFIXES)


def sgd_step(params: ParamStore, grads: Mapping[str, np.ndarray], state: OptimizerState,
             lr: float, names=None) -> None:
    """In-place momentum SGD with L2 decay folded into the gradient.

    ``buf <- momentum * buf + (grad + decay * p)``; ``p <- p - lr * buf``.
    Only ``names`` (default: all) are touched.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if set(state.momentum_buffers) != set(params.params):
        raise KeyError("optimizer state does not match parameter names")
    for name in (params.names() if names is None else names):
        p = params.params[name]
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
        if state.weight_decay and decays(name):
            g = g + state.weight_decay * p
        buf = state.momentum_buffers[name]
        buf *= state.momentum
        buf += g
        p -= lr * buf


def cosine_lr(epoch: int, total_epochs: int, lr_max: float = 0.01, lr_min: float = 0.0001) -> float:
    if total_epochs <= 0 or not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    if not lr_max >= lr_min > 0:
        raise ValueError("need lr_max >= lr_min > 0")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * epoch / total_epochs))
