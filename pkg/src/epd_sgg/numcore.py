"""Small reverse-mode autodiff core over float32 numpy arrays.

Only the handful of ops the relation head needs are provided. Every op
checks its output for NaN/Inf and raises :class:`NumericError` on the
first non-finite value.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float32
_dtype_stack = [DTYPE]


def _dt():
    return _dtype_stack[-1]


@contextmanager
def float64_oracle():
    """Evaluate ops in float64 inside the block.

    Meant for finite-difference gradient checks only; the working precision
    everywhere else is float32.
    """
    _dtype_stack.append(np.float64)
    try:
        yield
    finally:
        _dtype_stack.pop()


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """A value in the computation graph plus its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value, dtype=_dt())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g.astype(self.value.dtype, copy=False)

    def backward(self, grad=None, retain_grads: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Non-scalar outputs need an explicit upstream ``grad``. With
        ``retain_grads`` intermediate nodes keep their gradient too.
        """
        if grad is None:
            if self.value.size != 1:
                raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.value)
        grad = np.asarray(grad, dtype=self.value.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"upstream gradient {grad.shape} does not match output {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        # iterative post-order; graphs can be deep enough to hit the recursion limit
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or retain_grads:
                node._accumulate(g)
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def parameter(value, name: str | None = None) -> Tensor:
    t = Tensor(value, requires_grad=True, name=name)
    t.zero_grad()
    return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op} produced a non-finite value")


def _node(value: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(value, op)
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` for ``x`` of shape (n, d_in)."""
    x, W, b = _as_tensor(x), _as_tensor(W), _as_tensor(b)
    if x.value.ndim != 2 or W.value.ndim != 2 or b.value.ndim != 1:
        raise DimensionError("affine expects x:[n,d_in], W:[d_in,d_out], b:[d_out]")
    if x.shape[1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise DimensionError(f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    xv, Wv = x.value, W.value
    out = xv @ Wv + b.value

    def backward(g):
        return (
            g @ Wv.T if x.requires_grad else None,
            xv.T @ g if W.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _node(out, (x, W, b), backward, "affine")


def concat(xs: Sequence) -> Tensor:
    """Concatenate along the feature axis."""
    if len(xs) == 0:
        raise DimensionError("concat of an empty list")
    ts = [_as_tensor(x) for x in xs]
    n = ts[0].shape[0]
    for t in ts:
        if t.value.ndim != 2 or t.shape[0] != n:
            raise DimensionError("concat inputs must be 2-D with equal leading dims")
    if len(ts) == 1:
        return ts[0]
    offsets = np.cumsum([0] + [t.shape[1] for t in ts])
    out = np.concatenate([t.value for t in ts], axis=1)

    def backward(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(ts)))

    return _node(out, ts, backward, "concat")


def hadamard(x, y) -> Tensor:
    x, y = _as_tensor(x), _as_tensor(y)
    if x.shape != y.shape:
        raise DimensionError(f"hadamard shape mismatch: {x.shape} vs {y.shape}")
    xv, yv = x.value, y.value

    def backward(g):
        return (g * yv if x.requires_grad else None, g * xv if y.requires_grad else None)

    return _node(xv * yv, (x, y), backward, "hadamard")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.value > 0

    def backward(g):
        return (g * mask,)

    return _node(x.value * mask, (x,), backward, "relu")


def linear_combination(terms: Sequence, coeffs: Sequence[float]) -> Tensor:
    """``sum_k coeffs[k] * terms[k]`` over same-shaped tensors.

    The sum is formed in float64 and rounded once, so a unit coefficient with
    all others zero reproduces its term bitwise.
    """
    ts = [_as_tensor(t) for t in terms]
    if len(ts) != len(coeffs) or not ts:
        raise DimensionError("linear_combination needs one coefficient per term")
    shape = ts[0].shape
    if any(t.shape != shape for t in ts):
        raise DimensionError("linear_combination terms must share a shape")
    acc = np.zeros(shape, dtype=np.float64)
    for t, c in zip(ts, coeffs):
        acc += float(c) * t.value.astype(np.float64)
    cs = [float(c) for c in coeffs]

    def backward(g):
        return tuple(g * _dt()(c) if c != 0.0 else None for c in cs)

    return _node(acc.astype(_dt()), ts, backward, "linear_combination")


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table``; the backward pass scatter-adds."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.value.ndim != 2 or ids.ndim != 1:
        raise DimensionError("embedding_lookup expects table:[V,d] and ids:[n]")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding id out of range [0, {V})")

    def backward(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        return (gt,)

    return _node(table.value[ids], (table,), backward, "embedding_lookup")


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5, name: str = "bn"):
        return cls(
            gamma=parameter(np.ones(channels), name=f"{name}.gamma"),
            beta=parameter(np.zeros(channels), name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=_dt()),
            running_var=np.ones(channels, dtype=_dt()),
            momentum=momentum,
            epsilon=epsilon,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def batchnorm(x, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel batch normalization of ``x`` with shape (n, c).

    Train mode normalizes with the biased batch variance and folds the
    unbiased variance into the running estimate.
    """
    x = _as_tensor(x)
    if x.value.ndim != 2 or x.shape[1] != state.channels:
        raise DimensionError(f"batchnorm expects [n, {state.channels}], got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    n = x.shape[0]
    if n < 1:
        raise DimensionError("batchnorm needs at least one row")
    gamma, beta = state.gamma, state.beta
    xv = x.value
    if mode == "train":
        # statistics and the backward projection are ill-conditioned for small
        # batches, so they run in float64 and round once on output
        x64 = xv.astype(np.float64)
        mean = x64.mean(axis=0)
        xc = x64 - mean
        var = (xc * xc).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + state.epsilon)
        xhat64 = xc * inv_std
        xhat = xhat64.astype(_dt())
        m = state.momentum
        unbiased = var * (n / (n - 1)) if n > 1 else var
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(_dt())
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(_dt())

        def backward(g):
            g64 = g.astype(np.float64)
            dxhat = g64 * gamma.value
            dx = inv_std * (dxhat - dxhat.mean(axis=0) - xhat64 * (dxhat * xhat64).mean(axis=0))
            return (dx.astype(_dt()), (g64 * xhat64).sum(axis=0).astype(_dt()), g.sum(axis=0))
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + _dt()(state.epsilon))).astype(_dt())
        xhat = (xv - state.running_mean) * inv_std

        def backward(g):
            return (g * gamma.value * inv_std, (g * xhat).sum(axis=0), g.sum(axis=0))

    out = xhat * gamma.value + beta.value
    return _node(out.astype(_dt()), (x, gamma, beta), backward, "batchnorm")


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(z, targets, mask=None) -> Tensor:
    """Mean cross-entropy of ``softmax(z)`` against integer targets.

    With ``mask`` only the selected rows enter the mean; the others get an
    exactly-zero gradient. An empty selection yields a constant zero loss.
    """
    z = _as_tensor(z)
    targets = np.asarray(targets, dtype=np.int64)
    if z.value.ndim != 2 or targets.shape != (z.shape[0],):
        raise DimensionError(f"cross-entropy expects z:[n,C], targets:[n]; got {z.shape}, {targets.shape}")
    C = z.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= C):
        raise IndexError(f"target out of range [0, {C})")
    rows = np.arange(z.shape[0]) if mask is None else np.flatnonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        return Tensor(np.zeros((), dtype=_dt()))
    zs = z.value[rows]
    ts = targets[rows]
    logp = log_softmax(zs)
    loss = -logp[np.arange(rows.size), ts].mean(dtype=np.float64)
    n_sel = rows.size

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n_sel), ts] -= 1.0
        full = np.zeros_like(z.value)
        full[rows] = p * (g / n_sel)
        return (full,)

    return _node(np.asarray(loss, dtype=_dt()), (z,), backward, "softmax_cross_entropy")


def sgd_step(params: Iterable[Tensor], lr: float) -> None:
    """In-place ``p -= lr * p.grad`` for every parameter."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    lr32 = _dt()(lr)
    for p in params:
        if p.grad is None:
            continue
        if p.grad.shape != p.value.shape:
            raise DimensionError(f"gradient shape {p.grad.shape} != parameter shape {p.value.shape}")
        if lr32 != 0:
            p.value -= lr32 * p.grad
        _check_finite(p.value, "sgd_step")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(_dt())


@dataclass
class Affine:
    W: Tensor
    b: Tensor

    @classmethod
    def create(cls, rng: np.random.Generator, d_in: int, d_out: int, name: str) -> "Affine":
        return cls(
            W=parameter(uniform_init(rng, (d_in, d_out), d_in), name=f"{name}.W"),
            b=parameter(uniform_init(rng, (d_out,), d_in), name=f"{name}.b"),
        )

    def __call__(self, x) -> Tensor:
        return affine(x, self.W, self.b)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


@dataclass
class Stack:
    """Affine layers with an optional ReLU between consecutive layers."""

    layers: list[Affine] = field(default_factory=list)
    activation: str = "relu"

    @classmethod
    def create(cls, rng, dims: Sequence[int], name: str, activation: str = "relu") -> "Stack":
        if activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {activation!r}")
        layers = [Affine.create(rng, dims[i], dims[i + 1], f"{name}.{i}") for i in range(len(dims) - 1)]
        return cls(layers, activation)

    def __call__(self, x) -> Tensor:
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if self.activation == "relu" and i < len(self.layers) - 1:
                h = relu(h)
        return h

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    @property
    def d_in(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def d_out(self) -> int:
        return self.layers[-1].W.shape[1]
