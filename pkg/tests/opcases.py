"""Random gradient-check cases for each differentiable op.

Each case builds inputs, runs the op through the autodiff core, and compares
every input gradient against central differences of an independent float64
reference written directly in numpy.
"""
import numpy as np

from epd_sgg.numcore import (
    BatchNormState,
    Tensor,
    affine,
    batchnorm,
    concat,
    embedding_lookup,
    hadamard,
    parameter,
    softmax_cross_entropy,
)
from gradcheck import numeric_grad_array, rel_error


def _leaf(a):
    return parameter(np.asarray(a, dtype=np.float32))


def _projected(ref, upstream):
    return lambda *args: float((ref(*args) * upstream).sum())


def _dims(rng, lo=1, hi=5, k=2):
    return [int(rng.integers(lo, hi + 1)) for _ in range(k)]


def case_affine(rng):
    n, d_in = _dims(rng)
    d_out = int(rng.integers(1, 6))
    x, W, b = (_leaf(rng.standard_normal(s)) for s in ((n, d_in), (d_in, d_out), (d_out,)))
    out = affine(x, W, b)
    R = rng.standard_normal(out.shape)
    out.backward(R)
    xv, Wv, bv = (t.value.astype(np.float64) for t in (x, W, b))
    ref = lambda x_, W_, b_: x_ @ W_ + b_  # noqa: E731
    f = _projected(ref, R)
    return [
        rel_error(x.grad, numeric_grad_array(lambda a: f(a, Wv, bv), xv)),
        rel_error(W.grad, numeric_grad_array(lambda a: f(xv, a, bv), Wv)),
        rel_error(b.grad, numeric_grad_array(lambda a: f(xv, Wv, a), bv)),
    ]


def case_concat(rng):
    n = int(rng.integers(1, 5))
    widths = [int(rng.integers(1, 4)) for _ in range(int(rng.integers(2, 4)))]
    xs = [_leaf(rng.standard_normal((n, w))) for w in widths]
    out = concat(xs)
    R = rng.standard_normal(out.shape)
    out.backward(R)
    vals = [t.value.astype(np.float64) for t in xs]
    errs = []
    for k, t in enumerate(xs):
        def f(a, k=k):
            parts = list(vals)
            parts[k] = a
            return float((np.hstack(parts) * R).sum())
        errs.append(rel_error(t.grad, numeric_grad_array(f, vals[k])))
    return errs


def case_hadamard(rng):
    shape = tuple(_dims(rng))
    x, y = _leaf(rng.standard_normal(shape)), _leaf(rng.standard_normal(shape))
    out = hadamard(x, y)
    R = rng.standard_normal(shape)
    out.backward(R)
    xv, yv = x.value.astype(np.float64), y.value.astype(np.float64)
    return [
        rel_error(x.grad, numeric_grad_array(lambda a: float((a * yv * R).sum()), xv)),
        rel_error(y.grad, numeric_grad_array(lambda a: float((xv * a * R).sum()), yv)),
    ]


def _ref_batchnorm(x, g, b, eps):
    mu = x.mean(axis=0)
    var = ((x - mu) ** 2).mean(axis=0)
    return g * (x - mu) / np.sqrt(var + eps) + b


def case_batchnorm(rng):
    n = int(rng.integers(2, 7))
    c = int(rng.integers(1, 5))
    state = BatchNormState.create(c)
    state.gamma.value[:] = rng.uniform(0.5, 1.5, c)
    state.beta.value[:] = rng.standard_normal(c)
    # central differences at step h carry an O((h / std)^2) truncation error,
    # so channels whose batch spread is close to h are resampled
    while True:
        xs = rng.standard_normal((n, c)) * rng.uniform(0.5, 2.0)
        if xs.std(axis=0).min() >= 0.1:
            break
    x = _leaf(xs)
    out = batchnorm(x, state, "train")
    R = rng.standard_normal(out.shape)
    out.backward(R)
    xv = x.value.astype(np.float64)
    gv = state.gamma.value.astype(np.float64)
    bv = state.beta.value.astype(np.float64)
    eps = state.epsilon
    f = _projected(lambda x_, g_, b_: _ref_batchnorm(x_, g_, b_, eps), R)
    return [
        rel_error(x.grad, numeric_grad_array(lambda a: f(a, gv, bv), xv)),
        rel_error(state.gamma.grad, numeric_grad_array(lambda a: f(xv, a, bv), gv)),
        rel_error(state.beta.grad, numeric_grad_array(lambda a: f(xv, gv, a), bv)),
    ]


def _ref_ce(z, t):
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1)) + m[:, 0]
    return float(np.mean(lse - z[np.arange(len(t)), t]))


def case_softmax_ce(rng):
    n = int(rng.integers(1, 6))
    C = int(rng.integers(2, 7))
    z = _leaf(rng.standard_normal((n, C)) * 2)
    t = rng.integers(0, C, size=n)
    loss = softmax_cross_entropy(z, t)
    loss.backward()
    zv = z.value.astype(np.float64)
    return [rel_error(z.grad, numeric_grad_array(lambda a: _ref_ce(a, t), zv))]


def case_embedding(rng):
    V = int(rng.integers(1, 6))
    d = int(rng.integers(1, 4))
    n = int(rng.integers(1, 7))
    table = _leaf(rng.standard_normal((V, d)))
    ids = rng.integers(0, V, size=n)
    out = embedding_lookup(table, ids)
    R = rng.standard_normal(out.shape)
    out.backward(R)
    tv = table.value.astype(np.float64)
    return [rel_error(table.grad, numeric_grad_array(lambda a: float((a[ids] * R).sum()), tv))]


CASES = {
    "affine": case_affine,
    "concat": case_concat,
    "hadamard": case_hadamard,
    "batchnorm": case_batchnorm,
    "softmax_cross_entropy": case_softmax_ce,
    "embedding_lookup": case_embedding,
}


def worst_error(name: str, num_cases: int, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_cases):
        worst = max(worst, *CASES[name](rng))
    return worst


__all__ = ["CASES", "Tensor", "worst_error"]
