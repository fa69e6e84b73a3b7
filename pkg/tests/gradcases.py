"""Finite-difference test cases for every tensor primitive, shared by several suites."""

import numpy as np

from selattn import tensor as T
from selattn.tensor import Tensor


def param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def primitive_cases(rng):
    """name -> (loss builder, parameters); each loss is a scalar of generic weights."""
    a, b = param(rng, 3, 4), param(rng, 3, 4)
    wc, we, ws = (Tensor(rng.normal(size=sh)) for sh in ((3, 8), (2, 3, 4), (2, 3, 4)))
    m1, m2 = param(rng, 2, 3, 4), param(rng, 4, 5)
    vec = param(rng, 4)
    gain, bias = param(rng, 4), param(rng, 4)
    table = param(rng, 6, 4)
    logits = param(rng, 2, 3, 5)
    w = Tensor(rng.normal(size=(3, 4)))
    w5 = Tensor(rng.normal(size=(2, 3, 5)))
    ids = np.array([[0, 5, 2], [2, 2, 1]])
    mask = rng.random((3, 4)) < 0.3
    keep = (rng.random((3, 4)) > 0.4) / 0.6
    lw = param(rng, 4, 4)

    def dot(t, wt):
        return T.tsum(T.mul(t, wt))

    return {
        "add": (lambda: dot(T.add(a, vec), w), [a, vec]),
        "sub": (lambda: dot(T.sub(a, b), w), [a, b]),
        "mul": (lambda: dot(T.mul(a, b), w), [a, b]),
        "scale": (lambda: dot(T.scale(a, -1.7), w), [a]),
        "matmul": (lambda: T.tsum(T.mul(T.matmul(m1, m2), Tensor(np.ones((2, 3, 5))))), [m1, m2]),
        "matmul_batched": (lambda: dot(T.matmul(a, T.transpose(b, (1, 0))), Tensor(np.eye(3))), [a, b]),
        "linear": (lambda: dot(T.linear(a, lw, vec), w), [a, lw, vec]),
        "concat": (lambda: T.tsum(T.mul(T.concat([a, b], axis=1), wc)), [a, b]),
        "slice": (lambda: dot(T.index(a, (slice(0, 2), slice(1, 4))), Tensor(np.ones((2, 3)))), [a]),
        "reshape_transpose": (lambda: dot(T.transpose(T.reshape(a, (4, 3)), (1, 0)), w), [a]),
        "embedding": (lambda: T.tsum(T.mul(T.embedding(table, ids), we)), [table]),
        "relu": (lambda: dot(T.relu(a), w), [a]),
        "sigmoid": (lambda: dot(T.sigmoid(a), w), [a]),
        "masked_fill": (lambda: dot(T.masked_fill(a, mask, -3.0), w), [a]),
        "softmax": (lambda: dot(T.softmax(a, axis=-1), w), [a]),
        "softmax_axis0": (lambda: dot(T.softmax(a, axis=0), w), [a]),
        "layer_norm": (lambda: dot(T.layer_norm(a, gain, bias), w), [a, gain, bias]),
        "dropout": (lambda: dot(T.mul(a, keep), w), [a]),
        "xent": (lambda: T.cross_entropy_label_smoothed(logits, np.array([[0, 4, 2], [1, 1, 3]]), 0.1), [logits]),
        "xent_mean_weighted": (lambda: T.cross_entropy_label_smoothed(
            logits, np.array([[0, 4, 2], [1, 1, 3]]), 0.2, np.array([[1, 1, 0], [1, 0, 1.0]]), "mean"), [logits]),
        "mean": (lambda: T.tsum(T.mul(T.mean(m1, axis=1), w5[:, 0, :4])), [m1]),
        "stack": (lambda: T.tsum(T.mul(T.stack([a, b], axis=0), ws)), [a, b]),
        "dropout_fixed_rng": (lambda: dot(T.dropout(a, 0.25, np.random.default_rng(7), True), w), [a]),
    }
