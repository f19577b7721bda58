"""Float64 gradcheck cases for every differentiable primitive.

Each builder returns ``(f, inputs)``: ``f()`` computes a scalar from the
tensors in ``inputs`` (non-scalar outputs are contracted with a fixed random
weighting so every output element contributes).
"""

import numpy as np

from kwsattn.autodiff import (
    BatchNormState, LstmWeights, Tensor, add, batch_norm, bilstm, concat_last, conv_time,
    cross_entropy, dot_scores, lstm_sequence, lstm_step, matmul, mean_weighted, mul, relu,
    reshape, scale, sigmoid, slice_last, softmax, take, tanh, total,
)


def T(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def lstm_weights(rng, n_in, hidden):
    return LstmWeights(T(0.5 * rng.standard_normal((n_in, 4 * hidden))),
                       T(0.5 * rng.standard_normal((hidden, 4 * hidden))),
                       T(0.3 * rng.standard_normal(4 * hidden)))


def _unary(op, data):
    def build(rng):
        x = T(data(rng))
        out_shape = op(Tensor(x.data)).shape
        w = Tensor(rng.standard_normal(out_shape))
        return (lambda: total(mul(op(x), w))), [x]
    return build


def _matmul(rng):
    a, b = T(rng.standard_normal((3, 4))), T(rng.standard_normal((4, 5)))
    w = Tensor(rng.standard_normal((3, 5)))
    return (lambda: total(mul(matmul(a, b), w))), [a, b]


def _matmul_batched(rng):
    a, b = T(rng.standard_normal((2, 3, 4))), T(rng.standard_normal((4, 2)))
    w = Tensor(rng.standard_normal((2, 3, 2)))
    return (lambda: total(mul(matmul(a, b), w))), [a, b]


def _add_bias(rng):
    a, b = T(rng.standard_normal((3, 4))), T(rng.standard_normal(4))
    w = Tensor(rng.standard_normal((3, 4)))
    return (lambda: total(mul(add(a, b), w))), [a, b]


def _mul(rng):
    a, b = T(rng.standard_normal((2, 3))), T(rng.standard_normal((2, 3)))
    w = Tensor(rng.standard_normal((2, 3)))
    return (lambda: total(mul(mul(a, b), w))), [a, b]


def _cross_entropy(rng):
    z = T(rng.standard_normal((4, 5)))
    return (lambda: cross_entropy(z, [0, 3, 4, 1])), [z]


def _cross_entropy_single(rng):
    z = T(rng.standard_normal(6))
    return (lambda: cross_entropy(z, 2)), [z]


def _concat(rng):
    a, b = T(rng.standard_normal((2, 3))), T(rng.standard_normal((2, 2)))
    w = Tensor(rng.standard_normal((2, 5)))
    return (lambda: total(mul(concat_last([a, b]), w))), [a, b]


def _dot_scores(rng):
    v, q = T(rng.standard_normal((2, 5, 3))), T(rng.standard_normal((2, 3)))
    w = Tensor(rng.standard_normal((2, 5)))
    return (lambda: total(mul(dot_scores(v, q), w))), [v, q]


def _mean_weighted(rng):
    v, a = T(rng.standard_normal((2, 5, 3))), T(rng.standard_normal((2, 5)))
    w = Tensor(rng.standard_normal((2, 3)))
    return (lambda: total(mul(mean_weighted(v, a), w))), [v, a]


def _conv_time(rng):
    x = T(rng.standard_normal((2, 7, 3, 2)))
    k = T(rng.standard_normal((5, 1, 2, 3)))
    b = T(rng.standard_normal(3))
    w = Tensor(rng.standard_normal((2, 7, 3, 3)))
    return (lambda: total(mul(conv_time(x, k, b), w))), [x, k, b]


def _batch_norm(mode):
    def build(rng):
        x = T(rng.standard_normal((3, 4, 2)) * 2 + 1)
        g, b = T(rng.uniform(0.5, 1.5, 2)), T(rng.standard_normal(2))
        state = BatchNormState(np.array([0.3, -0.2]), np.array([1.5, 0.7]))
        w = Tensor(rng.standard_normal((3, 4, 2)))

        def f():
            # fresh copy so repeated evaluations see identical running stats
            s = BatchNormState(state.running_mean.copy(), state.running_var.copy())
            return total(mul(batch_norm(x, g, b, s, mode), w))
        return f, [x, g, b]
    return build


def _lstm_step(rng):
    x, h, c = T(rng.standard_normal((2, 4))), T(rng.standard_normal((2, 3))), T(rng.standard_normal((2, 3)))
    lw = lstm_weights(rng, 4, 3)
    wh, wc = Tensor(rng.standard_normal((2, 3))), Tensor(rng.standard_normal((2, 3)))

    def f():
        hn, cn = lstm_step(x, h, c, lw)
        return add(total(mul(hn, wh)), total(mul(cn, wc)))
    return f, [x, h, c, lw.W, lw.U, lw.b]


def _lstm_chain(rng):
    """Three chained composite steps, I=4, H=3."""
    xs = T(rng.standard_normal((3, 4)))
    lw = lstm_weights(rng, 4, 3)
    w = Tensor(rng.standard_normal(3))

    def f():
        h = c = Tensor(np.zeros(3))
        for t in range(3):
            h, c = lstm_step(take(xs, t, 0), h, c, lw)
        return total(mul(h, w))
    return f, [xs, lw.W, lw.U, lw.b]


def _lstm_sequence(reverse):
    def build(rng):
        x = T(rng.standard_normal((2, 5, 3)))
        lw = lstm_weights(rng, 3, 4)
        w = Tensor(rng.standard_normal((2, 5, 4)))
        return (lambda: total(mul(lstm_sequence(x, lw, reverse=reverse), w))), [x, lw.W, lw.U, lw.b]
    return build


def _bilstm(rng):
    x = T(rng.standard_normal((4, 3)))
    fw, bw = lstm_weights(rng, 3, 2), lstm_weights(rng, 3, 2)
    w = Tensor(rng.standard_normal((4, 4)))
    return (lambda: total(mul(bilstm(x, fw, bw), w))), [x, fw.W, fw.U, fw.b, bw.W, bw.U, bw.b]


OP_CASES = {
    "matmul": _matmul,
    "matmul_batched": _matmul_batched,
    "add_bias": _add_bias,
    "mul": _mul,
    "scale": _unary(lambda x: scale(x, -2.5), lambda r: r.standard_normal((3, 2))),
    "sigmoid": _unary(sigmoid, lambda r: 3 * r.standard_normal((3, 4))),
    "tanh": _unary(tanh, lambda r: 2 * r.standard_normal((3, 4))),
    "relu": _unary(relu, lambda r: away_from_zero(r, (3, 4))),
    "softmax": _unary(softmax, lambda r: 2 * r.standard_normal((3, 5))),
    "cross_entropy": _cross_entropy,
    "cross_entropy_single": _cross_entropy_single,
    "sum": _unary(total, lambda r: r.standard_normal((2, 3))),
    "take": _unary(lambda x: take(x, 2, 1), lambda r: r.standard_normal((2, 5, 3))),
    "slice_last": _unary(lambda x: slice_last(x, 1, 4), lambda r: r.standard_normal((2, 6))),
    "concat_last": _concat,
    "reshape": _unary(lambda x: reshape(x, (3, 4)), lambda r: r.standard_normal((2, 6))),
    "dot_scores": _dot_scores,
    "mean_weighted": _mean_weighted,
    "conv_time": _conv_time,
    "batch_norm_train": _batch_norm("train"),
    "batch_norm_infer": _batch_norm("infer"),
    "lstm_step": _lstm_step,
    "lstm_step_chain3": _lstm_chain,
    "lstm_sequence": _lstm_sequence(False),
    "lstm_sequence_reverse": _lstm_sequence(True),
    "bilstm": _bilstm,
}
