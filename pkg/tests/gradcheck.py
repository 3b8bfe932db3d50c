"""Finite-difference checks of every graph op through the engine.

Each case builds a tiny graph ``loss = sum(op(params) * R)`` with a fixed random
projection R, runs backward, and compares every parameter gradient with central
differences (h = 1e-5, double precision).
"""

import numpy as np

from fishnet.tensor import Graph
from oracles import numeric_grad, rel_error

H = 1e-5
TOL = 1e-4


def _spread(rng, shape, gap=0.05):
    """Values with pairwise gaps >= ``gap`` so max-pool argmax is stable under h."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap + rng.uniform(-1, 1)).reshape(shape)


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.05, 1.0, size=shape)


def _conv(rng):
    groups = int(rng.choice([1, 2]))
    cin = groups * int(rng.integers(1, 3))
    cout = groups * int(rng.integers(1, 3))
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    dilation = int(rng.integers(1, 3))
    padding = int(rng.integers(0, 2))
    size = dilation * (k - 1) + 1 + int(rng.integers(0, 4))
    x = rng.standard_normal((int(rng.integers(1, 3)), cin, size, size + int(rng.integers(0, 2))))
    w = rng.standard_normal((cout, cin // groups, k, k))
    return [x, w], lambda g, p: g.conv2d(p[0], p[1], stride, padding, dilation, groups)


def _maxpool(rng):
    k = int(rng.choice([2, 3]))
    pad = 1 if k == 3 else 0
    h = int(rng.integers(k, k + 4))
    x = _spread(rng, (int(rng.integers(1, 3)), int(rng.integers(1, 3)), h, h + int(rng.integers(0, 2))))
    return [x], lambda g, p: g.maxpool(p[0], k, 2, padding=pad)


def _avgpool(rng):
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                             2 * int(rng.integers(1, 4)), 2 * int(rng.integers(1, 4))))
    return [x], lambda g, p: g.avgpool(p[0], 2, 2)


def _upsample(rng):
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                             int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    return [x], lambda g, p: g.upsample_nearest(p[0], 2)


def _concat(rng):
    n, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
    xs = [rng.standard_normal((n, int(rng.integers(1, 4)), h, w))
          for _ in range(int(rng.integers(1, 4)))]
    return xs, lambda g, p: g.concat(p)


def _channel_reduce(rng):
    k = int(rng.integers(1, 4))
    x = rng.standard_normal((int(rng.integers(1, 3)), k * int(rng.integers(1, 4)),
                             int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    return [x], lambda g, p: g.channel_reduce(p[0], k)


def _add(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)),
             int(rng.integers(1, 4)))
    return ([rng.standard_normal(shape), rng.standard_normal(shape)],
            lambda g, p: g.add(p[0], p[1]))


def _mul(rng):
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), 2)
    other = shape if rng.random() < 0.5 else (shape[0], shape[1], 1, 1)
    return ([rng.standard_normal(shape), rng.standard_normal(other)],
            lambda g, p: g.mul(p[0], p[1]))


def _relu(rng):
    x = _away_from_zero(rng, (int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                              int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    return [x], lambda g, p: g.relu(p[0])


def _sigmoid(rng):
    x = 3 * rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                                 int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    return [x], lambda g, p: g.sigmoid(p[0])


def _bn_shape(rng):
    return (int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)),
            int(rng.integers(2, 4)))


def _batchnorm(rng):
    shape = _bn_shape(rng)
    c = shape[1]
    x = 2 * rng.standard_normal(shape) + 0.5
    return ([x, 1 + 0.5 * rng.standard_normal(c), rng.standard_normal(c)],
            lambda g, p: g.batchnorm(p[0], p[1], p[2]))


def _batchnorm_eval(rng):
    shape = _bn_shape(rng)
    c = shape[1]
    mean, var = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def build(g, p):
        out = g.batchnorm(p[0], p[1], p[2])
        out.state["running_mean"][...] = mean
        out.state["running_var"][...] = var
        return out

    return ([rng.standard_normal(shape), rng.standard_normal(c), rng.standard_normal(c)],
            build, False)


def _linear(rng):
    n, i, o = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
    return ([rng.standard_normal((n, i)), rng.standard_normal((o, i))],
            lambda g, p: g.linear(p[0], p[1]))


def _gap(rng):
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                             int(rng.integers(1, 5)), int(rng.integers(1, 5))))
    return [x], lambda g, p: g.global_avg_pool(p[0])


def _flatten(rng):
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                             int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    return [x], lambda g, p: g.flatten(p[0])


def _sum(rng):
    x = rng.standard_normal((int(rng.integers(1, 3)), int(rng.integers(1, 4)),
                             int(rng.integers(1, 4)), int(rng.integers(1, 4))))
    return [x], lambda g, p: g.sum(p[0])


def _softmax_xent(rng):
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    labels = rng.integers(0, c, n)

    def build(g, p):
        y = g.input("labels", (n,), dtype=np.int64)
        build.feeds = {y: labels}
        return g.softmax_xent(p[0], y)

    return [2 * rng.standard_normal((n, c))], build


CASES = {
    "conv2d": _conv, "maxpool": _maxpool, "avgpool": _avgpool, "upsample_nearest": _upsample,
    "concat": _concat, "channel_reduce": _channel_reduce, "add": _add, "mul": _mul,
    "relu": _relu, "sigmoid": _sigmoid, "batchnorm": _batchnorm,
    "batchnorm_eval": _batchnorm_eval, "linear": _linear, "global_avg_pool": _gap,
    "flatten": _flatten, "sum": _sum, "softmax_xent": _softmax_xent,
}


def check_case(op, rng):
    """Max elementwise relative error over all inputs for one random case."""
    spec = CASES[op](rng)
    inputs, build = spec[0], spec[1]
    training = spec[2] if len(spec) > 2 else True
    g = Graph(np.float64)
    params = [g.parameter(f"p{i}", v) for i, v in enumerate(inputs)]
    build.feeds = {}
    out = build(g, params)
    feeds = dict(build.feeds)
    if out.shape == ():
        loss = out
    else:
        r = g.input("r", out.shape)
        feeds[r] = rng.standard_normal(out.shape)
        loss = g.sum(g.mul(out, r))

    def f():
        return float(g.forward(feeds, training=training))

    f()
    g.backward(loss)
    analytic = [p.output.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        num = numeric_grad(f, p.output.values, H)
        worst = max(worst, rel_error(a, num))
    return worst, tuple(tuple(v.shape) for v in inputs)


def run_suite(op, cases=20, seed=0):
    """Check ``cases`` cases with pairwise distinct input shapes."""
    rng = np.random.default_rng([seed, sorted(CASES).index(op)])
    results = {}
    for _ in range(50 * cases):
        err, shapes = check_case(op, rng)
        results[shapes] = max(err, results.get(shapes, 0.0))
        if len(results) == cases:
            break
    return [(err, shapes) for shapes, err in results.items()]
