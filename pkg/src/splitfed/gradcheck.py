"""Central finite-difference checks of every layer kind and of the split backward pass.

All checks run in double precision with step ``1e-5``. The error of a
gradient tensor is ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-7)``
using Euclidean norms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from splitfed.nn import (
    BatchNorm1D, Conv1D, Dense, GlobalAveragePool1D, MaxPool1D, ReLU, ResidualEnd, ResidualStart,
    backward, build_model, forward, softmax_cross_entropy,
)
from splitfed.partition import CutGradient, client_backward, client_forward, server_step, split_at

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    suite: str
    case: int
    target: str
    error: float
    passed: bool


def rel_error(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-7))


def numeric_grad(f, arr, step=STEP):
    """Central differences of scalar ``f()`` w.r.t. every element of ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = f()
        flat[i] = orig - step
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def _away_from_zero(x, margin=1e-3):
    return np.where(np.abs(x) < margin, np.copysign(margin, x) + x, x)


def _distinct(rng, shape):
    """Values with pairwise gaps far above the finite-difference step (no max-pool ties)."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.05 - n * 0.025 + rng.uniform(-0.01, 0.01, n)).reshape(shape)


# Each generator returns (layers, input_shape, batch array).
def _conv(rng):
    c_in, c_out = rng.integers(1, 4, size=2)
    kernel, stride = int(rng.integers(1, 6)), int(rng.integers(1, 4))
    padding = "same" if rng.random() < 0.7 else "valid"
    length = int(rng.integers(max(kernel, 3), 13))
    n = int(rng.integers(1, 4))
    layer = Conv1D(int(c_in), int(c_out), kernel, stride, padding, bias=bool(rng.random() < 0.8))
    return (layer,), (int(c_in), length), rng.standard_normal((n, c_in, length))


def _batchnorm(rng):
    c = int(rng.integers(1, 4))
    n = int(rng.integers(2, 5))
    if rng.random() < 0.5:
        shape = (c, int(rng.integers(2, 8)))
    else:
        shape = (c,)
    return (BatchNorm1D(c),), shape, rng.standard_normal((n,) + shape) * 2 + 0.5


def _relu(rng):
    shape = (int(rng.integers(1, 4)), int(rng.integers(2, 10)))
    n = int(rng.integers(1, 4))
    return (ReLU(),), shape, _away_from_zero(rng.standard_normal((n,) + shape))


def _maxpool(rng):
    window = int(rng.integers(1, 4))
    stride = int(rng.integers(0, 4))
    shape = (int(rng.integers(1, 4)), int(rng.integers(window, 12)))
    n = int(rng.integers(1, 4))
    return (MaxPool1D(window, stride),), shape, _distinct(rng, (n,) + shape)


def _gap(rng):
    shape = (int(rng.integers(1, 5)), int(rng.integers(1, 10)))
    n = int(rng.integers(1, 4))
    return (GlobalAveragePool1D(),), shape, rng.standard_normal((n,) + shape)


def _dense(rng):
    f_in, f_out = (int(v) for v in rng.integers(1, 6, size=2))
    n = int(rng.integers(1, 4))
    return (Dense(f_in, f_out, bias=bool(rng.random() < 0.8)),), (f_in,), rng.standard_normal((n, f_in))


def _residual(rng):
    c = int(rng.integers(1, 3))
    c_out = c + int(rng.integers(0, 2))
    pool = int(rng.integers(1, 3))
    length = 2 * int(rng.integers(2, 6))
    n = int(rng.integers(1, 3))
    layers = (
        ResidualStart(),
        Conv1D(c, c_out, int(rng.integers(1, 4)), stride=pool),
        Conv1D(c_out, c_out, int(rng.integers(1, 4))),
        ResidualEnd(pool=pool, pad=c_out > c),
    )
    return layers, (c, length), _distinct(rng, (n, c, length))


LAYER_SUITES = {
    "conv1d": _conv,
    "batchnorm1d": _batchnorm,
    "relu": _relu,
    "maxpool1d": _maxpool,
    "gap": _gap,
    "dense": _dense,
    "residual": _residual,
}


def check_chain(layers, input_shape, x, rng, suite="chain", case=0, tol=TOLERANCE):
    """Compare analytic input/parameter gradients of ``sum(R * out)`` against central differences."""
    model = build_model(layers, input_shape, seed=int(rng.integers(1 << 31)), dtype=np.float64)
    for d in model.params:
        for k, v in d.items():
            if k in ("bias", "shift", "scale"):
                v += rng.standard_normal(v.shape) * 0.5
    x = np.array(x, dtype=np.float64)
    _, out = forward(model, x, "train")
    proj = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(forward(model, x, "train")[1] * proj))

    tape, _ = forward(model, x, "train")
    grads, dx = backward(model, tape, proj)
    results = []
    err = rel_error(dx, numeric_grad(loss, x))
    results.append(CheckResult(suite, case, "input", err, err < tol))
    for i, d in enumerate(model.params):
        for name, v in d.items():
            err = rel_error(grads[i][name], numeric_grad(loss, v))
            results.append(CheckResult(suite, case, f"{i}.{layers[i].kind}.{name}", err, err < tol))
    return results


def _split_case(rng, case, tol=TOLERANCE):
    c = int(rng.integers(1, 3))
    h = int(rng.integers(2, 4))
    length = int(rng.integers(6, 12))
    n = int(rng.integers(2, 4))
    layers = (
        Conv1D(c, h, 3), ReLU(), Conv1D(h, h, 3, stride=2, bias=False), BatchNorm1D(h), ReLU(),
        GlobalAveragePool1D(), Dense(h, 2),
    )
    model = build_model(layers, (c, length), seed=int(rng.integers(1 << 31)), dtype=np.float64)
    split = split_at(model, 2)
    x = rng.standard_normal((n, c, length))
    labels = rng.integers(0, 2, n)

    def full_loss():
        return softmax_cross_entropy(forward(model, x, "train")[1], labels)[0]

    tape, act = client_forward(split, x)
    _, server_grads, cut_grad = server_step(split, act, labels)
    client_grads = client_backward(split, tape, cut_grad)
    results = []

    def cut_loss():
        return softmax_cross_entropy(forward(split.server_part, act.tensor, "train")[1], labels)[0]

    err = rel_error(cut_grad.tensor, numeric_grad(cut_loss, act.tensor))
    results.append(CheckResult("split", case, "cut_activation", err, err < tol))
    for side, part, grads in (("client", split.client_part, client_grads), ("server", split.server_part, server_grads)):
        for i, d in enumerate(part.params):
            for name, v in d.items():
                err = rel_error(grads[i][name], numeric_grad(full_loss, v))
                results.append(CheckResult("split", case, f"{side}.{i}.{part.layers[i].kind}.{name}", err, err < tol))
    return results


def run_gradcheck(cases: int = 50, seed: int = 0, suites=None, include_split=True, tol=TOLERANCE):
    """Run ``cases`` randomized checks per suite; returns every CheckResult."""
    suites = LAYER_SUITES if suites is None else suites
    results = []
    for s_idx, (name, gen) in enumerate(suites.items()):
        rng = np.random.default_rng([seed, s_idx])
        for case in range(cases):
            layers, shape, x = gen(rng)
            results.extend(check_chain(layers, shape, x, rng, name, case, tol))
    if include_split:
        rng = np.random.default_rng([seed, len(suites)])
        for case in range(cases):
            results.extend(_split_case(rng, case, tol))
    return results
