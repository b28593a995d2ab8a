from dataclasses import dataclass

import numpy as np

from splitfed import cli, gradcheck
from splitfed.gradcheck import LAYER_SUITES, numeric_grad, rel_error, run_gradcheck
from splitfed.nn import Dense


@dataclass(frozen=True)
class FlippedDense(Dense):
    """Dense layer whose input gradient has the wrong sign."""

    kind = "flipped_dense"

    def backward(self, dy, cache, params):
        dx, grads = super().backward(dy, cache, params)
        return -dx, grads


def _flipped(rng):
    return (FlippedDense(3, 2),), (3,), rng.standard_normal((2, 3))


def test_rel_error():
    assert rel_error([1.0, 0.0], [1.0, 0.0]) == 0
    assert rel_error([0.0], [0.0]) == 0
    assert abs(rel_error([1.0], [-1.0]) - 2) < 1e-12


def test_numeric_grad_of_quadratic():
    a = np.array([1.0, -2.0, 3.0])
    g = numeric_grad(lambda: float(np.sum(a**2)), a)
    np.testing.assert_allclose(g, 2 * a, rtol=1e-8)
    assert a.tolist() == [1.0, -2.0, 3.0]


def test_stock_suites_pass():
    results = run_gradcheck(cases=5, seed=1)
    assert {r.suite for r in results} == set(LAYER_SUITES) | {"split"}
    assert all(r.passed for r in results), [r for r in results if not r.passed][:3]


def test_split_check_covers_both_sides():
    targets = {r.target.split(".")[0] for r in run_gradcheck(cases=1, suites={})}
    assert {"cut_activation", "client", "server"} <= targets


def test_wrong_sign_gradient_is_caught():
    results = run_gradcheck(cases=3, suites={"flipped": _flipped}, include_split=False)
    bad = [r for r in results if not r.passed]
    assert bad and all(r.target == "input" for r in bad)
    assert all(r.passed for r in results if r.target.startswith("0.flipped_dense"))


def test_cli_reports_failing_layer(monkeypatch, capsys):
    def broken(rng):
        return (FlippedDense(3, 2), Dense(2, 2)), (3,), rng.standard_normal((2, 3))

    monkeypatch.setitem(gradcheck.LAYER_SUITES, "flipped_dense", broken)
    code = cli.main(["gradcheck", "--cases", "2", "--suite", "flipped_dense", "--no-split"])
    out = capsys.readouterr().out
    assert code == 1
    assert "FAIL flipped_dense" in out and "input rel error" in out
    assert cli.main(["gradcheck", "--cases", "2", "--suite", "dense", "--no-split"]) == 0
