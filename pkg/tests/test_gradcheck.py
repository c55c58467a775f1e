import numpy as np
import pytest

from dynafuse import grid_core as gc
from dynafuse.gradcheck import OP_TOL, OPS, PIPELINE_TOL, CheckResult, check_op, check_pipeline


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    res = check_op(name, trials=3)
    assert res.ok, res.line()
    assert res.tol == OP_TOL


def test_wrong_gradient_is_caught():
    def bad_square(x):
        tape, (x,) = gc._lift(x)
        return tape.record(x.value ** 2, (x,), lambda g: (g * 3 * x.value,))  # should be 2x

    err = gc.grad_check(lambda x: gc.vsum(bad_square(x)), np.array([0.5, -1.0, 2.0]))
    assert err > 0.3


def test_result_line():
    r = CheckResult("thing", [1e-9, 2e-3], 1e-3)
    assert not r.ok and r.line().startswith("FAIL thing")
    assert CheckResult("x", [1e-9], 1e-3).ok


def test_pipeline_gradient():
    res = check_pipeline(trials=2, probes=8)
    assert res.tol == PIPELINE_TOL
    assert res.ok, res.line()
