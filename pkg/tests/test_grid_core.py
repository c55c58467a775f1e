
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import correlate

from dynafuse import grid_core as gc
from dynafuse.grid_core import FeatureGrid, GridSpec, Tape
from oracles import naive_bilinear


def test_grid_validation():
    with pytest.raises(ValueError):
        FeatureGrid(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        FeatureGrid(np.full((1, 2, 2), np.nan))
    with pytest.raises(ValueError):
        gc.grid_new(0, 2, 2)
    g = gc.grid_new(2, 3, 4, fill=1.5)
    assert g.shape == (2, 3, 4) and np.all(g.data == 1.5)
    with pytest.raises(ValueError):
        g.data[0, 0, 0] = 2.0


def test_grid_spec():
    spec = GridSpec(-4, 4, -2, 2, 0.5)
    assert (spec.width, spec.height) == (16, 8)
    assert spec.cell_of(-4.0, -2.0) == (0, 0)
    assert spec.cell_of(3.99, 1.99) == (7, 15)
    assert not spec.contains(4.0, 0.0)
    gx, gy = spec.cell_centers()
    assert gx[0, 0] == -3.75 and gy[0, 0] == -1.75
    with pytest.raises(ValueError):
        GridSpec(1, 0, 0, 1, 0.5)
    with pytest.raises(ValueError):
        GridSpec(0, 1, 0, 1, 0.0)


@pytest.mark.parametrize("suffix", [".json", ".npy"])
def test_grid_roundtrip(tmp_path, rng, suffix):
    g = FeatureGrid(rng.normal(size=(3, 4, 5)))
    p = tmp_path / f"g{suffix}"
    gc.save_grid(g, p)
    assert gc.load_grid(p) == g


def test_bilinear_corners_and_padding():
    vals = np.arange(12, dtype=float).reshape(1, 3, 4)
    g = FeatureGrid(vals)
    assert gc.bilinear_sample(g, 2, 1)[0] == vals[0, 1, 2]
    assert gc.bilinear_sample(g, 0.5, 0)[0] == pytest.approx(0.5)
    # half a cell outside the left edge: half weight on the padding zero
    assert gc.bilinear_sample(g, -0.5, 0)[0] == pytest.approx(0.0)
    assert gc.bilinear_sample(g, -0.5, 1)[0] == pytest.approx(0.5 * vals[0, 1, 0])
    assert gc.bilinear_sample(g, -5, -5)[0] == 0.0


@given(st.floats(-1.5, 5.5), st.floats(-1.5, 4.5), st.integers(0, 2**31))
def test_bilinear_matches_naive(x, y, seed):
    vals = np.random.default_rng(seed).normal(size=(2, 4, 5))
    np.testing.assert_allclose(gc.bilinear_sample(FeatureGrid(vals), x, y), naive_bilinear(vals, x, y),
                               rtol=0, atol=1e-12)


def test_sample_batched_matches_naive(rng):
    vals = rng.normal(size=(2, 3, 4, 5))
    xs, ys = rng.uniform(-1, 5, (2, 6)), rng.uniform(-1, 4, (2, 6))
    out = gc.sample(vals, xs, ys).value
    for b in range(2):
        for p in range(6):
            np.testing.assert_allclose(out[b, :, p], naive_bilinear(vals[b], xs[b, p], ys[b, p]), atol=1e-12)


def test_deform_sum_matches_naive(rng):
    vals = rng.normal(size=(2, 3, 4, 4))
    xs, ys = rng.uniform(-1, 4, (2, 3, 3, 4)), rng.uniform(-1, 4, (2, 3, 3, 4))
    a = rng.uniform(size=(2, 3, 3, 4))
    out = gc.deform_sum(vals, xs, ys, a).value
    ref = np.zeros((2, 3, 3, 4))
    for m in range(2):
        for i in range(3):
            for j in range(4):
                for k in range(3):
                    ref[m, :, i, j] += a[m, k, i, j] * naive_bilinear(vals[m], xs[m, k, i, j], ys[m, k, i, j])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv2d_matches_scipy(rng):
    x = rng.normal(size=(3, 6, 7))
    w = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    out = gc.conv2d(x, w, b).value
    ref = np.stack([sum(correlate(x[i], w[o, i], mode="same") for i in range(3)) + b[o] for o in range(2)])
    np.testing.assert_allclose(out, ref, atol=1e-12)
    with pytest.raises(ValueError):
        gc.conv2d(x, rng.normal(size=(2, 3, 2, 2)))
    with pytest.raises(ValueError):
        gc.conv2d(x, rng.normal(size=(2, 4, 3, 3)))


def test_backward_basic():
    tape = Tape()
    x = tape.leaf(np.array([1.0, 2.0, 3.0]), name="x")
    y = gc.vsum(x * x * 2.0 + gc.exp(x))
    g = gc.backward(tape, y)["x"]
    np.testing.assert_allclose(g, 4 * np.array([1.0, 2.0, 3.0]) + np.exp([1.0, 2.0, 3.0]))


def test_backward_rejects_foreign_loss():
    t1, t2 = Tape(), Tape()
    t1.leaf(np.ones(2), name="a")
    y = gc.vsum(t2.leaf(np.ones(2), name="b"))
    with pytest.raises(ValueError):
        gc.backward(t1, y)


def test_empty_tape_is_reused():
    # an empty tape is falsy; ops must still record on it
    tape = Tape()
    v = gc.as_var(np.ones(2), tape)
    assert v.tape is tape


def test_stop_gradient_blocks():
    tape = Tape()
    x = tape.leaf(np.array([2.0]), name="x")
    y = gc.vsum(gc.stop_gradient(x) * x)
    assert gc.backward(tape, y)["x"][0] == pytest.approx(2.0)


def test_record_branches_sees_relu_flip():
    def run(v):
        with gc.record_branches() as rec:
            gc.relu(gc.as_var(np.array([v, 1.0])))
        return rec

    assert run(0.1) == run(0.2)
    assert run(0.1) != run(-0.1)


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        gc.grad_check(lambda v: gc.vsum(v), np.ones(2), eps=0.0)


def test_release_drops_graph():
    tape = Tape()
    x = tape.leaf(np.ones(3), name="x")
    y = gc.vsum(gc.square(x) * 2.0)
    assert gc.backward(tape, y)["x"].tolist() == [4.0, 4.0, 4.0]
    tape.release()
    assert len(tape) == 0 and y.parents == () and y.vjp is None
    assert y.value == 6.0
