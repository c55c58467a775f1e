
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynafuse.align import (AlignLossWeights, align_encode, init_align_encoder, init_modal_head,
                            modal_heatmap_head, triphase_loss)
from dynafuse.heatmap import gaussian_focal_loss
from dynafuse.interact import (attend, cross_interaction, deformable_attend, init_attention,
                               init_potential_conv, potential_energy_map, self_interaction)

from oracles import loop_deformable


@pytest.mark.parametrize("size,heads,points", [(3, 1, 1), (3, 2, 3), (4, 2, 2), (4, 1, 3)])
def test_deformable_matches_loop(size, heads, points):
    rng = np.random.default_rng(size * 100 + heads * 10 + points)
    for _ in range(5):
        p = init_attention(rng, 3, "a.", heads=heads, points=points, noise=0.3)
        p = {k: v + rng.normal(0, 0.7, v.shape) for k, v in p.items()}
        q, v = rng.uniform(0, 1, (3, size, size)), rng.uniform(0, 1, (3, size, size))
        np.testing.assert_allclose(deformable_attend(q, v, p, "a.").value, loop_deformable(q, v, p, "a."),
                                   rtol=0, atol=1e-12)


def test_deformable_init_is_identity(rng):
    # zero offsets and logits, exact identity projections: output = value
    p = init_attention(rng, 3, "a.", heads=2, points=3, noise=0.0)
    v = rng.uniform(size=(3, 4, 5))
    np.testing.assert_allclose(deformable_attend(rng.uniform(size=(3, 4, 5)), v, p, "a.").value, v, atol=1e-12)


@pytest.mark.parametrize("mode", ["deformable", "local", "global"])
def test_attention_shapes(rng, mode):
    p = init_attention(rng, 4, "a.", mode, heads=2, points=2)
    out = attend(rng.uniform(size=(4, 5, 6)), rng.uniform(size=(4, 5, 6)), p, "a.")
    assert out.shape == (4, 5, 6) and np.all(np.isfinite(out.value))


def test_attention_errors(rng):
    with pytest.raises(ValueError):
        init_attention(rng, 3, "a.", mode="sparse")
    with pytest.raises(ValueError):
        init_attention(rng, 3, "a.", heads=0)
    p = init_attention(rng, 3, "a.")
    with pytest.raises(ValueError):
        deformable_attend(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)), p, "a.")
    with pytest.raises(KeyError):
        attend(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), p, "b.")


def test_global_attention_uniform_keys(rng):
    # identical keys everywhere -> every query sees the mean value
    p = init_attention(rng, 2, "g.", "global", heads=1, noise=0.0)
    v = np.ones((2, 3, 3))
    v[:, 0, 0] = 4.0
    p["g.k_w"] = np.zeros_like(p["g.k_w"])
    out = attend(rng.uniform(size=(2, 3, 3)), v, p, "g.").value
    np.testing.assert_allclose(out, np.full((2, 3, 3), v.mean(axis=(1, 2))[0]), atol=1e-12)


def test_cross_and_potential_start_as_noop(rng):
    px = {}
    for pre in ("mi.cross_x.", "mi.cross_y.", "mi.self_x."):
        px.update(init_attention(rng, 3, pre))
    px.update(init_potential_conv(3, 5, "mi.pot_x."))
    hx, hy = rng.uniform(size=(3, 4, 4)), rng.uniform(size=(3, 4, 4))
    cx, cy = cross_interaction(hx, hy, px)
    assert cx.shape == cy.shape == (3, 4, 4)
    pe = potential_energy_map(cx, self_interaction(hx, px, "mi.self_x."), px, "mi.pot_x.")
    assert pe.P.shape == (5, 4, 4) and np.all(pe.P.value == 0)
    with pytest.raises(ValueError):
        cross_interaction(hx, hy[:, :3], px)


def test_encoder_identity_and_depth(rng):
    p = init_align_encoder(rng, 4, "lidar", n_layers=3, identity=True)
    x = rng.uniform(0, 1, (4, 5, 5))  # non-negative: relu is transparent
    np.testing.assert_allclose(align_encode(x, p, "lidar").value, x, atol=1e-12)
    with pytest.raises(ValueError):
        init_align_encoder(rng, 4, "radar")
    with pytest.raises(ValueError):
        init_align_encoder(rng, 4, "lidar", n_layers=0)
    with pytest.raises(ValueError):
        align_encode(rng.uniform(size=(3, 5, 5)), p, "lidar")


def test_modal_head_range(rng):
    p = init_modal_head(rng, 4, 3, "camera")
    h = modal_heatmap_head(rng.normal(size=(4, 5, 5)), p, "camera").value
    assert h.shape == (3, 5, 5) and h.min() > 0 and h.max() < 1


def test_triphase_value(rng):
    fx, fy = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
    hx, hy = rng.uniform(size=(2, 3, 3)), rng.uniform(size=(2, 3, 3))
    fg = rng.uniform(0, 0.9, (2, 3, 3))
    fg[0, 1, 1] = 1.0
    w = AlignLossWeights(0.3, 2.0)
    expect = 0.3 * np.abs(fx - fy).mean() + 2.0 * (float(gaussian_focal_loss(hx, fg).value)
                                                    + float(gaussian_focal_loss(hy, fg).value))
    assert float(triphase_loss(fx, fy, hx, hy, fg, w).value) == pytest.approx(expect, abs=1e-12)
    # identical modalities: only the supervised terms remain
    only_gt = float(triphase_loss(fx, fx, hx, hx, fg, w).value)
    assert only_gt == pytest.approx(4.0 * float(gaussian_focal_loss(hx, fg).value), abs=1e-12)


def test_triphase_weights_switch_terms(rng):
    fx, fy = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    h = rng.uniform(size=(1, 3, 3))
    fg = np.zeros((1, 3, 3))
    assert float(triphase_loss(fx, fy, h, h, fg, AlignLossWeights(0.0, 0.0)).value) == 0.0
    with pytest.raises(ValueError):
        AlignLossWeights(-1.0, 1.0)
    with pytest.raises(ValueError):
        triphase_loss(fx, fy[:1], h, h, fg)


@given(st.integers(0, 2**31))
def test_triphase_nonnegative(seed):
    rng = np.random.default_rng(seed)
    fx, fy = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    hx, hy = rng.uniform(size=(2, 3, 3)), rng.uniform(size=(2, 3, 3))
    assert float(triphase_loss(fx, fy, hx, hy, rng.uniform(0, 1, (2, 3, 3))).value) >= 0
