import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dynafuse import grid_core as gc
from dynafuse.adaptive_head import (Instance, LossCoeffs, MatchedTerm, box_vector, decode_maps, focal_cls_loss,
                                    head_outputs, init_head, instance_quality, l1_loc_loss, match_instances,
                                    total_loss)
from dynafuse.boxes import BevBox, bev_iou
from dynafuse.evaluation import ap_from_flags, average_precision, toy_map


def inst(k, x, y, s):
    return Instance(BevBox(k, x, y, 1.0, 1.0, score=s), np.zeros(4), (0, 0))


# -- boxes / quality --------------------------------------------------------

def test_bev_iou_hand_cases():
    a = BevBox(0, 0, 0, 2, 2)
    assert bev_iou(a, a) == 1.0
    assert bev_iou(a, BevBox(0, 5, 0, 2, 2)) == 0.0
    assert bev_iou(a, BevBox(0, 1, 0, 2, 2)) == 1 / 3
    assert bev_iou(a, BevBox(0, 2, 0, 2, 2)) == 0.0  # touching edges
    # yaw is ignored
    assert bev_iou(a, BevBox(0, 0, 0, 2, 2, yaw=0.7)) == 1.0


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 4), st.floats(0.1, 4))
def test_bev_iou_bounds_and_symmetry(x, y, l, w):
    a, b = BevBox(0, 0, 0, 2, 1), BevBox(0, x, y, l, w)
    v = bev_iou(a, b)
    assert 0 <= v <= 1 and v == pytest.approx(bev_iou(b, a))


def test_box_validation():
    with pytest.raises(ValueError):
        BevBox(0, 0, 0, 0, 1)
    with pytest.raises(ValueError):
        BevBox(0, 0, 0, 1, 1, score=1.5)
    b = BevBox(1, 2, 3, 4, 5, 0.1, 0.5)
    assert BevBox.from_dict(b.to_dict()) == b


def test_instance_quality():
    phi, w = instance_quality(0.8, 0.5, 1.0)
    assert phi == pytest.approx(0.4) and abs(w - math.exp(0.4)) <= 1e-12
    assert instance_quality(0.8, 0.5, 2.0)[0] == pytest.approx(0.2)
    assert instance_quality(0.8, 0.5, 1.0, "cls")[0] == pytest.approx(0.8)
    assert instance_quality(0.8, 0.5, 1.0, "iou")[0] == pytest.approx(0.5)
    assert instance_quality(0.8, 0.5, 1.0, "none") == (0.0, 1.0)
    with pytest.raises(ValueError):
        instance_quality(0.8, 0.5, 1.0, "focal")


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0.5, 3))
def test_quality_weight_range(c, iou, eta):
    phi, w = instance_quality(c, iou, eta)
    assert 0 <= phi <= 1 and 1 <= w <= math.e + 1e-12


# -- head -------------------------------------------------------------------

def test_decode_strict_peaks(small_grid):
    heat = np.zeros((2, 16, 16))
    heat[0, 3, 4] = 0.9
    heat[0, 3, 5] = 0.5  # neighbour of a higher peak
    heat[1, 10, 10] = heat[1, 10, 11] = 0.7  # plateau: no peak
    heat[1, 1, 1] = 0.05  # under threshold
    reg = np.zeros((4, 16, 16))
    reg[:, 3, 4] = [0.2, -0.1, math.log(4.0), math.log(2.0)]
    out = decode_maps(heat, reg, small_grid, top_k=10, score_thresh=0.1)
    assert len(out) == 1
    b = out[0].box
    assert (b.class_id, out[0].cell) == (0, (3, 4))
    assert b.cx == pytest.approx(-4 + (4.5 + 0.2) * 0.5) and b.cy == pytest.approx(-4 + (3.5 - 0.1) * 0.5)
    assert (b.length, b.width, b.score) == (pytest.approx(4.0), pytest.approx(2.0), 0.9)
    with pytest.raises(ValueError):
        decode_maps(heat, reg, small_grid, 0, 0.1)


def test_decode_top_k_order(small_grid):
    heat = np.zeros((1, 16, 16))
    for i, (r, c) in enumerate([(2, 2), (2, 8), (8, 2), (8, 8)]):
        heat[0, r, c] = 0.2 + 0.1 * i
    out = decode_maps(heat, np.zeros((4, 16, 16)), small_grid, top_k=2, score_thresh=0.1)
    assert [o.cell for o in out] == [(8, 8), (8, 2)]


def test_head_outputs_shapes(rng):
    p = init_head(rng, 8, 4, decoder_layers=1)
    heat, reg = head_outputs(rng.normal(size=(8, 5, 6)), p)
    assert heat.shape == (4, 5, 6) and reg.shape == (4, 5, 6)
    assert heat.value.min() > 0 and heat.value.max() < 1


def test_match_greedy():
    gts = [BevBox(0, 0, 0, 1, 1), BevBox(0, 1.5, 0, 1, 1), BevBox(1, 0, 0, 1, 1)]
    preds = [inst(0, 0.2, 0, 0.5), inst(0, 0.1, 0, 0.9), inst(1, 5, 5, 0.8), inst(2, 0, 0, 0.7)]
    # the higher-scoring prediction claims the nearest GT first
    assert match_instances(preds, gts, 2.0) == {1: 0, 0: 1}
    assert match_instances([], gts) == {}
    with pytest.raises(ValueError):
        match_instances(preds, gts, 0.0)


def test_focal_cls_and_l1_values():
    p = np.array([0.9, 0.2, 0.1])
    expect = -np.mean([0.1**2 * math.log(0.9), 0.2**2 * math.log(0.8), 0.1**2 * math.log(0.9)])
    assert float(focal_cls_loss(p, 0).value) == pytest.approx(expect, abs=1e-12)
    gt = BevBox(0, 8.0, 0.0, 2.0, 1.0)
    assert l1_loc_loss(gt, gt) == 0.0
    assert l1_loc_loss(BevBox(0, 16.0, 0.0, 2.0, 1.0), gt) == pytest.approx(0.25)
    v = l1_loc_loss(gc.as_var(box_vector(gt) + 0.1), gt)
    assert float(v.value) == pytest.approx(0.1)


def test_total_loss_composition():
    rng = np.random.default_rng(3)
    heat = rng.uniform(0.01, 0.99, (2, 3, 3))
    gt_heat = np.zeros((2, 3, 3))
    gt_heat[1, 1, 1] = 1.0
    gt = BevBox(1, 0.5, 0.5, 1.0, 1.0)
    terms = [MatchedTerm(gc.as_var(np.array([0.3, 0.6])), gc.as_var(box_vector(gt) + 0.2), gt, 1.5)]
    coeffs = LossCoeffs(2.0, 0.5, 3.0)
    total, bd = total_loss(terms, heat, gt_heat, 4.0, 5.0, coeffs)
    v = bd.values()
    assert v["cls"] == pytest.approx(2.0 * 1.5 * float(focal_cls_loss(np.array([0.3, 0.6]), 1).value))
    assert v["loc"] == pytest.approx(0.5 * 1.5 * 0.2)
    assert v["total"] == pytest.approx(v["cls"] + v["loc"] + v["heat"] + 9.0)
    with pytest.raises(ValueError):
        LossCoeffs(-1, 0, 0)


# -- evaluation --------------------------------------------------------------

def enumerate_ap(tp, n_gt, levels=40):
    """Interpolated AP straight from the definition: for every recall level,
    the best precision reached at any rank with at least that recall."""
    if n_gt == 0:
        return None
    prec, rec = [], []
    hits = 0
    for i, t in enumerate(tp, 1):
        hits += int(t)
        prec.append(hits / i)
        rec.append(hits / n_gt)
    total = 0.0
    for j in range(1, levels + 1):
        r = j / levels
        cands = [p for p, q in zip(prec, rec) if q >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / levels


@given(st.lists(st.booleans(), max_size=30), st.integers(0, 12))
def test_ap_matches_enumeration(flags, extra_gt):
    n_gt = sum(flags) + extra_gt
    got = ap_from_flags(np.array(flags, dtype=bool), n_gt)
    ref = enumerate_ap(flags, n_gt)
    assert (got is None and ref is None) or got == pytest.approx(ref, abs=1e-12)


def test_ap_hand_cases():
    gts = [BevBox(0, 0, 0, 1, 1), BevBox(0, 10, 0, 1, 1)]
    perfect = [BevBox(0, 0.1, 0, 1, 1, score=0.9), BevBox(0, 10, 0.1, 1, 1, score=0.8)]
    assert average_precision(perfect, gts, 0, 0.5) == 1.0
    assert average_precision([], gts, 0, 0.5) == 0.0
    assert average_precision(perfect, gts, 1, 0.5) is None
    # one hit at rank 2 out of 2 GTs
    half = [BevBox(0, 5, 5, 1, 1, score=0.9), BevBox(0, 0, 0, 1, 1, score=0.5)]
    assert average_precision(half, gts, 0, 0.5) == pytest.approx(0.5 * 0.5)
    with pytest.raises(ValueError):
        average_precision(perfect, gts, 0, 0.0)


def test_toy_map_pools_scenes_and_csv():
    gts = {0: [BevBox(0, 0, 0, 1, 1)], 1: [BevBox(1, 0, 0, 1, 1)]}
    preds = {0: [BevBox(0, 0.3, 0, 1, 1, score=0.9)], 1: [BevBox(1, 3.0, 0, 1, 1, score=0.9)]}
    res = toy_map(preds, gts, classes=2)
    assert res.ap[(0, 0.5)] == 1.0
    assert res.ap[(1, 0.5)] == 0.0 and res.ap[(1, 4.0)] == 1.0
    assert res.counts[(1, 0.5)] == (0, 1, 1)
    lines = res.to_csv().splitlines()
    assert lines[0] == "class,AP@0.5m,AP@1m,AP@2m,AP@4m,mean"
    assert lines[-1].startswith("mAP,") and len(lines) == 4
    with pytest.raises(ValueError):
        toy_map({0: []}, {1: []})


def test_toy_map_skips_absent_classes():
    gts = {0: [BevBox(0, 0, 0, 1, 1)]}
    res = toy_map({0: [BevBox(0, 0, 0, 1, 1, score=0.5)]}, gts, classes=3)
    assert res.mAP == 1.0
    assert "nan" in res.to_csv()
