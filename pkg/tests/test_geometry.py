import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import scalar_oracles as orc
from fcoslite.geometry import (
    Box,
    DegenerateBoxError,
    aspect_consistency,
    box_ciou_loss,
    box_diou_loss,
    box_giou_loss,
    ciou_loss,
    diou_loss,
    giou_loss,
    iou,
    overlap,
)

TOL = 1e-6


def test_iou_examples():
    assert iou(Box(0, 0, 1, 1), Box(0, 0, 1, 1)) == 1.0
    assert iou(Box(0, 0, 1, 1), Box(2, 0, 3, 1)) == 0.0
    assert iou(Box(0, 0, 2, 2), Box(1, 0, 3, 2)) == pytest.approx(1 / 3, abs=TOL)


def test_touching_boxes_have_zero_iou():
    assert iou(Box(0, 0, 1, 1), Box(1, 0, 2, 1)) == 0.0


@pytest.mark.parametrize("coords", [(0, 0, 0, 1), (0, 0, 1, 0), (2, 0, 1, 1), (0, 0, math.inf, 1)])
def test_degenerate_boxes_rejected(coords):
    with pytest.raises(DegenerateBoxError):
        Box(*coords)
    with pytest.raises(DegenerateBoxError):
        ciou_loss(torch.tensor(coords, dtype=torch.float64), torch.tensor([0.0, 0, 1, 1], dtype=torch.float64))


def test_ciou_examples():
    assert box_ciou_loss(Box(0, 0, 3, 2), Box(0, 0, 3, 2)) == 0.0
    assert box_ciou_loss(Box(0, 0, 1, 1), Box(1, 1, 2, 2)) == pytest.approx(1.25, abs=TOL)
    # frozen from scalar_oracles.py
    assert box_ciou_loss(Box(0, 0, 2, 1), Box(0, 0, 1, 2)) == pytest.approx(0.7629183350773473, abs=TOL)
    assert float(aspect_consistency(torch.tensor([0.0, 0, 2, 1]), torch.tensor([0.0, 0, 1, 2]))) == pytest.approx(
        0.16782584597716224, abs=TOL
    )


def test_giou_diou_examples():
    b = Box(0.5, 1, 2, 4)
    assert box_giou_loss(b, b) == 0.0
    assert box_diou_loss(b, b) == 0.0
    assert box_giou_loss(Box(0, 0, 1, 1), Box(2, 0, 3, 1)) == pytest.approx(4 / 3, abs=TOL)
    assert box_diou_loss(Box(0, 0, 1, 1), Box(1, 1, 2, 2)) == pytest.approx(1.25, abs=TOL)


boxes = st.tuples(
    st.floats(-50, 50), st.floats(-50, 50), st.floats(0.05, 40), st.floats(0.05, 40)
).map(lambda t: Box(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=300, deadline=None)
@given(boxes, boxes)
def test_iou_family_bounds_and_decomposition(a, b):
    pa, pb = a.as_tensor(), b.as_tensor()
    c, d = float(ciou_loss(pa, pb)), float(diou_loss(pa, pb))
    assert 0 <= d <= c + 1e-12 < 3
    ov = overlap(pa, pb)
    v = float(aspect_consistency(pa, pb))
    av = c - d
    assert 0 <= av < 1
    u = float(ov.iou)
    if (1 - u) + v > 0:
        assert av == pytest.approx(v * v / ((1 - u) + v), abs=1e-12)
    assert 0 <= u <= 1
    assert float(ov.center_dist_sq) <= float(ov.enclosing_diag_sq)
    # independent oracle
    t = (a.x1, a.y1, a.x2, a.y2), (b.x1, b.y1, b.x2, b.y2)
    assert u == pytest.approx(orc.iou(*t), abs=1e-9)
    assert c == pytest.approx(orc.ciou(*t), abs=1e-9)
    assert float(giou_loss(pa, pb)) == pytest.approx(orc.giou(*t), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(boxes)
def test_ciou_zero_iff_identical(a):
    assert box_ciou_loss(a, a) == 0.0
    shifted = a.translate(1e-3 * a.width, 0)
    assert box_ciou_loss(shifted, a) > 0


@settings(max_examples=200, deadline=None)
@given(boxes, boxes, st.floats(-100, 100), st.floats(-100, 100))
def test_translation_invariance(a, b, dx, dy):
    ta, tb = a.translate(dx, dy), b.translate(dx, dy)
    for f in (iou, box_ciou_loss, box_giou_loss, box_diou_loss):
        assert f(ta, tb) == pytest.approx(f(a, b), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(boxes, boxes, st.floats(0.1, 10))
def test_scale_invariance_of_iou_and_aspect(a, b, s):
    assert iou(a.scale(s), b.scale(s)) == pytest.approx(iou(a, b), abs=1e-9)
    v = aspect_consistency(a.as_tensor(), b.as_tensor())
    vs = aspect_consistency(a.scale(s).as_tensor(), b.scale(s).as_tensor())
    assert float(vs) == pytest.approx(float(v), abs=1e-9)


def random_pairs(n, seed=0):
    g = np.random.default_rng(seed)
    xy = g.uniform(0, 10, size=(n, 2, 2))
    wh = g.uniform(0.5, 6, size=(n, 2, 2))
    b = np.concatenate([xy, xy + wh], axis=-1)
    return torch.tensor(b[:, 0]), torch.tensor(b[:, 1])


def central_diff(f, x, h=1e-4):
    grad = torch.zeros_like(x)
    for k in range(x.numel()):
        e = torch.zeros_like(x)
        e.view(-1)[k] = h
        grad.view(-1)[k] = (f(x + e) - f(x - e)) / (2 * h)
    return grad


def test_ciou_gradient_matches_finite_differences():
    pred, gt = random_pairs(100)
    for i in range(100):
        p = pred[i].clone().requires_grad_(True)
        loss = ciou_loss(p, gt[i])
        (g,) = torch.autograd.grad(loss, p)
        # alpha held constant at the evaluation point
        ov = overlap(pred[i], gt[i])
        v = aspect_consistency(pred[i], gt[i])
        alpha = float(v / ((1 - ov.iou) + v))

        def f(x):
            o = overlap(x, gt[i])
            return float(1 - o.iou + o.center_dist_sq / o.enclosing_diag_sq + alpha * aspect_consistency(x, gt[i]))

        fd = central_diff(f, pred[i].clone())
        scale = max(float(fd.abs().max()), 1e-8)
        assert float((g - fd).abs().max()) / scale < 1e-4, i
