import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from assign_oracle import brute_force_assign
from fcoslite.detector import DetectorOutput, DetectorSpec, build_student
from fcoslite.geometry import Box, iou
from fcoslite.targets import (
    Detection,
    assign,
    decode,
    encode,
    infer,
    level_points,
    nms,
    postprocess,
)

SPEC = DetectorSpec()
PAPER = DetectorSpec.paper()


def test_no_gt_all_negative():
    tm = assign([], SPEC)
    assert len(tm) == 3
    for lv in tm:
        assert not lv.pos_mask.any()
        assert lv.cls_target.sum() == 0


def test_centered_40px_box_only_on_stride_8():
    c = 160
    tm = assign([Box(c - 20, c - 20, c + 20, c + 20, label=1)], PAPER)
    assert tm[0].pos_mask.sum() > 0
    assert tm[1].pos_mask.sum() == 0 and tm[2].pos_mask.sum() == 0
    oracle = brute_force_assign([(140, 140, 180, 180)], [1], (320, 320))
    assert sum(v is not None for row in oracle[0] for v in row) == int(tm[0].pos_mask.sum())
    assert (tm[0].cls_target[1][tm[0].pos_mask] == 1).all()


def test_nested_boxes_go_to_smaller():
    big, small = Box(8, 8, 120, 120, label=0), Box(40, 40, 80, 80, label=1)
    tm = assign([big, small], SPEC)
    pts = level_points(SPEC)[0]
    idx = tm[0].gt_index.reshape(-1)
    for (x, y), k in zip(pts.tolist(), idx.tolist()):
        if 40 < x < 80 and 40 < y < 80:
            assert k == 1
    oracle = brute_force_assign([big.as_list(), small.as_list()], [0, 1], SPEC.input_size)
    _compare(tm, oracle)


def _compare(tm, oracle):
    for lv, orc_lv in zip(tm, oracle):
        h, w = lv.pos_mask.shape
        for i in range(h):
            for j in range(w):
                o = orc_lv[i][j]
                if o is None:
                    assert not lv.pos_mask[i, j]
                    assert lv.gt_index[i, j] == -1
                else:
                    assert lv.pos_mask[i, j]
                    assert int(lv.gt_index[i, j]) == o[0]
                    assert lv.cls_target[:, i, j].tolist() == [float(o[1] == 0), float(o[1] == 1)]


def random_scene(g, size=128, max_boxes=5):
    n = int(g.integers(0, max_boxes + 1))
    boxes, classes = [], []
    for _ in range(n):
        w, h = g.uniform(4, size * 0.9, 2)
        x1 = g.uniform(0, size - w)
        y1 = g.uniform(0, size - h)
        boxes.append([float(x1), float(y1), float(x1 + w), float(y1 + h)])
        classes.append(int(g.integers(0, 2)))
    return boxes, classes


@pytest.mark.parametrize("spec", [SPEC, DetectorSpec(input_size=(256, 256))], ids=["128", "256"])
def test_assign_equals_brute_force_on_random_scenes(spec):
    g = np.random.default_rng(11)
    for _ in range(100):
        boxes, classes = random_scene(g, spec.input_size[0])
        tm = assign(torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4), spec, classes)
        _compare(tm, brute_force_assign(boxes, classes, spec.input_size))


def test_positive_targets_decode_to_their_box():
    g = np.random.default_rng(5)
    for _ in range(30):
        boxes, classes = random_scene(g, 128)
        tm = assign(torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4), SPEC, classes)
        for lv, pts in zip(tm, level_points(SPEC, torch.float64)):
            pos = lv.pos_mask.reshape(-1)
            reg = lv.reg_target.reshape(4, -1)
            for k in pos.nonzero().squeeze(1).tolist():
                assert (reg[:, k] > 0).all()
                b = decode(tuple(pts[k].tolist()), reg[:, k].double().tolist())
                gt = boxes[int(lv.gt_index.reshape(-1)[k])]
                assert b.as_list() == pytest.approx(gt, abs=1e-4)


def test_assign_rejects_box_outside_image():
    with pytest.raises(ValueError):
        assign([Box(-1, 0, 10, 10, label=0)], SPEC)
    with pytest.raises(ValueError):
        assign([Box(100, 100, 129, 120, label=0)], SPEC)


def test_decode_examples():
    assert decode((100, 100), (10, 10, 10, 10)).as_list() == [90, 90, 110, 110]
    box = Box(3.5, 7.25, 40, 51)
    assert decode((20, 30), encode((20, 30), box)) == box
    with pytest.raises(ValueError):
        decode((0, 0), (1, 0, 1, 1))


@settings(max_examples=1000, deadline=None)
@given(
    st.tuples(st.floats(-500, 500), st.floats(-500, 500)),
    st.tuples(*[st.floats(0.01, 300)] * 4),
)
def test_decoded_box_contains_location(pt, reg):
    b = decode(pt, reg)
    assert b.x1 < pt[0] < b.x2 and b.y1 < pt[1] < b.y2


def _det(box, cls, score):
    return Detection(Box(*box), cls, score)


def test_nms_examples():
    single = [_det((0, 0, 10, 10), 0, 0.5)]
    assert nms(single) == single
    a, b = (0, 0, 10, 10), (0, 0, 10, 7)  # IoU 0.7
    assert iou(Box(*a), Box(*b)) == pytest.approx(0.7)
    kept = nms([_det(b, 1, 0.8), _det(a, 1, 0.9)], 0.6)
    assert [d.score for d in kept] == [0.9]
    kept = nms([_det(a, 0, 0.9), _det(b, 1, 0.8)], 0.6)
    assert len(kept) == 2


def test_nms_threshold_validation():
    with pytest.raises(ValueError):
        nms([], iou_threshold=1.5)
    with pytest.raises(ValueError):
        nms([], score_threshold=-0.1)


def test_nms_deterministic_tie_break():
    d1 = _det((0, 0, 10, 10), 1, 0.7)
    d2 = _det((0, 0, 10, 10), 0, 0.7)
    d3 = _det((1, 0, 11, 10), 0, 0.7)
    out1 = nms([d1, d2, d3], 0.5)
    out2 = nms([d3, d2, d1], 0.5)
    assert out1 == out2
    assert out1[0] == d2


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(1, 30), st.floats(1, 30),
                          st.integers(0, 1), st.floats(0.01, 1.0)), max_size=25),
       st.floats(0.1, 0.9))
def test_nms_output_is_antichain(raw, thr):
    dets = [_det((x, y, x + w, y + h), c, s) for x, y, w, h, c, s in raw]
    kept = nms(dets, thr, max_detections=None)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if a.class_id == b.class_id:
                assert iou(a.box, b.box) <= thr


def test_infer_with_low_bias_is_empty():
    net = build_student(SPEC)
    torch.nn.init.constant_(net.head.cls_head[-1].bias, -20.0)
    assert infer(net, torch.rand(3, 128, 128)) == []


def test_infer_deterministic_and_shape_checked():
    torch.manual_seed(0)
    net = build_student(SPEC)
    torch.nn.init.constant_(net.head.cls_head[-1].bias, 0.0)
    x = torch.rand(3, 128, 128)
    a, b = infer(net, x), infer(net, x)
    assert a == b and len(a) > 0
    with pytest.raises(ValueError):
        infer(net, torch.rand(3, 64, 64))


def test_postprocess_recovers_planted_box():
    shapes = SPEC.level_shapes()
    cls = [torch.full((1, 2, h, w), -10.0) for h, w in shapes]
    reg = [torch.ones((1, 4, h, w)) for h, w in shapes]
    # stride-8 location (row 5, col 6) -> point (52, 44)
    cls[0][0, 1, 5, 6] = 3.0
    reg[0][0, :, 5, 6] = torch.tensor([10.0, 4.0, 6.0, 8.0])
    dets = postprocess(DetectorOutput(cls, reg), SPEC)[0]
    assert len(dets) == 1
    assert dets[0].class_id == 1
    assert dets[0].box.as_list() == pytest.approx([42, 40, 58, 52])


@pytest.mark.parametrize("radius", [1.0, 1.5])
def test_center_sampling_equals_brute_force(radius):
    spec = DetectorSpec(center_radius=radius)
    g = np.random.default_rng(13)
    for _ in range(60):
        boxes, classes = random_scene(g, spec.input_size[0])
        tm = assign(torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4), spec, classes)
        _compare(tm, brute_force_assign(boxes, classes, spec.input_size, radius=radius))


def test_center_sampling_only_removes_positives():
    g = np.random.default_rng(17)
    for _ in range(30):
        boxes, classes = random_scene(g, 128)
        t = torch.tensor(boxes, dtype=torch.float64).reshape(-1, 4)
        full = assign(t, SPEC, classes)
        narrow = assign(t, DetectorSpec(center_radius=1.5), classes)
        for a, b in zip(full, narrow):
            assert not (b.pos_mask & ~a.pos_mask).any()


def test_negative_center_radius_rejected():
    with pytest.raises(ValueError):
        DetectorSpec(center_radius=-1.0)
