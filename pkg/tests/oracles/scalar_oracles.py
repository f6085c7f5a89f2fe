"""Standalone scalar oracles, written against the formulas with plain ``math``.

Nothing here imports ``fcoslite``.  Running the file prints the values that are
frozen into the test-suite.
"""
import itertools
import math


def area(b):
    return (b[2] - b[0]) * (b[3] - b[1])


def inter(a, b):
    w = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    h = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    return w * h


def iou(a, b):
    i = inter(a, b)
    return i / (area(a) + area(b) - i)


def hull(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def rho2(a, b):
    ax, ay = (a[0] + a[2]) / 2, (a[1] + a[3]) / 2
    bx, by = (b[0] + b[2]) / 2, (b[1] + b[3]) / 2
    return (ax - bx) ** 2 + (ay - by) ** 2


def c2(a, b):
    h = hull(a, b)
    return (h[2] - h[0]) ** 2 + (h[3] - h[1]) ** 2


def upsilon(pred, gt):
    w, h = pred[2] - pred[0], pred[3] - pred[1]
    wg, hg = gt[2] - gt[0], gt[3] - gt[1]
    return 4 / math.pi**2 * (math.atan(wg / hg) - math.atan(w / h)) ** 2


def ciou(pred, gt):
    u = iou(pred, gt)
    v = upsilon(pred, gt)
    alpha = 0.0 if (1 - u) + v == 0 else v / ((1 - u) + v)
    return 1 - u + rho2(pred, gt) / c2(pred, gt) + alpha * v


def diou(pred, gt):
    return 1 - iou(pred, gt) + rho2(pred, gt) / c2(pred, gt)


def giou(pred, gt):
    u_area = area(pred) + area(gt) - inter(pred, gt)
    h = hull(pred, gt)
    c_area = area(h)
    return 1 - iou(pred, gt) + (c_area - u_area) / c_area


EPS = 1e-7


def bce(p, y):
    p = min(max(p, EPS), 1 - EPS)
    return -math.log(p) if y == 1 else -math.log(1 - p)


def weight(g, mu):
    return math.exp(g) if g < mu else abs(2 * math.exp(mu) - math.exp(g))


def wce(p, y, mu):
    return weight(abs(p - y), mu) * bce(p, y)


def focal(p, y, alpha=0.4, gamma=1.2):
    p = min(max(p, EPS), 1 - EPS)
    pt = p if y == 1 else 1 - p
    at = alpha if y == 1 else 1 - alpha
    return -at * (1 - pt) ** gamma * math.log(pt)


def ap_all_point(flags, n_gt):
    """Envelope AP by explicit enumeration of recall steps."""
    tp = fp = 0
    pts = []
    for f in flags:
        tp += f
        fp += 1 - f
        pts.append((tp / n_gt, tp / (tp + fp)))
    total, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(pts):
        if r > prev_r:
            env = max(pp for rr, pp in pts[k:])
            total += (r - prev_r) * env
            prev_r = r
    return total


def brute_force_matching(det_boxes, det_scores, gts, thr=0.5):
    """Best TP count over every injective assignment (for small cases)."""
    best = 0
    n, m = len(det_boxes), len(gts)
    for perm in itertools.permutations(range(m), min(n, m)):
        for dets in itertools.permutations(range(n), len(perm)):
            tp = sum(iou(det_boxes[d], gts[g]) >= thr for d, g in zip(dets, perm))
            best = max(best, tp)
    return best


if __name__ == "__main__":
    print("iou [0,0,2,2] [1,0,3,2]", iou((0, 0, 2, 2), (1, 0, 3, 2)))
    print("ciou [0,0,1,1] [1,1,2,2]", ciou((0, 0, 1, 1), (1, 1, 2, 2)))
    pr, gt = (0, 0, 2, 1), (0, 0, 1, 2)
    print("ciou [0,0,2,1] [0,0,1,2]", repr(ciou(pr, gt)), "v", upsilon(pr, gt),
          "alpha", upsilon(pr, gt) / (1 - iou(pr, gt) + upsilon(pr, gt)), "rho2", rho2(pr, gt), "c2", c2(pr, gt))
    print("giou [0,0,1,1] [2,0,3,1]", giou((0, 0, 1, 1), (2, 0, 3, 1)))
    print("diou [0,0,1,1] [1,1,2,2]", diou((0, 0, 1, 1), (1, 1, 2, 2)))
    print("bce 0.1/1", repr(bce(0.1, 1)))
    print("weight 0.5,0.7", repr(weight(0.5, 0.7)), "weight 0.9,0.7", repr(weight(0.9, 0.7)))
    print("wce 0.5/1", repr(wce(0.5, 1, 0.7)), "wce 0.1/1", repr(wce(0.1, 1, 0.7)))
    print("focal 0.5/1", repr(0.4 * 0.5**1.2 * math.log(2)))
    print("ap [1,0,1]/2", repr(ap_all_point([1, 0, 1], 2)))
    print("two dets on one gt best TP", brute_force_matching([(0, 0, 10, 10), (1, 0, 11, 10)], [0.9, 0.8], [(0, 0, 10, 10)]))
    # two-location detection loss: pos (p=0.8,y=1) with pred [0,0,2,1] gt [0,0,1,2]; neg (p=0.3,y=0)
    cls = wce(0.8, 1, 0.7) + wce(0.3, 0, 0.7)
    print("detection loss WCE+CIoU two locations", repr(cls / 1 + ciou(pr, gt) / 1))
    cls_fl = focal(0.8, 1) + focal(0.3, 0)
    print("detection loss FL+IoU two locations", repr(cls_fl + 1 - iou(pr, gt)))
