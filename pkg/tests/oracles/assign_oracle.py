"""Exhaustive per-location assignment, one location and one box at a time."""


def brute_force_assign(boxes, classes, input_size, strides=(8, 16, 32), bounds=(64.0, 128.0), radius=0.0):
    h, w = input_size
    edges = [0.0, *bounds, float("inf")]
    levels = []
    for k, s in enumerate(strides):
        lo, hi = edges[k], edges[k + 1]
        rows = []
        for i in range(h // s):
            row = []
            for j in range(w // s):
                x, y = s / 2 + j * s, s / 2 + i * s
                best, best_area = None, None
                for n, (x1, y1, x2, y2) in enumerate(boxes):
                    l, t, r, b = x - x1, y - y1, x2 - x, y2 - y
                    if min(l, t, r, b) <= 0:
                        continue
                    if radius > 0 and not (abs(x - (x1 + x2) / 2) < radius * s and abs(y - (y1 + y2) / 2) < radius * s):
                        continue
                    m = max(l, t, r, b)
                    if not (lo < m <= hi):
                        continue
                    a = (x2 - x1) * (y2 - y1)
                    if best is None or a < best_area:
                        best, best_area = n, a
                row.append(None if best is None else (best, classes[best]))
            rows.append(row)
        levels.append(rows)
    return levels
