"""Brute-force reference implementations shared by the metric and acceptance tests."""

import numpy as np


def pixel_set_iou(attention, gt, threshold_fraction, size=32):
    """Brute-force oracle: explicit pixel sets, no box arithmetic."""
    merged = attention.max(axis=0)
    peak = merged.max()
    if peak <= 0:
        return 0.0
    cell_h, cell_w = size // merged.shape[0], size // merged.shape[1]
    marked = [(y, x) for y in range(size) for x in range(size) if merged[y // cell_h, x // cell_w] >= threshold_fraction * peak]
    ys = [p[0] for p in marked]
    xs = [p[1] for p in marked]
    rect = {(y, x) for y in range(min(ys), max(ys) + 1) for x in range(min(xs), max(xs) + 1)}
    gx0, gy0, gx1, gy1 = gt
    gt_set = {(y, x) for y in range(gy0, gy1) for x in range(gx0, gx1)}
    return len(rect & gt_set) / len(rect | gt_set)


def brute_force_retrieval(q, q_ids, g, g_ids):
    """All-pairs ranking with explicit loops; AP as mean precision at each hit."""
    cmc_hits = np.zeros(len(g))
    aps = []
    for qi in range(len(q)):
        dists = [(float(np.sqrt(((q[qi] - g[j]) ** 2).sum())), j) for j in range(len(g))]
        ranked = [j for _, j in sorted(dists)]
        hits, precisions = 0, []
        first = None
        for rank, j in enumerate(ranked, start=1):
            if g_ids[j] == q_ids[qi]:
                hits += 1
                precisions.append(hits / rank)
                if first is None:
                    first = rank
        cmc_hits[first - 1 :] += 1
        aps.append(sum(precisions) / len(precisions))
    return list(cmc_hits / len(q)), sum(aps) / len(aps)
