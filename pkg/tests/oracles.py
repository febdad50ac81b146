"""Independent brute-force oracles the tests check the library against.

Everything here is deliberately written as plain loops / direct
definitions, separate from the vectorized implementations under test.
"""

import math
from fractions import Fraction

import numpy as np


def conv2d_oracle(x, w, b, stride=1, padding=0):
    """Nested-loop NCHW convolution."""
    n, c, h, wid = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    out = np.zeros((n, o, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oi in range(o):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += (
                                    xp[ni, ci, yi * stride + ky, xi * stride + kx]
                                    * w[oi, ci, ky, kx]
                                )
                    out[ni, oi, yi, xi] = acc + b[oi]
    return out


def roi_pool_oracle(feature, box, bins, image_hw):
    """Brute-force per-bin max over the footprint; edges via linspace+floor."""
    c, fh, fw = feature.shape
    ih, iw = image_hw
    bh, bw = bins
    x1, y1, x2, y2 = box
    ax = int(math.floor(x1 * fw / iw))
    bx = int(math.ceil(x2 * fw / iw))
    ay = int(math.floor(y1 * fh / ih))
    by = int(math.ceil(y2 * fh / ih))
    ax, bx = max(0, min(ax, fw - 1)), max(0, min(bx, fw))
    ay, by = max(0, min(ay, fh - 1)), max(0, min(by, fh))
    if bx <= ax:
        cx = max(0, min(int(math.floor((x1 + x2) / 2 * fw / iw)), fw - 1))
        ax, bx = cx, cx + 1
    if by <= ay:
        cy = max(0, min(int(math.floor((y1 + y2) / 2 * fh / ih)), fh - 1))
        ay, by = cy, cy + 1
    out = np.zeros((c, bh, bw), dtype=feature.dtype)
    for j in range(bh):
        y_lo = ay + int(math.floor(j * (by - ay) / bh))
        y_hi = ay + int(math.floor((j + 1) * (by - ay) / bh))
        if y_hi <= y_lo:
            y_hi = y_lo + 1
        for i in range(bw):
            x_lo = ax + int(math.floor(i * (bx - ax) / bw))
            x_hi = ax + int(math.floor((i + 1) * (bx - ax) / bw))
            if x_hi <= x_lo:
                x_hi = x_lo + 1
            for ci in range(c):
                best = None
                for yy in range(y_lo, y_hi):
                    for xx in range(x_lo, x_hi):
                        v = feature[ci, yy, xx]
                        if best is None or v > best:
                            best = v
                out[ci, j, i] = best
    return out


def _footprint_cells(span_lo, span_hi, n_cells):
    cells = [i for i in range(n_cells) if span_lo <= i + 0.5 <= span_hi]
    if not cells:
        c = max(0, min(int(math.floor((span_lo + span_hi) / 2)), n_cells - 1))
        cells = [c]
    return cells


def max_project_oracle(m, box, prob, grid, image_hw):
    """Forward-map every bin center; per-cell max; nearest-bin hole fill."""
    c, hf, wf = m.shape
    hc, wc = grid
    ih, iw = image_hw
    x1, y1, x2, y2 = box
    gx1, gx2 = max(x1 * wc / iw, 0.0), min(x2 * wc / iw, float(wc))
    gy1, gy2 = max(y1 * hc / ih, 0.0), min(y2 * hc / ih, float(hc))
    cells_x = _footprint_cells(gx1, gx2, wc)
    cells_y = _footprint_cells(gy1, gy2, hc)
    bxs = [gx1 + (i + 0.5) * (gx2 - gx1) / wf for i in range(wf)]
    bys = [gy1 + (j + 0.5) * (gy2 - gy1) / hf for j in range(hf)]
    hits = {}
    for j in range(hf):
        ty = min(max(int(math.floor(bys[j])), cells_y[0]), cells_y[-1])
        for i in range(wf):
            tx = min(max(int(math.floor(bxs[i])), cells_x[0]), cells_x[-1])
            hits.setdefault((ty, tx), []).append((j, i))
    out = np.zeros((c, hc, wc), dtype=np.float64)
    for cy in cells_y:
        for cx in cells_x:
            if (cy, cx) in hits:
                for ci in range(c):
                    out[ci, cy, cx] = prob * max(m[ci, j, i] for j, i in hits[(cy, cx)])
            else:
                best, best_d = None, None
                for j in range(hf):
                    for i in range(wf):
                        d = (cy + 0.5 - bys[j]) ** 2 + (cx + 0.5 - bxs[i]) ** 2
                        if best_d is None or d < best_d:
                            best, best_d = (j, i), d
                out[:, cy, cx] = prob * m[:, best[0], best[1]]
    return out


def linear_project_oracle(m, box, prob, grid, image_hw):
    """Dense rasterization: sample the bin surface on the integer image
    lattice, then bilinearly resample the raster at output cell centers.

    Exact (up to float noise) when image_size / grid_size is even, which
    puts every resample point on a lattice node.
    """
    c, hf, wf = m.shape
    hc, wc = grid
    ih, iw = image_hw
    x1, y1, x2, y2 = box
    bw = (x2 - x1) / wf
    bh = (y2 - y1) / hf

    def surface(py, px):
        u = min(max((px - x1) / bw - 0.5, 0.0), wf - 1.0)
        v = min(max((py - y1) / bh - 0.5, 0.0), hf - 1.0)
        i0 = min(int(math.floor(u)), wf - 2) if wf > 1 else 0
        j0 = min(int(math.floor(v)), hf - 2) if hf > 1 else 0
        fu, fv = u - i0, v - j0
        i1 = min(i0 + 1, wf - 1)
        j1 = min(j0 + 1, hf - 1)
        return (
            m[:, j0, i0] * (1 - fv) * (1 - fu)
            + m[:, j0, i1] * (1 - fv) * fu
            + m[:, j1, i0] * fv * (1 - fu)
            + m[:, j1, i1] * fv * fu
        )

    raster = np.zeros((c, ih + 1, iw + 1), dtype=np.float64)
    for py in range(ih + 1):
        for px in range(iw + 1):
            raster[:, py, px] = surface(float(py), float(px))

    out = np.zeros((c, hc, wc), dtype=np.float64)
    for cy in range(hc):
        py = (cy + 0.5) * ih / hc
        for cx in range(wc):
            px = (cx + 0.5) * iw / wc
            if not (x1 <= px <= x2 and y1 <= py <= y2):
                continue
            y0, x0 = int(math.floor(py)), int(math.floor(px))
            y0 = min(y0, ih - 1)
            x0 = min(x0, iw - 1)
            fy, fx = py - y0, px - x0
            q = (
                raster[:, y0, x0] * (1 - fy) * (1 - fx)
                + raster[:, y0, x0 + 1] * (1 - fy) * fx
                + raster[:, y0 + 1, x0] * fy * (1 - fx)
                + raster[:, y0 + 1, x0 + 1] * fy * fx
            )
            out[:, cy, cx] = prob * q
    return out


def fold_max_oracle(arrays):
    out = np.array(arrays[0], dtype=np.float64)
    for a in arrays[1:]:
        for idx in np.ndindex(out.shape):
            if a[idx] > out[idx]:
                out[idx] = a[idx]
    return out


def ap_oracle_exact(scores, labels):
    """AP as the exact-rational sum of (recall step) * precision over the
    ranking built by insertion sort on (-score, index)."""
    n = len(scores)
    ranked = []
    for i in range(n):
        pos = 0
        while pos < len(ranked) and (
            scores[ranked[pos]] > scores[i]
            or (scores[ranked[pos]] == scores[i] and ranked[pos] < i)
        ):
            pos += 1
        ranked.insert(pos, i)
    n_pos = sum(1 for v in labels if v == 1)
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for k in range(1, n + 1):
        tp = sum(1 for i in ranked[:k] if labels[i] == 1)
        precision = Fraction(tp, k)
        recall = Fraction(tp, n_pos)
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap
