"""Per-RoI feature extraction and spatially-aligned projection/combination.

Geometry conventions used throughout:

* boxes are (x1, y1, x2, y2) in continuous input-image pixel coordinates,
  x along width, y along height, with x1 < x2 and y1 < y2;
* a grid cell / feature cell with index i spans [i, i+1) and has its
  center at i + 0.5 (the same convention maps image pixels, feature map
  cells, and projection grid cells onto each other);
* values entering projection are post-ReLU, so zero is the identity of
  the elementwise max used for combination — zero-fill outside a RoI's
  footprint is only correct under that precondition.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import binio
from . import tensor as T
from .errors import InputError

INTERP_MODES = ("max", "linear")
SELECTION_MODES = ("class-specific", "class-agnostic")


@dataclass(frozen=True)
class RoI:
    """An axis-aligned candidate box in input-image coordinates."""

    image_index: int
    box: tuple  # (x1, y1, x2, y2)
    probs: np.ndarray | None = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise InputError(f"degenerate box {self.box}")
        if self.probs is not None:
            p = np.asarray(self.probs, dtype=np.float32)
            if p.ndim != 1 or p.min() < 0 or p.max() > 1:
                raise InputError("probs must be a vector of values in [0, 1]")
            object.__setattr__(self, "probs", p)


@dataclass
class PerRoIFeatureMap:
    """Fixed-bin feature map (k x h_f x w_f) extracted for one RoI."""

    source: RoI
    map: T.Tensor


@dataclass
class CombinedFeatureMap:
    """Image-aligned map whose spatial grid matches a network site."""

    map: T.Tensor
    site: str
    scale: tuple  # (sy, sx): image -> grid factors


@dataclass
class Selection:
    """Groups of (per-RoI map, weighting probability) chosen for projection.

    Class-specific selection yields one group per class (projection runs
    once per group); class-agnostic selection yields a single group.
    """

    mode: str
    groups: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# RoI pooling


def _footprint_1d(lo_f, hi_f, n_cells):
    """Integer cell range [a, b) covered by a continuous span, clamped non-empty."""
    a = int(np.floor(lo_f))
    b = int(np.ceil(hi_f))
    a = max(0, min(a, n_cells - 1))
    b = max(0, min(b, n_cells))
    if b <= a:
        c = int(np.floor((lo_f + hi_f) / 2.0))
        c = max(0, min(c, n_cells - 1))
        return c, c + 1
    return a, b


def _bin_edges(start, extent, n_bins):
    """Integer bin edges start + floor(j*extent/n_bins); empty bins widen to one cell."""
    j = np.arange(n_bins + 1, dtype=np.int64)
    edges = start + (j * extent) // n_bins
    lo = edges[:-1].copy()
    hi = edges[1:].copy()
    empty = hi <= lo
    hi[empty] = lo[empty] + 1
    return lo, hi


def _pool_kernel(feature, boxes, image_indices, bins, image_hw):
    """Max-pool each box's footprint into fixed bins.

    Returns (pooled (R,C,bh,bw), argmax flat indices into `feature` for
    backward scatter). Ties take the first cell in row-major scan order.
    """
    n, c, fh, fw = feature.shape
    ih, iw = image_hw
    bh, bw = bins
    r = len(boxes)
    sy, sx = fh / ih, fw / iw
    pooled = np.empty((r, c, bh, bw), dtype=feature.dtype)
    argmax = np.empty((r, c, bh, bw), dtype=np.int64)
    flat = feature.reshape(n, c, fh * fw)
    for ri in range(r):
        x1, y1, x2, y2 = boxes[ri]
        ax, bx = _footprint_1d(x1 * sx, x2 * sx, fw)
        ay, by = _footprint_1d(y1 * sy, y2 * sy, fh)
        xlo, xhi = _bin_edges(ax, bx - ax, bw)
        ylo, yhi = _bin_edges(ay, by - ay, bh)
        img = int(image_indices[ri])
        fm = flat[img]
        for j in range(bh):
            rows = np.arange(ylo[j], yhi[j])
            for i in range(bw):
                cols = np.arange(xlo[i], xhi[i])
                idx = (rows[:, None] * fw + cols[None, :]).ravel()
                vals = fm[:, idx]
                a = vals.argmax(axis=1)
                pooled[ri, :, j, i] = vals[np.arange(c), a]
                argmax[ri, :, j, i] = (img * c + np.arange(c)) * (fh * fw) + idx[a]
    return pooled, argmax


def roi_pool_batch(feature: T.Tensor, rois, bins, image_hw) -> T.Tensor:
    """Pool many RoIs from a batched feature map into one (R,C,bh,bw) tensor."""
    boxes = [r.box for r in rois]
    idxs = [r.image_index for r in rois]
    pooled, argmax = _pool_kernel(feature.data, boxes, idxs, bins, image_hw)

    def backward(g):
        if not feature.requires_grad:
            return
        gx = np.zeros(feature.data.size, dtype=feature.dtype)
        np.add.at(gx, argmax.ravel(), g.ravel())
        T._accumulate(feature, gx.reshape(feature.shape))

    return T.make_op(pooled, (feature,), backward, "roi_pool")


def roi_pool(feature: T.Tensor, roi: RoI, bins, image_hw) -> PerRoIFeatureMap:
    """Extract one RoI's fixed-bin map; degenerate footprints clamp to one cell."""
    batched = roi_pool_batch(feature, [roi], bins, image_hw)
    return PerRoIFeatureMap(source=roi, map=T.row(batched, 0))


# ---------------------------------------------------------------------------
# RoI selection


def select_indices(probs: np.ndarray, mode: str, k: int = 5):
    """Top-k RoI indices with their weighting probabilities.

    probs is (R, N). Class-specific returns N groups ranked by probs[:, c];
    class-agnostic returns one group ranked by the max-over-class score,
    weighted by that max (which class's probability applies is not pinned
    down for the agnostic mode, so the max is used). Ties keep the lower
    RoI index. Fewer than k candidates selects all of them.
    """
    if mode not in SELECTION_MODES:
        raise InputError(f"unknown selection mode {mode!r}")
    r = probs.shape[0]
    take = min(k, r)
    groups = []
    if mode == "class-specific":
        for cls in range(probs.shape[1]):
            order = np.argsort(-probs[:, cls], kind="stable")[:take]
            groups.append([(int(i), float(probs[i, cls])) for i in order])
    else:
        scores = probs.max(axis=1) if probs.size else np.zeros(0)
        order = np.argsort(-scores, kind="stable")[:take]
        groups.append([(int(i), float(scores[i])) for i in order])
    return groups


def select_rois(scored, mode: str, k: int = 5, num_classes=None) -> Selection:
    """Choose per-RoI maps for projection from their detection probabilities."""
    if not scored:
        n = num_classes if mode == "class-specific" else 1
        return Selection(mode=mode, groups=[[] for _ in range(n or 1)])
    probs = np.stack([m.source.probs for m in scored])
    if num_classes is not None and probs.shape[1] != num_classes:
        raise InputError(f"expected {num_classes} class probabilities, got {probs.shape[1]}")
    groups = select_indices(probs, mode, k)
    return Selection(mode=mode, groups=[[(scored[i], p) for i, p in g] for g in groups])


# ---------------------------------------------------------------------------
# RoI projection


def _grid_footprint(span_lo, span_hi, n_cells):
    """Cells whose centers fall inside [span_lo, span_hi]; degenerate -> midpoint cell."""
    lo = int(np.ceil(span_lo - 0.5))
    hi = int(np.floor(span_hi - 0.5))
    lo = max(lo, 0)
    hi = min(hi, n_cells - 1)
    if hi < lo:
        c = int(np.floor((span_lo + span_hi) / 2.0))
        c = max(0, min(c, n_cells - 1))
        return c, c
    return lo, hi


def _project_geometry(box, grid, image_hw):
    hc, wc = grid
    ih, iw = image_hw
    x1, y1, x2, y2 = box
    x1s, x2s = x1 * wc / iw, x2 * wc / iw
    y1s, y2s = y1 * hc / ih, y2 * hc / ih
    x1s, x2s = max(x1s, 0.0), min(x2s, float(wc))
    y1s, y2s = max(y1s, 0.0), min(y2s, float(hc))
    xlo, xhi = _grid_footprint(x1s, x2s, wc)
    ylo, yhi = _grid_footprint(y1s, y2s, hc)
    return (x1s, x2s, y1s, y2s), (xlo, xhi, ylo, yhi)


def _max_project_forward(m, box, prob, grid, image_hw):
    """Forward-map bin centers into grid cells; per-cell max; nearest-bin hole fill.

    Returns (out (C,Hc,Wc), source bin flat index per footprint cell (fh,fw,C)).
    """
    c, hf, wf = m.shape
    hc, wc = grid
    (x1s, x2s, y1s, y2s), (xlo, xhi, ylo, yhi) = _project_geometry(box, grid, image_hw)
    bwx = (x2s - x1s) / wf
    bwy = (y2s - y1s) / hf
    bx = x1s + (np.arange(wf) + 0.5) * bwx
    by = y1s + (np.arange(hf) + 0.5) * bwy
    tx = np.clip(np.floor(bx).astype(np.int64), xlo, xhi) - xlo
    ty = np.clip(np.floor(by).astype(np.int64), ylo, yhi) - ylo
    fh, fw = yhi - ylo + 1, xhi - xlo + 1

    vals = (m * prob).transpose(1, 2, 0)  # (hf, wf, C)
    acc = np.full((fh, fw, c), -np.inf, dtype=m.dtype)
    tyg = np.repeat(ty, wf)
    txg = np.tile(tx, hf)
    np.maximum.at(acc, (tyg, txg), vals.reshape(hf * wf, c))

    # source bin per cell/channel; reversed scan leaves the first achiever
    src = np.full((fh, fw, c), -1, dtype=np.int64)
    for b in range(hf * wf - 1, -1, -1):
        j, i = divmod(b, wf)
        cell = (ty[j], tx[i])
        hit = vals[j, i] == acc[cell]
        src[cell][hit] = b

    # fill cells no bin mapped to with the nearest projected bin
    holes = src[:, :, 0] < 0
    if holes.any():
        cyc = ylo + np.arange(fh) + 0.5
        cxc = xlo + np.arange(fw) + 0.5
        near_y = np.abs(cyc[:, None] - by[None, :]).argmin(axis=1)  # first on ties
        near_x = np.abs(cxc[:, None] - bx[None, :]).argmin(axis=1)
        hy, hx = np.nonzero(holes)
        nb = near_y[hy] * wf + near_x[hx]
        acc[hy, hx] = vals.reshape(hf * wf, c)[nb]
        src[hy, hx] = nb[:, None]

    out = np.zeros((c, hc, wc), dtype=m.dtype)
    out[:, ylo : yhi + 1, xlo : xhi + 1] = acc.transpose(2, 0, 1)
    return out, src, (ylo, xlo)


def _linear_project_forward(m, box, prob, grid, image_hw):
    """Inverse-map cell centers to bin coordinates; bilinear over 4 nearest bins."""
    c, hf, wf = m.shape
    hc, wc = grid
    (x1s, x2s, y1s, y2s), (xlo, xhi, ylo, yhi) = _project_geometry(box, grid, image_hw)
    bwx = (x2s - x1s) / wf
    bwy = (y2s - y1s) / hf
    cx = xlo + np.arange(xhi - xlo + 1) + 0.5
    cy = ylo + np.arange(yhi - ylo + 1) + 0.5
    u = np.clip((cx - x1s) / bwx - 0.5, 0.0, wf - 1.0)
    v = np.clip((cy - y1s) / bwy - 0.5, 0.0, hf - 1.0)
    i0 = np.minimum(u.astype(np.int64), max(wf - 2, 0))
    j0 = np.minimum(v.astype(np.int64), max(hf - 2, 0))
    fu = (u - i0).astype(m.dtype)
    fv = (v - j0).astype(m.dtype)
    i1 = np.minimum(i0 + 1, wf - 1)
    j1 = np.minimum(j0 + 1, hf - 1)

    mp = m * prob
    j0g, i0g = j0[:, None], i0[None, :]
    j1g, i1g = j1[:, None], i1[None, :]
    fug, fvg = fu[None, :], fv[:, None]
    patch = (
        mp[:, j0g, i0g] * (1 - fvg) * (1 - fug)
        + mp[:, j0g, i1g] * (1 - fvg) * fug
        + mp[:, j1g, i0g] * fvg * (1 - fug)
        + mp[:, j1g, i1g] * fvg * fug
    )
    out = np.zeros((c, hc, wc), dtype=m.dtype)
    out[:, ylo : yhi + 1, xlo : xhi + 1] = patch
    weights = (j0, j1, i0, i1, fv, fu, (ylo, xlo))
    return out, weights


def roi_project(prf: PerRoIFeatureMap, prob: float, grid, image_hw, interp: str) -> T.Tensor:
    """Project a per-RoI map back to an image-aligned grid, scaled by `prob`.

    The output is zero outside the RoI's projected footprint. MAX mode
    forward-maps each bin center to a cell (multiple hits keep the max,
    unfilled footprint cells copy the nearest projected bin) and routes
    gradients to the contributing bin. Linear mode inverse-maps each cell
    center and is differentiable through the bilinear weights.
    """
    if interp not in INTERP_MODES:
        raise InputError(f"unknown interpolation mode {interp!r}")
    if not (0.0 <= prob <= 1.0):
        raise InputError(f"probability {prob} outside [0, 1]")
    src_t = prf.map
    m = src_t.data
    c, hf, wf = m.shape

    if interp == "max":
        out, src, (oy, ox) = _max_project_forward(m, prf.source.box, prob, grid, image_hw)
        fh, fw = src.shape[:2]

        def backward(g):
            if not src_t.requires_grad:
                return
            gp = g[:, oy : oy + fh, ox : ox + fw].transpose(1, 2, 0)  # (fh, fw, C)
            gm = np.zeros(hf * wf * c, dtype=m.dtype)
            carange = np.arange(c, dtype=np.int64)
            flat = (src * c + carange).ravel()
            np.add.at(gm, flat, (gp * prob).ravel())
            T._accumulate(src_t, gm.reshape(hf, wf, c).transpose(2, 0, 1))

        return T.make_op(out, (src_t,), backward, "roi_project_max")

    out, (j0, j1, i0, i1, fv, fu, (oy, ox)) = _linear_project_forward(
        m, prf.source.box, prob, grid, image_hw
    )
    fh, fw = len(j0), len(i0)

    def backward(g):
        if not src_t.requires_grad:
            return
        gp = g[:, oy : oy + fh, ox : ox + fw].transpose(1, 2, 0) * prob  # (fh, fw, C)
        gm = np.zeros((hf, wf, c), dtype=m.dtype)
        fug, fvg = fu[None, :, None], fv[:, None, None]
        jj0 = np.repeat(j0, fw)
        jj1 = np.repeat(j1, fw)
        ii0 = np.tile(i0, fh)
        ii1 = np.tile(i1, fh)
        np.add.at(gm, (jj0, ii0), (gp * (1 - fvg) * (1 - fug)).reshape(-1, c))
        np.add.at(gm, (jj0, ii1), (gp * (1 - fvg) * fug).reshape(-1, c))
        np.add.at(gm, (jj1, ii0), (gp * fvg * (1 - fug)).reshape(-1, c))
        np.add.at(gm, (jj1, ii1), (gp * fvg * fug).reshape(-1, c))
        T._accumulate(src_t, gm.transpose(2, 0, 1))

    return T.make_op(out, (src_t,), backward, "roi_project_linear")


# ---------------------------------------------------------------------------
# combination


def build_combined_map(
    selection: Selection,
    grid,
    image_hw,
    interp: str,
    site: str = "c5",
    channels=None,
    dump_dir=None,
) -> CombinedFeatureMap:
    """Elementwise max over each group's projections; groups concatenate on channels.

    An empty group contributes an all-zero block (`channels` gives its
    per-group channel count), which is the max-identity for post-ReLU inputs.
    """
    hc, wc = grid
    blocks = []
    for gi, group in enumerate(selection.groups):
        if not group:
            if channels is None:
                raise InputError("channels required to build an all-zero combined map")
            blocks.append(T.Tensor(np.zeros((channels, hc, wc), dtype=np.float32)))
            continue
        projected = [roi_project(prf, prob, grid, image_hw, interp) for prf, prob in group]
        if dump_dir is not None:
            for ri, p in enumerate(projected):
                binio.write_arrays(
                    os.path.join(dump_dir, f"projected_g{gi}_r{ri}.rpj"),
                    {"map": p.data},
                )
        combined = projected[0]
        for p in projected[1:]:
            combined = T.maximum(combined, p)
        blocks.append(combined)
    out = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=0)
    return CombinedFeatureMap(map=out, site=site, scale=(hc / image_hw[0], wc / image_hw[1]))


def batch_pool(maps, empty_shape=None) -> T.Tensor:
    """Elementwise max across per-RoI maps, ignoring their coordinates."""
    tensors = [m.map if isinstance(m, PerRoIFeatureMap) else m for m in maps]
    if not tensors:
        if empty_shape is None:
            raise InputError("empty_shape required to batch-pool an empty list")
        return T.Tensor(np.zeros(empty_shape, dtype=np.float32))
    out = tensors[0]
    for t in tensors[1:]:
        out = T.maximum(out, t)
    return out
