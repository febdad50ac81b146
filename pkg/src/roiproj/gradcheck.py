"""Finite-difference verification of every differentiable operator.

Checks rebuild the computation in float64 (the engine preserves input
dtype) so central differences at h=1e-3 sit far above roundoff noise.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .roi import RoI, PerRoIFeatureMap, roi_pool_batch, roi_project

FD_STEP = 1e-3
TOLERANCE = 1e-3


def relative_error(analytic, numeric, floor=1e-2):
    """Max of |a-n| / max(|a|, |n|, floor); the floor keeps dead units from dividing by ~0."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def numeric_gradient(f, arr, h=FD_STEP, coords=None):
    """Central differences of scalar f w.r.t. arr, optionally at sampled coords."""
    flat = arr.reshape(-1)
    idxs = range(flat.size) if coords is None else coords
    grads = {}
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grads[i] = (fp - fm) / (2.0 * h)
    return grads


def check_tensors(loss_fn, named_inputs, coords_per_tensor=None, rng=None, h=FD_STEP):
    """Compare backward() grads against finite differences for each named tensor.

    loss_fn() must rebuild the graph from the current tensor data and
    return a scalar Tensor. Returns {name: max relative error}.
    """
    for t in named_inputs.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: t.grad.copy() for name, t in named_inputs.items()}

    def scalar():
        with T.no_grad():
            return float(loss_fn().data)

    report = {}
    for name, t in named_inputs.items():
        flat_size = t.data.size
        if coords_per_tensor is None or flat_size <= coords_per_tensor:
            coords = None
        else:
            coords = sorted(rng.choice(flat_size, size=coords_per_tensor, replace=False).tolist())
        numeric = numeric_gradient(scalar, t.data, h=h, coords=coords)
        a_flat = analytic[name].reshape(-1)
        errs = [relative_error(a_flat[i], g) for i, g in numeric.items()]
        report[name] = max(errs) if errs else 0.0
    return report


def _rand(rng, *shape):
    return T.Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _weighted_sum(out, proj):
    return T.tsum(T.mul(out, T.Tensor(proj)))


def operator_suite(seed=0):
    """Finite-difference check of each operator; returns {operator: max rel error}.

    Covers conv (stride/pad variants), both pools, fully-connected, relu,
    channel concat, elementwise max, RoI pooling, both losses, and
    linear-mode RoI projection.
    """
    rng = np.random.default_rng(seed)
    results = {}

    def run(name, tensors, loss_fn):
        results[name] = max(check_tensors(loss_fn, tensors, rng=rng).values())

    x = _rand(rng, 2, 3, 8, 8)
    w = _rand(rng, 4, 3, 3, 3)
    b = _rand(rng, 4)
    p1 = rng.standard_normal((2, 4, 8, 8))
    run("conv2d(3x3,pad1)", {"x": x, "w": w, "b": b},
        lambda: _weighted_sum(T.conv2d(x, w, b, 1, 1), p1))

    w2 = _rand(rng, 4, 3, 2, 2)
    p2 = rng.standard_normal((2, 4, 4, 4))
    run("conv2d(2x2,stride2)", {"x": x, "w": w2, "b": b},
        lambda: _weighted_sum(T.conv2d(x, w2, b, 2, 0), p2))

    xm = _rand(rng, 2, 3, 6, 6)
    pm = rng.standard_normal((2, 3, 3, 3))
    run("max_pool2d", {"x": xm}, lambda: _weighted_sum(T.max_pool2d(xm, (2, 2), 2), pm))
    run("avg_pool2d", {"x": xm}, lambda: _weighted_sum(T.avg_pool2d(xm, (2, 2), 2), pm))

    xf = _rand(rng, 3, 7)
    wf = _rand(rng, 5, 7)
    bf = _rand(rng, 5)
    pf = rng.standard_normal((3, 5))
    run("fully_connected", {"x": xf, "w": wf, "b": bf},
        lambda: _weighted_sum(T.linear(xf, wf, bf), pf))

    xr = _rand(rng, 4, 9)
    pr = rng.standard_normal((4, 9))
    run("relu", {"x": xr}, lambda: _weighted_sum(T.relu(xr), pr))

    ca = _rand(rng, 3, 4, 4)
    cb = _rand(rng, 2, 4, 4)
    pc = rng.standard_normal((5, 4, 4))
    run("concat_channels", {"a": ca, "b": cb},
        lambda: _weighted_sum(T.concat([ca, cb], axis=0), pc))

    ea = _rand(rng, 3, 5, 5)
    eb = _rand(rng, 3, 5, 5)
    pe = rng.standard_normal((3, 5, 5))
    run("elementwise_max", {"a": ea, "b": eb},
        lambda: _weighted_sum(T.maximum(ea, eb), pe))

    feat = _rand(rng, 1, 3, 8, 8)
    rois = [RoI(0, (3.2, 5.1, 28.7, 30.4)), RoI(0, (0.5, 1.0, 17.3, 12.2))]
    pp = rng.standard_normal((2, 3, 2, 2))
    run("roi_pool", {"feat": feat},
        lambda: _weighted_sum(roi_pool_batch(feat, rois, (2, 2), (32, 32)), pp))

    ls = _rand(rng, 3, 5)
    labels = rng.integers(0, 5, size=3)
    run("softmax_cross_entropy", {"logits": ls},
        lambda: T.softmax_cross_entropy(ls, labels))

    lg = _rand(rng, 3, 4)
    targets = rng.integers(0, 2, size=(3, 4)).astype(np.float64)
    run("sigmoid_cross_entropy", {"logits": lg},
        lambda: T.sigmoid_cross_entropy(lg, targets))

    mt = _rand(rng, 3, 3, 3)
    roi = RoI(0, (6.3, 9.7, 44.8, 51.2))
    pj = rng.standard_normal((3, 8, 8))
    run("roi_project_linear", {"map": mt},
        lambda: _weighted_sum(
            roi_project(PerRoIFeatureMap(roi, mt), 0.7, (8, 8), (64, 64), "linear"), pj
        ))

    return results


def network_sweep(seed=0, coords_per_tensor=3):
    """Finite-difference sweep over sampled coordinates of every parameter
    of a small three-branch network under the combined multi-task loss.

    Uses a smaller step than the per-operator checks: with ~10k relu and
    max units in the graph, an h=1e-3 nudge of a bias routinely pushes
    some unit across its kink, which measures the kink rather than the
    gradient. h=1e-5 in float64 stays far above roundoff.
    """
    from .model import NetworkConfig, build_network
    from .training import multitask_loss_for_gradcheck

    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(
        image_size=32,
        shared_channels=(4, 6, 6, 6, 6),
        branch_channels=(6, 6),
        roi_bins=(2, 2),
        init="he",
    )
    model = build_network(cfg, seed=seed)
    for p in model.params.values():
        p.data = p.data.astype(np.float64)
        p.grad = np.zeros_like(p.data)
    images = T.Tensor(rng.uniform(0, 1, size=(2, 3, 32, 32)), dtype=np.float64)
    report = check_tensors(
        lambda: multitask_loss_for_gradcheck(model, images, rng_seed=seed),
        model.params,
        coords_per_tensor=coords_per_tensor,
        rng=rng,
        h=1e-5,
    )
    return report
