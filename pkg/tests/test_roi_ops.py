import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roiproj import tensor as T
from roiproj.errors import InputError
from roiproj.gradcheck import check_tensors
from roiproj.roi import (
    PerRoIFeatureMap,
    RoI,
    Selection,
    batch_pool,
    build_combined_map,
    roi_pool,
    roi_project,
    select_rois,
)

from oracles import fold_max_oracle, linear_project_oracle, max_project_oracle, roi_pool_oracle


def _prf(m, box=(0.0, 0.0, 64.0, 64.0), probs=None, image_index=0):
    return PerRoIFeatureMap(source=RoI(image_index, box, probs=probs), map=T.Tensor(m))


def _feature(rng, c, h, w):
    return T.Tensor(rng.standard_normal((1, c, h, w)).astype(np.float32))


# ---------------------------------------------------------------------------
# roi_pool


def test_roi_pool_identity_copy(rng):
    feat = _feature(rng, 3, 4, 4)
    out = roi_pool(feat, RoI(0, (0.0, 0.0, 64.0, 64.0)), (4, 4), (64, 64))
    np.testing.assert_array_equal(out.map.data, feat.data[0])


def test_roi_pool_global_max():
    feat = T.Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = roi_pool(feat, RoI(0, (0.0, 0.0, 64.0, 64.0)), (1, 1), (64, 64))
    assert out.map.data.reshape(-1).tolist() == [4.0]


def test_roi_pool_matches_brute_force_oracle(rng):
    for _ in range(50):
        feat = rng.standard_normal((2, 8, 8)).astype(np.float32)
        x1, y1 = rng.uniform(0, 40, size=2)
        w, h = rng.uniform(8, 24, size=2)
        box = (x1, y1, min(x1 + w, 64.0), min(y1 + h, 64.0))
        out = roi_pool(T.Tensor(feat[None]), RoI(0, box), (2, 2), (64, 64))
        np.testing.assert_array_equal(out.map.data, roi_pool_oracle(feat, box, (2, 2), (64, 64)))


def test_roi_pool_degenerate_footprint_clamps_not_errors(rng):
    feat = _feature(rng, 1, 8, 8)
    out = roi_pool(feat, RoI(0, (17.0, 17.0, 18.0, 18.0)), (2, 2), (64, 64))
    # a sub-cell box lands on the single containing cell (2,2)
    np.testing.assert_array_equal(out.map.data, np.full((1, 2, 2), feat.data[0, 0, 2, 2]))


def test_roi_pool_gradient_routes_to_argmax(rng):
    feat = T.Tensor(rng.standard_normal((1, 1, 4, 4)).astype(np.float32), requires_grad=True)
    out = roi_pool(feat, RoI(0, (0.0, 0.0, 64.0, 64.0)), (1, 1), (64, 64))
    T.tsum(out.map).backward()
    assert feat.grad.sum() == 1.0
    assert feat.grad.reshape(-1)[feat.data.reshape(-1).argmax()] == 1.0


# ---------------------------------------------------------------------------
# selection


def test_select_rois_class_specific_group_count(rng):
    maps = [
        _prf(rng.standard_normal((4, 2, 2)).astype(np.float32),
             probs=rng.uniform(0, 1, 3).astype(np.float32))
        for _ in range(8)
    ]
    sel = select_rois(maps, "class-specific", k=5, num_classes=3)
    assert len(sel.groups) == 3
    assert all(len(g) == 5 for g in sel.groups)
    combined = build_combined_map(sel, (4, 4), (64, 64), "linear", channels=4)
    assert combined.map.shape == (12, 4, 4)  # k x N channels


def test_select_rois_exhaustion_uses_all_available(rng):
    maps = [
        _prf(rng.standard_normal((2, 2, 2)).astype(np.float32),
             probs=np.array([0.3, 0.7], dtype=np.float32))
        for _ in range(2)
    ]
    sel = select_rois(maps, "class-agnostic", k=5)
    assert len(sel.groups) == 1 and len(sel.groups[0]) == 2


def test_select_rois_agnostic_matches_sort_oracle():
    probs = [0.9, 0.2, 0.8, 0.1, 0.5, 0.4]
    maps = [
        _prf(np.zeros((1, 2, 2), dtype=np.float32), probs=np.array([p], dtype=np.float32))
        for p in probs
    ]
    sel = select_rois(maps, "class-agnostic", k=5)
    picked = [maps.index(prf) for prf, _ in sel.groups[0]]
    expected = sorted(range(len(probs)), key=lambda i: (-probs[i], i))[:5]
    assert picked == expected


def test_select_rois_ties_take_lower_index():
    probs = np.array([0.5, 0.9, 0.9, 0.5], dtype=np.float32)
    maps = [_prf(np.zeros((1, 2, 2), dtype=np.float32), probs=p[None]) for p in probs]
    sel = select_rois(maps, "class-agnostic", k=2)
    picked = [maps.index(prf) for prf, _ in sel.groups[0]]
    assert picked == [1, 2]


# ---------------------------------------------------------------------------
# roi_project


@pytest.mark.parametrize("interp", ["max", "linear"])
def test_project_identity_round_trip(rng, interp):
    m = rng.standard_normal((3, 8, 8)).astype(np.float32)
    out = roi_project(_prf(m), 1.0, (8, 8), (64, 64), interp)
    np.testing.assert_allclose(out.data, m, atol=1e-6)


def test_project_max_single_cell_takes_maximum():
    m = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
    # box whose grid footprint is a single cell of the 8x8 grid
    out = roi_project(_prf(m, box=(16.0, 16.0, 24.0, 24.0)), 1.0, (8, 8), (64, 64), "max")
    assert out.data[0, 2, 2] == 4.0
    assert np.count_nonzero(out.data) == 1


def test_project_linear_quadrant_matches_rasterization_oracle():
    m = np.array([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32)
    box = (0.0, 0.0, 32.0, 32.0)
    out = roi_project(_prf(m, box=box), 0.5, (8, 8), (64, 64), "linear")
    expected = linear_project_oracle(m.astype(np.float64), box, 0.5, (8, 8), (64, 64))
    np.testing.assert_allclose(out.data, expected, atol=1e-5)
    assert np.all(out.data[:, 4:, :] == 0) and np.all(out.data[:, :, 4:] == 0)


def _random_instance(rng, grids=(4, 8, 16)):
    # box dims stay above one grid-cell spacing so the footprint is never
    # degenerate; the degenerate clamp has its own dedicated tests
    c = int(rng.integers(1, 4))
    hf, wf = int(rng.integers(1, 5)), int(rng.integers(1, 5))
    m = rng.standard_normal((c, hf, wf)).astype(np.float32)
    g = int(rng.choice(grids))
    spacing = 64.0 / g
    w, h = rng.uniform(1.2 * spacing, 3.5 * spacing, size=2)
    x1 = rng.uniform(0, 64.0 - w)
    y1 = rng.uniform(0, 64.0 - h)
    box = (x1, y1, x1 + w, y1 + h)
    prob = float(rng.uniform(0.1, 1.0))
    return m, box, prob, (g, g)


def test_project_linear_matches_oracle_on_random_instances(rng):
    for _ in range(60):
        m, box, prob, grid = _random_instance(rng)
        out = roi_project(_prf(m, box=box), prob, grid, (64, 64), "linear")
        expected = linear_project_oracle(m.astype(np.float64), box, prob, grid, (64, 64))
        np.testing.assert_allclose(out.data, expected, atol=1e-5)


def test_project_max_matches_oracle_on_random_instances(rng):
    for _ in range(60):
        m, box, prob, grid = _random_instance(rng)
        out = roi_project(_prf(m, box=box), prob, grid, (64, 64), "max")
        expected = max_project_oracle(m.astype(np.float64), box, prob, grid, (64, 64))
        np.testing.assert_allclose(out.data, expected, rtol=1e-6, atol=1e-7)


@pytest.mark.parametrize("interp", ["max", "linear"])
def test_project_quadrant_locality(rng, interp):
    # a RoI in the top-left image quadrant only touches top-left grid cells
    m = np.abs(rng.standard_normal((2, 3, 3))).astype(np.float32) + 0.1
    out = roi_project(_prf(m, box=(2.0, 3.0, 31.0, 30.0)), 1.0, (8, 8), (64, 64), interp)
    assert np.any(out.data[:, :4, :4] != 0)
    assert np.all(out.data[:, 4:, :] == 0)
    assert np.all(out.data[:, :, 4:] == 0)


@settings(deadline=None, max_examples=30)
@given(prob=st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_project_probability_scaling(prob):
    rng = np.random.default_rng(7)
    m = rng.standard_normal((2, 2, 2)).astype(np.float32)
    box = (5.0, 9.0, 40.0, 50.0)
    for interp in ("max", "linear"):
        full = roi_project(_prf(m, box=box), 1.0, (8, 8), (64, 64), interp)
        scaled = roi_project(_prf(m, box=box), prob, (8, 8), (64, 64), interp)
        np.testing.assert_allclose(scaled.data, np.float32(prob) * full.data, atol=1e-6)


@pytest.mark.parametrize("interp", ["max", "linear"])
def test_project_degenerate_footprint_clamps_to_midpoint_cell(rng, interp):
    # a sub-cell box projects into the single cell containing its midpoint
    m = np.abs(rng.standard_normal((1, 2, 2))).astype(np.float32) + 0.1
    out = roi_project(_prf(m, box=(33.0, 33.0, 36.0, 36.0)), 1.0, (4, 4), (64, 64), interp)
    nz = np.nonzero(out.data[0])
    assert (nz[0].tolist(), nz[1].tolist()) == ([2], [2])


def test_project_rejects_bad_inputs(rng):
    m = _prf(rng.standard_normal((1, 2, 2)).astype(np.float32))
    with pytest.raises(InputError):
        roi_project(m, 1.5, (8, 8), (64, 64), "linear")
    with pytest.raises(InputError):
        roi_project(m, 0.5, (8, 8), (64, 64), "cubic")


def test_project_linear_gradient_matches_finite_differences(rng):
    m = T.Tensor(rng.standard_normal((2, 3, 3)), requires_grad=True, dtype=np.float64)
    prf = PerRoIFeatureMap(RoI(0, (6.0, 10.0, 45.0, 52.0)), m)
    proj = rng.standard_normal((2, 8, 8))
    report = check_tensors(
        lambda: T.tsum(T.mul(roi_project(prf, 0.7, (8, 8), (64, 64), "linear"), T.Tensor(proj))),
        {"m": m},
    )
    assert report["m"] < 1e-3


# ---------------------------------------------------------------------------
# combination


def test_combined_map_single_roi_equals_projection(rng):
    m = rng.standard_normal((2, 2, 2)).astype(np.float32)
    prf = _prf(m, box=(4.0, 4.0, 30.0, 28.0))
    sel = Selection(mode="class-agnostic", groups=[[(prf, 0.6)]])
    combined = build_combined_map(sel, (8, 8), (64, 64), "linear")
    direct = roi_project(prf, 0.6, (8, 8), (64, 64), "linear")
    np.testing.assert_array_equal(combined.map.data, direct.data)


def test_combined_map_elementwise_max():
    a = _prf(np.array([[[1.0, 5.0], [2.0, 0.0]]], dtype=np.float32), box=(0.0, 0.0, 64.0, 64.0))
    b = _prf(np.array([[[3.0, 1.0], [0.0, 4.0]]], dtype=np.float32), box=(0.0, 0.0, 64.0, 64.0))
    sel = Selection(mode="class-agnostic", groups=[[(a, 1.0), (b, 1.0)]])
    combined = build_combined_map(sel, (2, 2), (64, 64), "max")
    np.testing.assert_array_equal(combined.map.data, [[[3.0, 5.0], [2.0, 4.0]]])


def test_combined_map_matches_fold_oracle(rng):
    prfs = []
    for _ in range(5):
        m = np.abs(rng.standard_normal((2, 2, 2))).astype(np.float32)
        x1, y1 = rng.uniform(0, 30, size=2)
        box = (x1, y1, x1 + rng.uniform(10, 30), y1 + rng.uniform(10, 30))
        box = (box[0], box[1], min(box[2], 64.0), min(box[3], 64.0))
        prfs.append(_prf(m, box=box))
    weights = rng.uniform(0.2, 1.0, 5)
    sel = Selection(mode="class-agnostic", groups=[list(zip(prfs, weights))])
    combined = build_combined_map(sel, (8, 8), (64, 64), "linear")
    projections = [
        roi_project(p, w, (8, 8), (64, 64), "linear").data for p, w in zip(prfs, weights)
    ]
    np.testing.assert_allclose(combined.map.data, fold_max_oracle(projections), atol=1e-6)


def test_combined_map_monotone_under_added_roi(rng):
    ms = [np.abs(rng.standard_normal((1, 2, 2))).astype(np.float32) for _ in range(3)]
    prfs = [_prf(m, box=(8.0 * i, 4.0, 8.0 * i + 20.0, 30.0)) for i, m in enumerate(ms)]
    small = build_combined_map(
        Selection("class-agnostic", [[(prfs[0], 1.0), (prfs[1], 1.0)]]), (8, 8), (64, 64), "max"
    )
    big = build_combined_map(
        Selection("class-agnostic", [[(prfs[0], 1.0), (prfs[1], 1.0), (prfs[2], 1.0)]]),
        (8, 8), (64, 64), "max",
    )
    assert np.all(big.map.data >= small.map.data)


def test_combined_map_empty_group_gives_zero_block():
    sel = Selection(mode="class-specific", groups=[[], [], []])
    combined = build_combined_map(sel, (4, 4), (64, 64), "linear", channels=8)
    assert combined.map.shape == (24, 4, 4)
    assert not combined.map.data.any()


def test_combined_map_permutation_invariant_within_group(rng):
    prfs = []
    for _ in range(4):
        m = np.abs(rng.standard_normal((2, 2, 2))).astype(np.float32)
        x1, y1 = rng.uniform(0, 25, size=2)
        prfs.append(_prf(m, box=(x1, y1, x1 + 22.0, y1 + 25.0)))
    weights = rng.uniform(0.2, 1.0, 4).tolist()
    fwd = build_combined_map(
        Selection("class-agnostic", [list(zip(prfs, weights))]), (8, 8), (64, 64), "max"
    )
    rev = build_combined_map(
        Selection("class-agnostic", [list(zip(prfs[::-1], weights[::-1]))]), (8, 8), (64, 64), "max"
    )
    np.testing.assert_array_equal(fwd.map.data, rev.map.data)


# ---------------------------------------------------------------------------
# batch pooling


def test_batch_pool_single_map_is_identity(rng):
    m = _prf(rng.standard_normal((3, 2, 2)).astype(np.float32))
    np.testing.assert_array_equal(batch_pool([m]).data, m.map.data)


def test_batch_pool_example():
    a = _prf(np.array([[[1.0, 5.0], [2.0, 0.0]]], dtype=np.float32))
    b = _prf(np.array([[[3.0, 1.0], [0.0, 4.0]]], dtype=np.float32))
    np.testing.assert_array_equal(batch_pool([a, b]).data, [[[3.0, 5.0], [2.0, 4.0]]])


def test_batch_pool_matches_fold_oracle(rng):
    arrays = [rng.standard_normal((2, 3, 3)).astype(np.float32) for _ in range(10)]
    out = batch_pool([_prf(a) for a in arrays])
    np.testing.assert_array_equal(out.data, fold_max_oracle(arrays).astype(np.float32))


def test_batch_pool_empty_returns_zero_map():
    out = batch_pool([], empty_shape=(4, 2, 2))
    assert out.shape == (4, 2, 2) and not out.data.any()


@settings(deadline=None, max_examples=25)
@given(perm_seed=st.integers(min_value=0, max_value=10_000))
def test_batch_pool_permutation_invariant(perm_seed):
    rng = np.random.default_rng(42)
    arrays = [rng.standard_normal((1, 2, 2)).astype(np.float32) for _ in range(6)]
    perm = np.random.default_rng(perm_seed).permutation(6)
    base = batch_pool([_prf(a) for a in arrays])
    shuffled = batch_pool([_prf(arrays[i]) for i in perm])
    np.testing.assert_array_equal(base.data, shuffled.data)
