import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from skimage.metrics import structural_similarity

from locinv.attention import AttentionSnapshot
from locinv.errors import InputError
from locinv.evaluation import (THRESHOLDS, aggregate_reports, compare_methods, image_metrics,
                               iou_curve, psnr_from_mse, register_metric_provider, ssim,
                               unregister_metric_provider)


def brute_force_iou(grid, mask, theta):
    inter = union = 0
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            p = grid[i, j] >= theta
            inter += p and mask[i, j]
            union += p or mask[i, j]
    return 1.0 if union == 0 else inter / union


def test_thresholds():
    assert len(THRESHOLDS) == 101
    assert THRESHOLDS[0] == 0 and THRESHOLDS[-1] == 1
    assert np.allclose(np.diff(THRESHOLDS), 0.01)


def test_iou_matches_enumeration_on_random_fixtures():
    rng = np.random.default_rng(42)
    for _ in range(100):
        grid = rng.random((8, 8))
        grid /= grid.max()
        mask = rng.random((8, 8)) > rng.random()
        curve = iou_curve(grid, mask)
        expected = [brute_force_iou(grid, mask, th) for th in THRESHOLDS]
        assert np.array_equal(curve.iou, np.asarray(expected, np.float64))
        assert curve.iou[0] == mask.sum() / 64


def test_iou_exact_map_is_one_above_zero():
    mask = np.zeros((8, 8), bool)
    mask[2:5, 1:7] = True
    curve = iou_curve(mask.astype(float), mask)
    assert np.all(curve.iou[1:] == 1.0)
    assert curve.peak == 1.0


def test_iou_shape_mismatch_rejected():
    with pytest.raises(InputError):
        iou_curve(np.zeros((8, 8)), np.zeros((4, 4), bool))


@given(st.integers(0, 7), st.integers(0, 7), st.integers(1, 8), st.integers(1, 8))
@settings(max_examples=60, deadline=None)
def test_iou_monotone_in_mask_containment(y, x, h, w):
    a = np.zeros((8, 8), bool)
    a[y:y + h, x:x + w] = True
    b = a.copy()
    b[max(y - 1, 0):y + h + 1, max(x - 1, 0):x + w + 1] = True
    grid = a.astype(float)
    assert iou_curve(grid, a).iou[-1] >= iou_curve(grid, b).iou[-1]


def _snaps(grids, t_values=range(1, 11)):
    return {t: AttentionSnapshot(t, torch.as_tensor(np.stack(grids)), 1, len(grids))
            for t in t_values}


def test_compare_single_method_equals_iou_curve():
    rng = np.random.default_rng(3)
    g = rng.random((8, 8))
    mask = g > 0.6
    cmp = compare_methods({"m": {"e": _snaps([np.zeros((8, 8)), g])}}, {"e": {1: mask}})
    direct = iou_curve(g / g.max(), mask)
    assert np.allclose(cmp.curves["m"], direct.iou)
    assert cmp.summary["m"]["auc"] == pytest.approx(direct.auc)


def test_duplicate_methods_give_identical_curves(caplog):
    rng = np.random.default_rng(4)
    snaps = _snaps([rng.random((8, 8)), rng.random((8, 8))])
    targets = {"e1": {1: rng.random((8, 8)) > 0.5}, "e2": {1: rng.random((8, 8)) > 0.5}}
    cmp = compare_methods({"a": {"e1": snaps, "e2": snaps}, "b": {"e1": snaps, "e2": snaps}}, targets)
    assert np.array_equal(cmp.curves["a"], cmp.curves["b"])
    missing = compare_methods({"a": {"e1": snaps}}, targets)
    assert missing.summary["a"]["skipped_entries"] == ["e2"]
    assert "no attention dump" in caplog.text


def test_compare_rejects_mixed_resolutions():
    s8 = _snaps([np.ones((8, 8))])
    s4 = _snaps([np.ones((4, 4))])
    with pytest.raises(InputError):
        compare_methods({"a": {"e": s8}, "b": {"e": s4}}, {"e": {0: np.ones((8, 8), bool)}})


def test_mean_over_final_steps_policy():
    early = {t: AttentionSnapshot(t, torch.ones(1, 8, 8) * (t > 10), 1, 1) for t in range(1, 21)}
    mask = np.zeros((8, 8), bool)
    mask[0, 0] = True
    cmp = compare_methods({"m": {"e": early}}, {"e": {0: mask}})
    # maps for t <= 10 are all zero, so every threshold above 0 predicts nothing
    assert cmp.curves["m"][1] == 0.0
    per_t = compare_methods({"m": {"e": early}}, {"e": {0: mask}}, policy="per-t", t=15)
    assert per_t.curves["m"][-1] == pytest.approx(1 / 64)


def test_curves_csv(tmp_path):
    cmp = compare_methods({"m": {"e": _snaps([np.eye(8)])}}, {"e": {0: np.eye(8, dtype=bool)}})
    cmp.to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "threshold,method,mean_iou"
    assert len(lines) == 102


def test_identical_images():
    img = np.random.default_rng(0).random((3, 16, 16))
    rep = image_metrics(img, img)
    assert rep.full["mse"] == 0 and rep.full["psnr"] == math.inf
    assert rep.full["ssim"] == pytest.approx(1.0)
    assert rep.to_dict()["full"]["psnr"] == "inf"


def test_uniform_offset_mse():
    ref = np.full((3, 8, 8), 0.25)
    rep = image_metrics(ref + 0.1, ref)
    assert rep.full["mse"] == pytest.approx(0.01, abs=1e-15)
    assert rep.full["psnr"] == pytest.approx(20.0)


def test_background_metrics():
    ref = np.zeros((3, 8, 8))
    edit = ref.copy()
    edit[:, :4] = 0.5
    bg = np.zeros((8, 8), bool)
    bg[4:] = True
    rep = image_metrics(edit, ref, bg)
    assert rep.background["mse"] == 0.0
    assert rep.pixels["background"] + rep.pixels["foreground"] == rep.pixels["total"] == 64
    empty = image_metrics(edit, ref, np.zeros((8, 8), bool))
    assert empty.background is None


def test_ssim_small_images():
    rep = image_metrics(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))
    assert rep.full["ssim"] is None
    with pytest.raises(InputError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))


def test_metric_input_validation():
    with pytest.raises(InputError):
        image_metrics(np.zeros((3, 4, 4)), np.zeros((3, 5, 5)))
    with pytest.raises(InputError):
        image_metrics(np.full((3, 4, 4), 1.5), np.zeros((3, 4, 4)))


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_skimage(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16))
    b = np.clip(a + rng.normal(0, 0.1, (16, 16)), 0, 1)
    ref = structural_similarity(a, b, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-4)


def test_metric_providers():
    register_metric_provider("const", lambda e, r, m: 0.5)
    try:
        rep = image_metrics(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)))
        assert rep.extra == {"const": 0.5}
    finally:
        unregister_metric_provider("const")
    assert image_metrics(np.zeros((3, 4, 4)), np.zeros((3, 4, 4))).extra == {}


def test_aggregate_is_permutation_invariant():
    rng = np.random.default_rng(1)
    reps = [image_metrics(rng.random((3, 16, 16)), rng.random((3, 16, 16)), rng.random((16, 16)) > 0.5)
            for _ in range(5)]
    a = aggregate_reports(reps)
    b = aggregate_reports(reps[::-1])
    for part in ("full", "background"):
        for k in a[part]:
            assert a[part][k] == pytest.approx(b[part][k], rel=1e-12)


def test_psnr_sentinel():
    assert psnr_from_mse(0.0) == math.inf
    assert psnr_from_mse(1e-2) == pytest.approx(20)
