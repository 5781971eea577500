import numpy as np
import pytest

from helpers import two_pixel_masks
from hardseg.errors import ConfigError
from hardseg.grids import LabelGrid
from hardseg.metrics import (SweepRow, assd, boundary_mask, dsc,
                             evaluate_case, evaluate_model,
                             format_report_table, hard_fraction_for_model,
                             mean_macro_dsc, report_csv_lines, sweep_csv_lines,
                             threshold_sweep)
from hardseg.model import build_model
from hardseg.oracles import assd_reference, boundary_pixels_reference, dsc_reference
from hardseg.training import (NesterovSGD, TrainConfig, load_checkpoint,
                              save_checkpoint, snapshot, train)


def _random_masks(rng, n=12, h=9, w=9):
    for _ in range(n):
        yield (rng.random((h, w)) < rng.uniform(0.1, 0.6),
               rng.random((h, w)) < rng.uniform(0.1, 0.6))


def test_dsc_matches_reference_on_random_masks():
    rng = np.random.default_rng(0)
    for a, b in _random_masks(rng):
        got = dsc(a.astype(np.uint8), b.astype(np.uint8), category=1)
        want_value, want_empty = dsc_reference(a, b, 1)
        assert got.value == want_value  # counting arithmetic: exact
        assert got.both_empty == want_empty


def test_dsc_hand_values():
    a = np.array([[1, 1, 0], [0, 0, 0]])
    b = np.array([[1, 0, 0], [1, 0, 0]])
    assert dsc(a, b, 1).value == pytest.approx(2 * 1 / (2 + 2))
    assert dsc(a, a, 1) == (1.0, False)
    assert dsc(np.zeros((2, 2)), np.zeros((2, 2)), 1) == (1.0, True)
    assert dsc(a, np.zeros_like(a), 1) == (0.0, False)


def test_dsc_shape_guard():
    with pytest.raises(ConfigError, match="shape mismatch"):
        dsc(np.zeros((2, 2)), np.zeros((2, 3)), 1)


def test_boundary_matches_reference():
    rng = np.random.default_rng(1)
    for a, _ in _random_masks(rng, n=8):
        got = sorted(map(tuple, np.argwhere(boundary_mask(a))))
        assert got == sorted(boundary_pixels_reference(a))


def test_boundary_edge_pixels_count_as_boundary():
    # a full block: everything touching the grid edge is boundary
    mask = np.ones((4, 4), dtype=bool)
    got = boundary_mask(mask)
    assert not got[1:3, 1:3].any()
    assert got.sum() == 12


def test_assd_matches_reference():
    rng = np.random.default_rng(2)
    for a, b in _random_masks(rng):
        got = assd(a.astype(int), b.astype(int), 1, spacing=(0.8, 1.3))
        want = assd_reference(a, b, 1, spacing=(0.8, 1.3))
        if want is None:
            assert got is None
        else:
            assert got == pytest.approx(want, abs=1e-12)


def test_assd_hand_value_and_spacing():
    a = np.zeros((5, 5), dtype=int)
    b = np.zeros((5, 5), dtype=int)
    a[2, 1] = 1
    b[2, 3] = 1
    assert assd(a, b, 1) == pytest.approx(2.0)
    # anisotropic spacing scales the x axis
    assert assd(a, b, 1, spacing=(1.0, 0.5)) == pytest.approx(1.0)
    assert assd(a, a, 1) == pytest.approx(0.0)


def test_assd_undefined_when_boundary_empty():
    a = np.zeros((3, 3), dtype=int)
    b = np.zeros((3, 3), dtype=int)
    b[1, 1] = 1
    assert assd(a, b, 1) is None
    assert assd(b, a, 1) is None
    assert assd(a, a, 1) is None


def test_two_pixel_mask_helper_is_exhaustive():
    masks = two_pixel_masks(4)
    assert len(masks) == 16 * 15 // 2
    assert all(m.sum() == 2 for m in masks)
    assert len({m.tobytes() for m in masks}) == len(masks)


def test_evaluate_case_per_category_and_macro():
    pred = LabelGrid(np.array([[0, 1], [2, 0]], dtype=np.uint8), 3)
    gt = LabelGrid(np.array([[0, 1], [0, 2]], dtype=np.uint8), 3)
    rep = evaluate_case(pred, gt, case_id="c0")
    assert rep.case_id == "c0"
    assert set(rep.per_category) == {1, 2}
    assert rep.per_category[1].dsc_pct == pytest.approx(100.0)
    assert rep.per_category[2].dsc_pct == pytest.approx(0.0)
    assert rep.macro_dsc_pct == pytest.approx(50.0)
    assert rep.macro_assd_mm is not None


def test_evaluate_case_macro_assd_skips_undefined():
    pred = LabelGrid(np.zeros((4, 4), dtype=np.uint8), 3)
    gt_arr = np.zeros((4, 4), dtype=np.uint8)
    gt_arr[1, 1] = 1
    rep = evaluate_case(pred, LabelGrid(gt_arr, 3))
    assert rep.per_category[1].assd_mm is None       # pred boundary empty
    assert rep.per_category[2].both_empty
    assert rep.macro_assd_mm is None
    assert rep.macro_dsc_pct == pytest.approx(50.0)  # (0 + 100) / 2


def test_evaluate_case_depth1_volumes():
    pred = LabelGrid(np.ones((1, 3, 3), dtype=np.uint8), 2)
    gt = LabelGrid(np.ones((1, 3, 3), dtype=np.uint8), 2)
    rep = evaluate_case(pred, gt)
    assert rep.per_category[1].dsc_pct == pytest.approx(100.0)


def test_evaluate_model_orders_and_parallel_equivalence(small_model_cfg,
                                                        small_dataset):
    model = build_model(small_model_cfg, seed=1)
    serial = evaluate_model(model, small_dataset, jobs=1)
    fanned = evaluate_model(model, small_dataset, jobs=2)
    assert [r.case_id for r in serial] == [s.id for s in small_dataset]
    assert serial == fanned


def test_report_csv_lines_layout():
    pred = LabelGrid(np.array([[0, 1]], dtype=np.uint8), 2)
    gt = LabelGrid(np.array([[0, 1]], dtype=np.uint8), 2)
    lines = report_csv_lines([evaluate_case(pred, gt, case_id="k")])
    assert lines[0] == "case_id,category,dsc_pct,assd_mm,both_empty"
    assert lines[1].startswith("k,1,100.0,")
    assert lines[-1].startswith("k,macro,100.0,")
    # single boundary pixel on each side -> ASSD defined and zero
    assert lines[1].split(",")[3] == "0.0"


def test_report_csv_undefined_cell():
    pred = LabelGrid(np.zeros((2, 2), dtype=np.uint8), 2)
    gt = LabelGrid(np.zeros((2, 2), dtype=np.uint8), 2)
    lines = report_csv_lines([evaluate_case(pred, gt, case_id="e")])
    assert lines[1] == "e,1,100.0,undefined,1"
    assert lines[2] == "e,macro,100.0,undefined,0"


def test_mean_macro_and_table(small_model_cfg, small_dataset):
    model = build_model(small_model_cfg, seed=1)
    reports = evaluate_model(model, small_dataset)
    mean = mean_macro_dsc(reports)
    assert mean == pytest.approx(
        np.mean([r.macro_dsc_pct for r in reports]))
    table = format_report_table(reports)
    assert "mean DSC %" in table and "macro" in table
    assert format_report_table([]) == "(no cases)"


def test_hard_fraction_monotone_in_threshold(small_model_cfg, small_dataset):
    model = build_model(small_model_cfg, seed=1)
    fracs = [hard_fraction_for_model(model, small_dataset, t, levels=(1,))
             for t in (0.1, 0.01, 0.001)]
    assert 0.0 <= fracs[0] <= fracs[1] <= fracs[2] <= 1.0


def _trained_checkpoint(small_model_cfg, small_dataset, tmp_path):
    tcfg = TrainConfig(epochs=1, batch_size=2, lr=0.01, seed=5,
                       levels_active=(1,), threshold=0.01)
    path = tmp_path / "base.zip"
    model, ckpt = train(small_model_cfg, tcfg, small_dataset)
    save_checkpoint(ckpt, path)
    return load_checkpoint(path)


def test_threshold_sweep_inference_only(small_model_cfg, small_dataset,
                                        tmp_path):
    base = _trained_checkpoint(small_model_cfg, small_dataset, tmp_path)
    rows = threshold_sweep(base, small_dataset, thresholds=(0.1, 0.001),
                           retrain=False, log=None)
    assert [r.threshold for r in rows] == [0.1, 0.001]
    # same frozen model: DSC constant, mined fraction grows as T shrinks
    assert rows[0].mean_dsc_pct == rows[1].mean_dsc_pct
    assert rows[0].hard_fraction <= rows[1].hard_fraction


def test_threshold_sweep_retrains_per_threshold(small_model_cfg,
                                                small_dataset, tmp_path):
    base = _trained_checkpoint(small_model_cfg, small_dataset, tmp_path)
    rows = threshold_sweep(base, small_dataset, thresholds=(0.1, 0.001),
                           retrain=True, log=None)
    assert len(rows) == 2
    assert all(np.isfinite(r.mean_dsc_pct) for r in rows)


def test_sweep_csv_lines_modes():
    rows = [SweepRow(0.1, 85.5, 0.25)]
    retrained = sweep_csv_lines(rows, retrained=True)
    frozen = sweep_csv_lines(rows, retrained=False)
    assert retrained[0] == "# threshold sweep mode: retrained"
    assert frozen[0] == "# threshold sweep mode: inference-only"
    assert retrained[1] == "threshold,mean_dsc_pct,hard_fraction"
    assert retrained[2] == "0.1,85.5,0.25"
