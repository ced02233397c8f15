import numpy as np
import pytest

import metrics
from mapping import BeliefGrid, MapGeometry
from metrics import (CellResiduals, aggregate_loss, asymmetric_l1, cell_l1, cell_l2, certainty_weight,
                     evaluate, false_free_map, false_occupied_map, relative_uncertainty, weighted_mean)

GEO = MapGeometry(2, 2, 0.125, (0.0, 0.0))


def _grid(bel_o, bel_f, geometry=GEO):
    return BeliefGrid(geometry, np.asarray(bel_o, dtype=float).reshape(geometry.shape),
                      np.asarray(bel_f, dtype=float).reshape(geometry.shape))


def _residuals(eps_o, eps_f):
    return CellResiduals(np.array([eps_o]), np.array([eps_f]))


def test_cell_losses():
    r = _residuals(0.3, -0.2)
    assert np.allclose(cell_l1(r), 0.5)
    assert np.allclose(cell_l2(r), 0.13)
    assert np.allclose(cell_l1(_residuals(1.0, 1.0)), 2.0)
    assert np.allclose(cell_l2(_residuals(1.0, 1.0)), 2.0)
    assert np.allclose(cell_l1(_residuals(0.0, 0.0)), 0.0)


def test_l2_never_exceeds_l1():
    rng = np.random.default_rng(0)
    r = CellResiduals(rng.uniform(-1, 1, 10000), rng.uniform(-1, 1, 10000))
    assert np.all(cell_l2(r) <= cell_l1(r))


def test_residuals_out_of_range_raise():
    with pytest.raises(ValueError):
        _residuals(1.5, 0.0)


def test_certainty_weight():
    assert np.allclose(certainty_weight(0.6, 0.4, 0.7), 1.0)
    assert np.allclose(certainty_weight(0.0, 0.0, 0.9), 0.1)
    assert np.allclose(certainty_weight(np.array([0.0, 0.3]), np.array([0.0, 0.1]), 0.0), 1.0)
    with pytest.raises(ValueError):
        certainty_weight(0.0, 0.0, 1.5)


def test_asymmetric_l1():
    r = _residuals(0.2, -0.1)
    assert np.allclose(asymmetric_l1(r, 0.0), cell_l1(r))
    assert np.allclose(asymmetric_l1(_residuals(0.0, 0.5), 0.8), 0.9)
    assert np.allclose(asymmetric_l1(_residuals(0.0, -0.5), 0.8), 0.1)
    # знак -1 меняет направление штрафа
    assert np.allclose(asymmetric_l1(_residuals(0.0, -0.5), 0.8, sign=-1), 0.9)
    with pytest.raises(ValueError):
        asymmetric_l1(r, 0.5, sign=2)


def test_weighted_mean():
    assert np.isclose(weighted_mean(np.array([0.2, 0.6]), np.array([1.0, 3.0])), 0.5)
    assert np.isclose(weighted_mean(np.array([0.2, 0.6]), np.ones(2)), 0.4)
    with pytest.raises(ValueError):
        weighted_mean(np.array([0.2]), np.array([0.0]))


def test_aggregate_loss_modes():
    target = _grid([1.0, 0.0, 0.0, 0.5], [0.0, 1.0, 0.0, 0.2])
    pred = _grid([0.0, 0.0, 0.0, 0.5], [0.0, 0.0, 0.0, 0.2])
    assert aggregate_loss(target, target) == 0.0
    assert np.isclose(aggregate_loss(pred, target, "l1"), 0.5)
    assert np.isclose(aggregate_loss(pred, target, "l2"), 0.5)
    # ячейка с C = 0 получает вес 1 - k
    weighted = aggregate_loss(pred, target, "l1", metrics.WEIGHT_CERTAINTY, k=1.0)
    assert np.isclose(weighted, 2.0 / (1.0 + 1.0 + 0.0 + 0.7))
    custom = aggregate_loss(pred, target, lambda r: np.abs(r.eps_o))
    assert np.isclose(custom, 0.25)
    with pytest.raises(ValueError):
        aggregate_loss(pred, target, "l1", "bogus")


def test_geometry_mismatch_raises():
    other = MapGeometry(2, 2, 0.25, (0.0, 0.0))
    with pytest.raises(ValueError):
        metrics.residuals(_grid([0] * 4, [0] * 4), _grid([0] * 4, [0] * 4, other))


def test_false_occupied_and_free():
    target = _grid([0.0, 0.8, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0])
    pred = _grid([1.0, 0.0, 0.0, 0.0], [0.0, 0.5, 0.0, 0.0])
    assert np.allclose(false_occupied_map(pred, target).ravel(), [1.0, 0.0, 0.0, 0.0])
    assert np.allclose(false_free_map(pred, target).ravel(), [0.0, 0.3, 0.0, 0.0])
    uncertain = _grid([0.0] * 4, [0.0] * 4)
    assert false_occupied_map(uncertain, uncertain).max() == 0.0
    assert false_free_map(uncertain, uncertain).max() == 0.0


def test_relative_uncertainty():
    target = _grid([0.4] * 4, [0.4] * 4)
    assert np.isclose(relative_uncertainty(target, target), 1.0)
    pred = _grid([0.25] * 4, [0.25] * 4)
    assert np.isclose(relative_uncertainty(pred, target), 2.5)
    sure = _grid([1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0])
    assert relative_uncertainty(sure, target) == 0.0
    with pytest.raises(ValueError):
        relative_uncertainty(target, sure)


def test_evaluate_report():
    target = _grid([0.4, 0.0, 0.9, 0.0], [0.1, 0.0, 0.0, 0.6])
    report = evaluate(target, target)
    assert report.l1 == 0.0 and report.l2 == 0.0 and report.asym_l1 == 0.0
    assert report.rel_unc == 1.0
    assert report.false_o == 0.0 and report.false_f == 0.0
    assert report.cells == 4 and report.weight_sum == 4.0

    pred = target.swapped()
    weighted = evaluate(pred, target, k=0.5, asym_k=0.3, asym_sign=-1)
    assert weighted.k == 0.5 and weighted.asym_sign == -1
    assert np.isclose(weighted.weight_sum, float(certainty_weight(target.bel_o, target.bel_f, 0.5).sum()))
    assert weighted.l1 > 0.0
    assert set(weighted.model_dump()) == {"l1", "l2", "asym_l1", "rel_unc", "false_o", "false_f",
                                          "cells", "weight_sum", "k", "asym_k", "asym_sign"}


def test_cell_maps_have_grid_shape():
    target = _grid([0.4, 0.0, 0.9, 0.0], [0.1, 0.0, 0.0, 0.6])
    maps = metrics.cell_maps(target.swapped(), target)
    assert set(maps) == {"l1", "l2", "false_o", "false_f"}
    for arr in maps.values():
        assert arr.shape == GEO.shape
        assert arr.min() >= 0.0
