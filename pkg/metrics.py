"""Метрики сравнения предсказанной сетки убеждений с целевой.

Остатки: ε_O = bel(O) − bel′(O), ε_F = bel(F) − bel′(F), где bel — цель, bel′ — предсказание.
"""

import logging
from dataclasses import dataclass
from functools import partial
from typing import Callable, Dict, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from mapping import BeliefGrid

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6

WEIGHT_UNIFORM = "uniform"
WEIGHT_CERTAINTY = "certainty"


@dataclass(frozen=True)
class CellResiduals:
    eps_o: np.ndarray
    eps_f: np.ndarray

    def __post_init__(self):
        eps_o = np.asarray(self.eps_o, dtype=np.float64)
        eps_f = np.asarray(self.eps_f, dtype=np.float64)
        if eps_o.shape != eps_f.shape:
            raise ValueError("residual channels differ in shape")
        if np.any(np.abs(eps_o) > 1.0 + 1e-12) or np.any(np.abs(eps_f) > 1.0 + 1e-12):
            raise ValueError("residuals must lie in [-1, 1]")
        object.__setattr__(self, "eps_o", eps_o)
        object.__setattr__(self, "eps_f", eps_f)


def _check_aligned(pred: BeliefGrid, target: BeliefGrid) -> None:
    if pred.geometry != target.geometry:
        raise ValueError(f"grid geometry mismatch: {pred.geometry} vs {target.geometry}")


def residuals(pred: BeliefGrid, target: BeliefGrid) -> CellResiduals:
    _check_aligned(pred, target)
    return CellResiduals(target.bel_o - pred.bel_o, target.bel_f - pred.bel_f)


def cell_l1(r: CellResiduals) -> np.ndarray:
    return np.abs(r.eps_o) + np.abs(r.eps_f)


def cell_l2(r: CellResiduals) -> np.ndarray:
    return r.eps_o ** 2 + r.eps_f ** 2


def asymmetric_l1(r: CellResiduals, k: float, sign: int = 1) -> np.ndarray:
    """|ε_O| + |ε_F| + sign·k·ε_F; sign = -1 штрафует переоценку bel(F)."""
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"asymmetry k must lie in [0, 1], got {k}")
    if sign not in (1, -1):
        raise ValueError(f"asymmetry sign must be +1 or -1, got {sign}")
    return cell_l1(r) + sign * k * r.eps_f


def certainty_weight(bel_o, bel_f, k: float) -> np.ndarray:
    """w_k = 1 + k·(C − 1), C = bel(O) + bel(F) целевой ячейки."""
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"certainty weight k must lie in [0, 1], got {k}")
    certainty = np.asarray(bel_o, dtype=np.float64) + np.asarray(bel_f, dtype=np.float64)
    return 1.0 + k * (certainty - 1.0)


def weighted_mean(losses: np.ndarray, weights: np.ndarray) -> float:
    losses = np.asarray(losses, dtype=np.float64).reshape(-1)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    total = float(weights.sum())
    if total <= 0.0:
        raise ValueError("weight sum is zero")
    return float(weights @ losses / total)


CellLoss = Union[str, Callable[[CellResiduals], np.ndarray]]

_CELL_LOSSES: Dict[str, Callable[[CellResiduals], np.ndarray]] = {"l1": cell_l1, "l2": cell_l2}


def aggregate_loss(pred: BeliefGrid, target: BeliefGrid, cell_loss: CellLoss = "l1",
                   weight_mode: str = WEIGHT_UNIFORM, k: float = 0.0) -> float:
    """L = Σ w·l / Σ w по всем ячейкам."""
    loss_fn = _CELL_LOSSES[cell_loss] if isinstance(cell_loss, str) else cell_loss
    losses = loss_fn(residuals(pred, target))
    if weight_mode == WEIGHT_UNIFORM:
        weights = np.ones_like(losses)
    elif weight_mode == WEIGHT_CERTAINTY:
        weights = certainty_weight(target.bel_o, target.bel_f, k)
    else:
        raise ValueError(f"unknown weight mode {weight_mode!r}")
    return weighted_mean(losses, weights)


def false_occupied_map(pred: BeliefGrid, target: BeliefGrid) -> np.ndarray:
    _check_aligned(pred, target)
    return np.maximum(0.0, pred.bel_o + target.bel_f - 1.0)


def false_free_map(pred: BeliefGrid, target: BeliefGrid) -> np.ndarray:
    _check_aligned(pred, target)
    return np.maximum(0.0, target.bel_o + pred.bel_f - 1.0)


def false_occupied(pred: BeliefGrid, target: BeliefGrid) -> float:
    return float(np.mean(false_occupied_map(pred, target)))


def false_free(pred: BeliefGrid, target: BeliefGrid) -> float:
    return float(np.mean(false_free_map(pred, target)))


def relative_uncertainty(pred: BeliefGrid, target: BeliefGrid, eps: float = DEFAULT_EPS) -> float:
    """Σ Û / Σ U: отношение сумм, а не среднее отношений."""
    _check_aligned(pred, target)
    target_sum = float(target.uncertainty().sum())
    if target_sum < eps:
        raise ValueError(f"target uncertainty sum {target_sum:.3g} is below {eps}")
    return float(pred.uncertainty().sum()) / target_sum


class MetricReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    l1: float
    l2: float
    asym_l1: float
    rel_unc: float
    false_o: float
    false_f: float
    cells: int
    weight_sum: float
    k: float = 0.0
    asym_k: float = 0.0
    asym_sign: int = 1


def cell_maps(pred: BeliefGrid, target: BeliefGrid) -> Dict[str, np.ndarray]:
    """Поячеечные карты для тепловых изображений."""
    r = residuals(pred, target)
    return {
        "l1": cell_l1(r),
        "l2": cell_l2(r),
        "false_o": false_occupied_map(pred, target),
        "false_f": false_free_map(pred, target),
    }


def evaluate(pred: BeliefGrid, target: BeliefGrid, k: float = 0.0, asym_k: float = 0.0,
             asym_sign: int = 1, eps: float = DEFAULT_EPS,
             weight_mode: Optional[str] = None) -> MetricReport:
    mode = weight_mode or (WEIGHT_CERTAINTY if k > 0 else WEIGHT_UNIFORM)
    weights = (certainty_weight(target.bel_o, target.bel_f, k) if mode == WEIGHT_CERTAINTY
               else np.ones(target.geometry.shape))
    report = MetricReport(
        l1=aggregate_loss(pred, target, "l1", mode, k),
        l2=aggregate_loss(pred, target, "l2", mode, k),
        asym_l1=aggregate_loss(pred, target, partial(asymmetric_l1, k=asym_k, sign=asym_sign), mode, k),
        rel_unc=relative_uncertainty(pred, target, eps),
        false_o=false_occupied(pred, target),
        false_f=false_free(pred, target),
        cells=int(target.bel_o.size),
        weight_sum=float(weights.sum()),
        k=k,
        asym_k=asym_k,
        asym_sign=asym_sign,
    )
    logger.info("Evaluated %d cells: L1=%.6g L2=%.6g RelUnc=%.6g", report.cells, report.l1,
                report.l2, report.rel_unc)
    return report
