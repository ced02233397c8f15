"""Алгебра свидетельств на Θ = {O, F}: элементарные свидетельства сенсора,
комбинирование по правилу Ягера и проекция столбца вокселей в 2D-убеждения.

Масса пустого множества всегда 0; конфликт уходит в Θ (без перенормировки).

Счётчики отражений m и прохождений n хранятся целыми, массы считаются по замкнутой
формуле. Последовательное комбинирование по Ягеру не ассоциативно: чередование
отражений и прохождений даёт другие массы, чем группировка. Замкнутая формула
фиксирует группировку «сначала однородные группы, затем одно комбинирование»,
поэтому результат не зависит от порядка вставки сканов.
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

MASS_TOLERANCE = 1e-12


class SensorEvidenceConfig(BaseModel):
    """Элементарные свидетельства отражения (R) и прохождения (T)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    e_r_o: float = 0.4
    e_r_theta: float = 0.6
    e_t_f: float = 0.1
    e_t_theta: float = 0.9

    @model_validator(mode="after")
    def _sums_to_one(self):
        for name in ("e_r_o", "e_r_theta", "e_t_f", "e_t_theta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if abs(self.e_r_o + self.e_r_theta - 1.0) > MASS_TOLERANCE:
            raise ValueError("e_r_o + e_r_theta must equal 1")
        if abs(self.e_t_f + self.e_t_theta - 1.0) > MASS_TOLERANCE:
            raise ValueError("e_t_f + e_t_theta must equal 1")
        return self


@dataclass(frozen=True)
class EvidenceMass:
    m_o: float
    m_f: float
    m_theta: float

    def __post_init__(self):
        for name in ("m_o", "m_f", "m_theta"):
            value = float(getattr(self, name))
            if value < -MASS_TOLERANCE or value > 1.0 + MASS_TOLERANCE:
                raise ValueError(f"{name}={value} outside [0, 1]")
            object.__setattr__(self, name, min(max(value, 0.0), 1.0))
        if abs(self.m_o + self.m_f + self.m_theta - 1.0) > MASS_TOLERANCE:
            raise ValueError(f"masses must sum to 1: {self.m_o} + {self.m_f} + {self.m_theta}")

    @classmethod
    def from_of(cls, m_o: float, m_f: float) -> "EvidenceMass":
        return cls(m_o, m_f, 1.0 - m_o - m_f)

    @classmethod
    def vacuous(cls) -> "EvidenceMass":
        return cls(0.0, 0.0, 1.0)

    @property
    def pl_o(self) -> float:
        return 1.0 - self.m_f

    @property
    def pl_f(self) -> float:
        return 1.0 - self.m_o

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.m_o, self.m_f, self.m_theta


@dataclass(frozen=True)
class VoxelCounts:
    m: int = 0
    n: int = 0

    def __post_init__(self):
        if self.m < 0 or self.n < 0:
            raise ValueError(f"voxel counts must be non-negative, got m={self.m}, n={self.n}")


def combine_counts_array(m: np.ndarray, n: np.ndarray, cfg: SensorEvidenceConfig
                         ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Векторная замкнутая формула: (m_O, m_F, m_Θ) для массивов счётчиков."""
    r_theta = np.power(cfg.e_r_theta, np.asarray(m, dtype=np.float64))
    t_theta = np.power(cfg.e_t_theta, np.asarray(n, dtype=np.float64))
    m_o = (1.0 - r_theta) * t_theta
    m_f = (1.0 - t_theta) * r_theta
    return m_o, m_f, 1.0 - m_o - m_f


def combine_counts(counts: VoxelCounts, cfg: SensorEvidenceConfig = SensorEvidenceConfig()) -> EvidenceMass:
    m_o, m_f, m_theta = combine_counts_array(counts.m, counts.n, cfg)
    return EvidenceMass(float(m_o), float(m_f), float(m_theta))


def yager_combine_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Правило Ягера по строкам (m_O, m_F, m_Θ); масса конфликта уходит в m_Θ."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a_o, a_f, a_t = a[..., 0], a[..., 1], a[..., 2]
    b_o, b_f, b_t = b[..., 0], b[..., 1], b[..., 2]
    conflict = a_o * b_f + a_f * b_o
    m_o = a_o * b_o + a_o * b_t + a_t * b_o
    m_f = a_f * b_f + a_f * b_t + a_t * b_f
    return np.stack([m_o, m_f, a_t * b_t + conflict], axis=-1)


def yager_combine(a: EvidenceMass, b: EvidenceMass) -> EvidenceMass:
    return EvidenceMass(*yager_combine_array(a.as_tuple(), b.as_tuple()).tolist())


def project_pillar(voxels: Sequence[EvidenceMass]) -> Tuple[float, float]:
    """(bel_O, bel_F) столбца: ИЛИ по занятости, И по свободности."""
    if len(voxels) == 0:
        raise ValueError("cannot project an empty pillar")
    m_o = np.array([v.m_o for v in voxels])
    m_f = np.array([v.m_f for v in voxels])
    bel_o = 1.0 - float(np.prod(1.0 - m_o))
    bel_f = float(np.prod(m_f))
    return bel_o, bel_f


def project_pillars(groups: np.ndarray, m_o: np.ndarray, m_f: np.ndarray
                    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Групповая проекция: groups — отсортированные по неубыванию ключи столбцов.

    Возвращает (уникальные ключи, bel_O, bel_F); порядок произведений внутри столбца
    совпадает с порядком входа, так что результат детерминирован.
    """
    if len(groups) == 0:
        empty = np.zeros(0)
        return np.zeros(0, dtype=np.asarray(groups).dtype), empty, empty
    starts = np.flatnonzero(np.r_[True, groups[1:] != groups[:-1]])
    bel_o = 1.0 - np.multiply.reduceat(1.0 - m_o, starts)
    bel_f = np.multiply.reduceat(m_f, starts)
    return groups[starts], bel_o, bel_f
