# scoring/vauq.py
"""
長さ正規化エントロピー・画像情報スコア(IS)・VAUQ スコア。

向きはライブラリ共通で「大きいほどハルシネーションらしい」。
    s = h_full - alpha * IS_core = (1 + alpha) * h_full - alpha * h_core
IS が負になる（マスクでエントロピーが下がる）場合もそのまま使う。
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from backends.base import (
    ConfigError,
    DegenerateSampleError,
    MissingConditionError,
    StepStats,
)

HALLUCINATED = "hallucinated"
CORRECT = "correct"

# IS を取れる劣化条件
IS_CONDITIONS = ("blank", "core", "random", "ground_truth", "none")


@dataclass(frozen=True)
class ConditionEntropies:
    """同じ応答 y に対する条件別の平均エントロピー（nats）"""
    h_full: float
    h_blank: Optional[float] = None
    h_masked: Dict[str, float] = field(default_factory=dict)
    response_length: int = 0

    def __post_init__(self):
        values = [self.h_full, self.h_blank, *self.h_masked.values()]
        if any(v is not None and v < 0 for v in values):
            raise ValueError("condition entropies must be non-negative")
        object.__setattr__(self, "h_masked", dict(self.h_masked))

    def degraded(self, condition: str) -> float:
        if condition == "blank":
            value = self.h_blank
        elif condition == "none":
            value = self.h_masked.get("none", self.h_full)
        else:
            value = self.h_masked.get(condition)
        if value is None:
            raise MissingConditionError(f"entropy for condition '{condition}' was not computed")
        return value

    def to_dict(self) -> Dict[str, object]:
        return {"h_full": self.h_full, "h_blank": self.h_blank,
                "h_masked": dict(sorted(self.h_masked.items())),
                "response_length": self.response_length}


@dataclass(frozen=True)
class VauqParams:
    alpha: float = 0.6
    k_percent: float = 60
    layer_band: Tuple[int, int] = (10, 25)

    def __post_init__(self):
        object.__setattr__(self, "layer_band", (int(self.layer_band[0]), int(self.layer_band[1])))
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 <= self.k_percent <= 100:
            raise ConfigError(f"k_percent must be in [0, 100], got {self.k_percent}")
        if self.layer_band[0] > self.layer_band[1]:
            raise ConfigError(f"invalid layer band {self.layer_band}")

    def to_dict(self) -> Dict[str, object]:
        return {"alpha": self.alpha, "k_percent": self.k_percent, "layer_band": list(self.layer_band)}


def mean_entropy(steps) -> float:
    """StepStats 列またはエントロピー配列の平均"""
    values = [s.entropy if isinstance(s, StepStats) else float(s) for s in steps]
    if not values:
        raise DegenerateSampleError("mean entropy of an empty response")
    return float(np.mean(values))


def image_information_score(ce: ConditionEntropies, condition: str) -> float:
    if condition not in IS_CONDITIONS:
        raise ConfigError(f"unknown IS condition: {condition}")
    return ce.degraded(condition) - ce.h_full


def vauq_score(ce: ConditionEntropies, params: VauqParams, condition: str = "core") -> float:
    """condition を変えると比較用の変種（blank / random / ground_truth）になる"""
    return ce.h_full - params.alpha * image_information_score(ce, condition)


def vauq_score_expanded(ce: ConditionEntropies, params: VauqParams, condition: str = "core") -> float:
    return (1.0 + params.alpha) * ce.h_full - params.alpha * ce.degraded(condition)


def threshold_decision(s: float, tau: float) -> str:
    return HALLUCINATED if s >= tau else CORRECT


def vauq_surface(h_full: np.ndarray, h_core: np.ndarray, alphas: Sequence[float]) -> np.ndarray:
    """alpha ごとのスコア行列 [len(alphas), n]。alpha の変更で再計算は発生しない"""
    h_full = np.asarray(h_full, dtype=np.float64)
    is_core = np.asarray(h_core, dtype=np.float64) - h_full
    a = np.asarray(alphas, dtype=np.float64)[:, None]
    return h_full[None, :] - a * is_core[None, :]
