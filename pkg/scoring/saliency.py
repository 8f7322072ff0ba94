# scoring/saliency.py
"""
生成トークン → 視覚トークンの注意を層帯で集計し、knockout 用のマスクを作る。

  aggregate_attention      : 層帯 × ヘッド × 生成トークンの単純和（平均はとらない）
  top_k_mask               : 上位 K% の視覚トークン（core）
  random_mask              : 同じ枚数の一様ランダム（比較用）
  ground_truth_mask        : 根拠ボックスに中心が入るパッチ
  evidence_attention_ratio : 根拠領域の内側/外側の1パッチあたり平均重み
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from backends.base import (
    DataError,
    GenerationTrace,
    LayerRangeError,
    MaskError,
    MaskKind,
    MaskSpec,
    VisualLayout,
)

SUSPICIOUS_EMPTY = "suspicious_empty_ground_truth"


@dataclass(frozen=True)
class SaliencyMap:
    weights: np.ndarray
    layer_band: Tuple[int, int]
    n_generated: int

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True).reshape(-1)
        if np.any(w < 0):
            raise ValueError("saliency weights must be non-negative")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "layer_band", (int(self.layer_band[0]), int(self.layer_band[1])))

    @property
    def n_tokens(self) -> int:
        return int(len(self.weights))


def _band_layers(trace: GenerationTrace, layer_band: Tuple[int, int]) -> List[int]:
    l_s, l_e = int(layer_band[0]), int(layer_band[1])
    if l_s > l_e or l_s < 0 or l_e >= trace.n_layers:
        raise LayerRangeError(f"invalid layer band {layer_band} for a {trace.n_layers}-layer model")
    return list(range(l_s, l_e + 1))


def aggregate_attention(trace: GenerationTrace, layer_band: Tuple[int, int]) -> SaliencyMap:
    if trace.condition != "full":
        raise MaskError(f"saliency must come from the full-image trace, got condition={trace.condition}")
    pos = trace.attention_positions(_band_layers(trace, layer_band))
    # [La, H, M, N] → 層・ヘッド・生成トークン方向に和
    weights = trace.attention[pos].astype(np.float64).sum(axis=(0, 1, 2))
    return SaliencyMap(weights, layer_band, trace.length)


def mask_cardinality(k_percent: float, n_tokens: int) -> int:
    if not 0 <= k_percent <= 100:
        raise MaskError(f"k_percent must be in [0, 100], got {k_percent}")
    if float(k_percent).is_integer():
        return (int(k_percent) * n_tokens) // 100
    return int(np.floor(k_percent * n_tokens / 100.0))


def top_k_mask(saliency: SaliencyMap, k_percent: float) -> MaskSpec:
    n = saliency.n_tokens
    k = mask_cardinality(k_percent, n)
    # 重みの降順、同値は番号の小さい方を優先
    order = np.lexsort((np.arange(n), -saliency.weights))
    return MaskSpec.from_indices(MaskKind.CORE, order[:k].tolist(), n)


def random_mask(n_tokens: int, cardinality: int, seed: int) -> MaskSpec:
    if not 0 <= cardinality <= n_tokens:
        raise MaskError(f"cardinality {cardinality} outside [0, {n_tokens}]")
    rng = np.random.default_rng(seed)
    picked = rng.choice(n_tokens, size=cardinality, replace=False) if cardinality else []
    return MaskSpec.from_indices(MaskKind.RANDOM, list(picked), n_tokens)


def ground_truth_mask(layout: VisualLayout) -> MaskSpec:
    if not layout.evidence_regions:
        raise DataError("ground-truth mask requested but the sample has no evidence regions")
    indices = layout.evidence_patch_indices()
    if not indices:
        return MaskSpec(MaskKind.NONE, (), layout.n_tokens, (SUSPICIOUS_EMPTY,))
    return MaskSpec.from_indices(MaskKind.GROUND_TRUTH, indices, layout.n_tokens)


def _region_means(weights: np.ndarray, layout: VisualLayout) -> Tuple[float, float]:
    if not layout.evidence_regions:
        raise DataError("evidence_attention_ratio needs evidence regions")
    inside = np.zeros(layout.n_tokens, dtype=bool)
    inside[layout.evidence_patch_indices()] = True
    n_in = int(inside.sum())
    if n_in == 0 or n_in == layout.n_tokens:
        raise DataError(f"evidence split has an empty region ({n_in}/{layout.n_tokens} patches inside)")
    return float(weights[inside].mean()), float(weights[~inside].mean())


def evidence_attention_ratio(saliency: SaliencyMap, layout: VisualLayout) -> Tuple[float, float]:
    if saliency.n_tokens != layout.n_tokens:
        raise MaskError("saliency map and layout disagree on the number of visual tokens")
    return _region_means(saliency.weights, layout)


def layer_ratio_curve(trace: GenerationTrace, layout: VisualLayout) -> List[Dict[str, Any]]:
    """書き出されている各層について根拠領域の内外比を1行ずつ返す"""
    if trace.attention is None:
        raise LayerRangeError("trace carries no attention")
    rows = []
    for a, layer in enumerate(trace.attention_layers):
        w = trace.attention[a].astype(np.float64).sum(axis=(0, 1))
        inside, outside = _region_means(w, layout)
        ratio = inside / outside if outside > 0 else float("inf")
        rows.append({"layer": layer, "inside": inside, "outside": outside, "ratio": ratio})
    return rows


def mask_overlay(mask: MaskSpec, grid: Tuple[int, int]) -> List[List[int]]:
    """外部描画用の 0/1 グリッド（1 = knockout）"""
    rows, cols = grid
    if rows * cols != mask.n_tokens:
        raise MaskError(f"grid {grid} does not match mask over {mask.n_tokens} tokens")
    cells = np.zeros(mask.n_tokens, dtype=int)
    cells[list(mask.indices)] = 1
    return cells.reshape(rows, cols).tolist()


def mask_record(sample_id: str, mask: MaskSpec, k_percent: Optional[float],
                grid: Tuple[int, int]) -> Dict[str, Any]:
    return {
        "sample_id": sample_id,
        "kind": mask.kind.value,
        "k_percent": k_percent,
        "indices": list(mask.indices),
        "grid": list(grid),
        "flags": list(mask.flags),
        "overlay": mask_overlay(mask, grid),
    }
