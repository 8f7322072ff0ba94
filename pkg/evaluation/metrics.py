# evaluation/metrics.py
"""順位ベース（Mann-Whitney）の AUROC。正例 = 1（ハルシネーション）、同順位は中間順位"""
import math
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from backends.base import DataError


class SingleClassError(DataError):
    """片方のクラスしかないと AUROC は定義できない"""


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if len(s) != len(y):
        raise DataError(f"{len(s)} scores but {len(y)} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise DataError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    y = y.astype(int)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassError(f"AUROC needs both classes (positives={n_pos}, negatives={n_neg})")
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_or_nan(scores: Sequence[float], labels: Sequence[int]) -> float:
    try:
        return auroc(scores, labels)
    except SingleClassError:
        return float("nan")


def score_auroc(rows, score_name: str, split: Optional[str] = None,
                sample_ids: Optional[set] = None) -> Dict[str, object]:
    """
    ScoreRow 群から1スコアの AUROC を出す。status != ok・ラベル無し・非有限値は除外して数える。
    """
    values: List[float] = []
    labels: List[int] = []
    excluded = 0
    nonfinite = 0
    for row in rows:
        if row.score_name != score_name:
            continue
        if split is not None and row.split != split:
            continue
        if sample_ids is not None and row.sample_id not in sample_ids:
            continue
        if row.status != "ok" or row.value is None or row.label not in (0, 1):
            excluded += 1
            continue
        if not math.isfinite(row.value):
            nonfinite += 1
            excluded += 1
            continue
        values.append(row.value)
        labels.append(row.label)
    return {
        "score": score_name,
        "auroc": auroc_or_nan(values, labels) if values else float("nan"),
        "n": len(values),
        "n_pos": int(sum(labels)),
        "n_excluded": excluded,
        "n_nonfinite": nonfinite,
    }
