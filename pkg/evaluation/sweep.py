# evaluation/sweep.py
"""
(alpha, K, 層帯) のグリッド探索と、データセット間のハイパーパラメータ転移。

条件別エントロピーは RecordScorer のメモとトレースキャッシュから取るので、
alpha を変えても再計算は起きない。K と層帯が変わるとマスクが変わり、
同じマスクにならない限り再スコアが1回ずつ走る。
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from backends.base import ConfigError, InsufficientDataError, VauqError
from evaluation.metrics import auroc, auroc_or_nan
from evaluation.records import EvalRecord
from scoring.pipeline import RecordScorer
from scoring.vauq import VauqParams, vauq_surface
from utils.logs import get_logger, progress_enabled

log = get_logger("sweep")

MIN_LABELED = 20
SURFACE_COLUMNS = ["alpha", "k", "band", "split", "auroc", "seed"]

Band = Tuple[int, int]


def _default_alphas() -> Tuple[float, ...]:
    return tuple(round(0.1 * i, 10) for i in range(51))


@dataclass(frozen=True)
class SweepGrid:
    alphas: Tuple[float, ...] = field(default_factory=_default_alphas)
    ks: Tuple[float, ...] = tuple(range(0, 101, 10))
    bands: Tuple[Band, ...] = ((10, 25),)
    val_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        object.__setattr__(self, "ks", tuple(self.ks))
        object.__setattr__(self, "bands", tuple((int(b[0]), int(b[1])) for b in self.bands))
        if not self.alphas or not self.ks or not self.bands:
            raise ConfigError("sweep grids must be nonempty")
        if any(a < 0 for a in self.alphas):
            raise ConfigError("alphas must be >= 0")
        if any(not 0 <= k <= 100 for k in self.ks):
            raise ConfigError("ks must be in [0, 100]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in (0, 1)")

    @classmethod
    def from_settings(cls, settings) -> "SweepGrid":
        return cls(tuple(settings.alphas), tuple(settings.ks), tuple(tuple(b) for b in settings.bands),
                   settings.val_fraction)


def band_label(band: Band) -> str:
    return f"{band[0]}-{band[1]}"


# ============================================================
# 分割
# ============================================================
def stratified_split(labels: Sequence[int], fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """ラベルごとに fraction を validation へ。各クラスとも両側に最低1件残す"""
    y = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    val, test = [], []
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if len(idx) < 2:
            raise InsufficientDataError(f"class {cls} has {len(idx)} labeled sample(s); need >= 2 to split")
        idx = rng.permutation(idx)
        n_val = int(round(fraction * len(idx)))
        n_val = min(max(n_val, 1), len(idx) - 1)
        val.extend(idx[:n_val].tolist())
        test.extend(idx[n_val:].tolist())
    return np.array(sorted(val), dtype=int), np.array(sorted(test), dtype=int)


# ============================================================
# 条件別エントロピーの表
# ============================================================
@dataclass
class EntropyTable:
    sample_ids: List[str]
    labels: np.ndarray
    splits: List[str]
    h_full: np.ndarray
    h_core: Dict[Tuple[float, Band], np.ndarray]
    excluded: Dict[str, str]


def collect_entropies(records: Sequence[EvalRecord], scorer: RecordScorer, ks: Sequence[float],
                      bands: Sequence[Band], desc: str = "entropies") -> EntropyTable:
    labeled = [r for r in records if r.label in (0, 1)]
    if len(labeled) < MIN_LABELED:
        raise InsufficientDataError(f"{len(labeled)} labeled samples; sweeps need at least {MIN_LABELED}")
    ids, labels, splits, h_full = [], [], [], []
    h_core: Dict[Tuple[float, Band], List[float]] = {(k, b): [] for b in bands for k in ks}
    excluded: Dict[str, str] = {}
    for rec in tqdm(labeled, desc=desc, disable=not progress_enabled()):
        try:
            hf = scorer.condition_entropy(rec, "full")
            row = {key: scorer.condition_entropy(rec, "core", key[0], key[1]) for key in h_core}
        except VauqError as e:
            excluded[rec.sample_id] = str(e)
            log.warning(f"{rec.sample_id} excluded from sweep: {e}")
            continue
        ids.append(rec.sample_id)
        labels.append(rec.label)
        splits.append(rec.split)
        h_full.append(hf)
        for key, value in row.items():
            h_core[key].append(value)
    if len(ids) < MIN_LABELED:
        raise InsufficientDataError(f"only {len(ids)} usable labeled samples after exclusions")
    return EntropyTable(ids, np.array(labels, dtype=int), splits, np.array(h_full),
                        {key: np.array(v) for key, v in h_core.items()}, excluded)


# ============================================================
# スイープ
# ============================================================
@dataclass
class SweepResult:
    best: VauqParams
    best_val_auroc: float
    test_auroc: float
    surface: pd.DataFrame
    seed: int
    n_val: int
    n_test: int
    n_excluded: int
    test_index: np.ndarray

    def best_row(self) -> Dict[str, object]:
        return {"alpha": self.best.alpha, "k": self.best.k_percent, "band": band_label(self.best.layer_band),
                "val_auroc": self.best_val_auroc, "test_auroc": self.test_auroc, "seed": self.seed,
                "n_val": self.n_val, "n_test": self.n_test, "n_excluded": self.n_excluded}


def sweep_table(table: EntropyTable, grid: SweepGrid, seed: int = 0) -> SweepResult:
    val, test = stratified_split(table.labels, grid.val_fraction, seed)
    y_val, y_test = table.labels[val], table.labels[test]
    rows = []
    best_key = None
    best = None
    for b_idx, band in enumerate(grid.bands):
        for k in grid.ks:
            scores = vauq_surface(table.h_full, table.h_core[(k, band)], grid.alphas)
            for a_idx, alpha in enumerate(grid.alphas):
                v = auroc(scores[a_idx, val], y_val)
                t = auroc(scores[a_idx, test], y_test)
                rows.append({"alpha": alpha, "k": k, "band": band_label(band), "split": "validation",
                             "auroc": v, "seed": seed})
                rows.append({"alpha": alpha, "k": k, "band": band_label(band), "split": "test",
                             "auroc": t, "seed": seed})
                # 同点は alpha が小さい方 → K が小さい方 → 層帯の並び順
                key = (-v, alpha, k, b_idx)
                if best_key is None or key < best_key:
                    best_key, best = key, (alpha, k, band, v, t)
    alpha, k, band, v, t = best
    surface = pd.DataFrame(rows, columns=SURFACE_COLUMNS)
    log.info(f"seed={seed} best alpha={alpha} K={k} band={band_label(band)} val={v:.4f} test={t:.4f}")
    return SweepResult(VauqParams(alpha, k, band), v, t, surface, seed, len(val), len(test),
                       len(table.excluded), test)


def sweep(records: Sequence[EvalRecord], scorer: RecordScorer, grid: SweepGrid, seed: int = 0) -> SweepResult:
    table = collect_entropies(records, scorer, grid.ks, grid.bands)
    return sweep_table(table, grid, seed)


# ============================================================
# 転移
# ============================================================
@dataclass
class TransferResult:
    source: str
    target: str
    params: VauqParams
    source_val_auroc: float
    transferred_auroc: float
    target_tuned_auroc: float
    seed: int

    @property
    def gap(self) -> float:
        return self.target_tuned_auroc - self.transferred_auroc

    def to_row(self) -> Dict[str, object]:
        return {"source": self.source, "target": self.target, "alpha": self.params.alpha,
                "k": self.params.k_percent, "band": band_label(self.params.layer_band),
                "source_val_auroc": self.source_val_auroc, "transferred_auroc": self.transferred_auroc,
                "target_tuned_auroc": self.target_tuned_auroc, "gap": self.gap, "seed": self.seed}


def transfer_tables(source: EntropyTable, target: EntropyTable, grid: SweepGrid, seed: int = 0,
                    source_name: str = "source", target_name: str = "target") -> TransferResult:
    src = sweep_table(source, grid, seed)
    tgt = sweep_table(target, grid, seed)
    p = src.best
    scores = vauq_surface(target.h_full, target.h_core[(p.k_percent, p.layer_band)], [p.alpha])[0]
    transferred = auroc(scores[tgt.test_index], target.labels[tgt.test_index])
    return TransferResult(source_name, target_name, p, src.best_val_auroc, transferred, tgt.test_auroc, seed)


def transfer(source_records: Sequence[EvalRecord], target_records: Sequence[EvalRecord],
             scorer: RecordScorer, grid: SweepGrid, seed: int = 0,
             target_scorer: Optional[RecordScorer] = None,
             source_name: str = "source", target_name: str = "target") -> TransferResult:
    src_table = collect_entropies(source_records, scorer, grid.ks, grid.bands, desc=source_name)
    tgt_table = collect_entropies(target_records, target_scorer or scorer, grid.ks, grid.bands, desc=target_name)
    return transfer_tables(src_table, tgt_table, grid, seed, source_name, target_name)


# ============================================================
# 成分分析（エントロピー / IS_core / VAUQ を分割ごとに）
# ============================================================
def component_analysis(table: EntropyTable, params: VauqParams) -> pd.DataFrame:
    h_core = table.h_core.get((params.k_percent, params.layer_band))
    if h_core is None:
        raise ConfigError(f"entropies for K={params.k_percent}, band={params.layer_band} were not collected")
    neg_is = -(h_core - table.h_full)
    vauq = vauq_surface(table.h_full, h_core, [params.alpha])[0]
    splits = np.array(table.splits)
    rows = []
    for name in ("factual", "counterfactual", "all"):
        sel = np.ones(len(splits), dtype=bool) if name == "all" else splits == name
        if not sel.any():
            continue
        y = table.labels[sel]
        rows.append({
            "split": name,
            "n": int(sel.sum()),
            "n_pos": int(y.sum()),
            "entropy": auroc_or_nan(table.h_full[sel], y),
            "is_core": auroc_or_nan(neg_is[sel], y),
            "vauq": auroc_or_nan(vauq[sel], y),
            "alpha": params.alpha,
            "k": params.k_percent,
            "band": band_label(params.layer_band),
        })
    return pd.DataFrame(rows)
