# evaluation/timing.py
"""
スコアごとの1サンプルあたり実行時間と、バックエンド呼び出し回数。

キャッシュを使わず毎回生成からやり直す（regenerate=True）。
壁時計はハードウェアで変わるので、生成・再スコア・問い合わせ・forward の回数も並べて出す。
"""
from __future__ import annotations

import time
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from backends.base import Backend, counter_delta
from evaluation.records import EvalRecord
from scoring.pipeline import RecordScorer, ScoringOptions
from utils.logs import get_logger

log = get_logger("timing")

TIMING_COLUMNS = ["score", "n", "mean_s", "std_s", "generations", "rescores", "queries", "forward_passes"]


def time_score(backend: Backend, records: Sequence[EvalRecord], score_name: str,
               options: Optional[ScoringOptions] = None) -> Dict[str, object]:
    opts = replace(options or ScoringOptions(), regenerate=True)
    walls: List[float] = []
    passes: Dict[str, List[int]] = {k: [] for k in ("generations", "rescores", "queries", "forward_passes")}
    for rec in records:
        # レコードごとに新しい scorer（中間結果を持ち越さない）
        scorer = RecordScorer(backend, opts, cache=None)
        before = backend.counters.snapshot()
        t0 = time.perf_counter()
        scorer.score_record(rec, [score_name])
        walls.append(time.perf_counter() - t0)
        delta = counter_delta(before, backend.counters.snapshot())
        for k in passes:
            passes[k].append(delta[k])
    row: Dict[str, object] = {
        "score": score_name,
        "n": len(walls),
        "mean_s": float(np.mean(walls)) if walls else float("nan"),
        "std_s": float(np.std(walls)) if walls else float("nan"),
    }
    for k, values in passes.items():
        row[k] = float(np.mean(values)) if values else float("nan")
    return row


def timing_report(backend: Backend, records: Sequence[EvalRecord], score_names: Sequence[str],
                  options: Optional[ScoringOptions] = None) -> pd.DataFrame:
    rows = []
    for name in score_names:
        row = time_score(backend, records, name, options)
        log.info(f"{name}: {row['mean_s']:.4f}s/sample generations={row['generations']} "
                 f"rescores={row['rescores']} queries={row['queries']}")
        rows.append(row)
    return pd.DataFrame(rows, columns=TIMING_COLUMNS)
