# scoring/report.py
"""
スコア行（ScoreRow）の定義と入出力。

  scores.jsonl : 1行 = 1 (sample_id, score_name)。キー順固定で決定的に書き出す
  summary.csv  : sample_id ごとに各スコアを列に並べた表
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import pandas as pd

from backends.base import ConfigError, DataError
from utils.cache import canonical_json

ORIENTATION = "higher_is_hallucinated"

STATUS_OK = "ok"
STATUS_DEGENERATE = "degenerate"
STATUS_FAILED = "failed"
STATUS_UNAVAILABLE = "unavailable"


@dataclass(frozen=True)
class ScoreInfo:
    family: str                       # vauq | ablation | single | query | sampling
    conditions: Tuple[str, ...] = ()  # full 以外に必要な再スコア条件
    description: str = ""


SCORE_REGISTRY: Dict[str, ScoreInfo] = {
    "entropy": ScoreInfo("vauq", (), "length-normalized predictive entropy"),
    "vauq": ScoreInfo("vauq", ("core",), "entropy minus alpha times core-masked image information"),
    "vauq_blank": ScoreInfo("ablation", ("blank",), "VAUQ with the whole image knocked out"),
    "vauq_random": ScoreInfo("ablation", ("core", "random"), "VAUQ with a random mask of core size"),
    "vauq_ground_truth": ScoreInfo("ablation", ("ground_truth",), "VAUQ with the evidence region masked"),
    "is_blank": ScoreInfo("ablation", ("blank",), "negated image information, blank"),
    "is_core": ScoreInfo("ablation", ("core",), "negated image information, core mask"),
    "is_random": ScoreInfo("ablation", ("core", "random"), "negated image information, random mask"),
    "is_ground_truth": ScoreInfo("ablation", ("ground_truth",), "negated image information, evidence mask"),
    "perplexity": ScoreInfo("single", (), "exponentiated mean negative log-likelihood"),
    "svar": ScoreInfo("single", (), "negated head-averaged visual attention mass"),
    "contextual_lens": ScoreInfo("single", (), "negated max cosine between text and visual states"),
    "chain_of_embeddings": ScoreInfo("single", (), "layer-wise hidden-state trajectory"),
    "verbalized": ScoreInfo("query", (), "negated self-reported confidence"),
    "eigenscore": ScoreInfo("sampling", (), "log-determinant of sampled-embedding covariance"),
    "semantic_entropy": ScoreInfo("sampling", (), "entropy over meaning clusters of samples"),
    "vl_uncertainty": ScoreInfo("sampling", (), "not implemented"),
}


def check_score_names(names: Iterable[str]) -> List[str]:
    out = []
    for name in names:
        if name not in SCORE_REGISTRY:
            raise ConfigError(f"unknown score: {name} (known: {', '.join(SCORE_REGISTRY)})")
        if name not in out:
            out.append(name)
    return out


def params_hash(params: Dict[str, Any]) -> str:
    return hashlib.sha1(canonical_json(params).encode("utf-8")).hexdigest()[:12]


def _clean(value: Any) -> Any:
    """NaN / inf は null に落とす（JSON として常に読めるように）"""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


@dataclass
class ScoreRow:
    sample_id: str
    score_name: str
    value: Optional[float]
    params_hash: str
    dataset: str = ""
    params: Dict[str, Any] = field(default_factory=dict)
    condition_entropies: Optional[Dict[str, Any]] = None
    status: str = STATUS_OK
    flags: List[str] = field(default_factory=list)
    split: str = "none"
    label: Optional[int] = None
    blank_mode: Optional[str] = None
    error: Optional[str] = None
    orientation: str = ORIENTATION

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["flags"] = list(self.flags)
        return _clean(d)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ScoreRow":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


def write_score_rows(path: Path, rows: Iterable[ScoreRow]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row.to_dict(), sort_keys=True, ensure_ascii=False, allow_nan=False))
            f.write("\n")
            n += 1
    return n


def read_score_rows(path: Path) -> List[ScoreRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(ScoreRow.from_dict(json.loads(line)))
            except (json.JSONDecodeError, TypeError) as e:
                raise DataError(f"{path}:{lineno}: malformed score row: {e}") from e
    return rows


def summary_frame(rows: List[ScoreRow]) -> pd.DataFrame:
    """sample_id × score_name の横持ち表（値が無い行は空欄）"""
    if not rows:
        return pd.DataFrame(columns=["sample_id", "dataset", "split", "label"])
    long = pd.DataFrame([{"sample_id": r.sample_id, "dataset": r.dataset, "split": r.split,
                          "label": r.label, "score_name": r.score_name, "value": r.value}
                         for r in rows])
    order = list(dict.fromkeys(r.score_name for r in rows))
    meta = long.drop_duplicates("sample_id")[["sample_id", "dataset", "split", "label"]]
    wide = long.pivot(index="sample_id", columns="score_name", values="value").reindex(columns=order)
    wide = meta.set_index("sample_id").join(wide).reset_index()
    wide["label"] = wide["label"].astype("Int64")
    return wide


def write_summary(path: Path, rows: List[ScoreRow]) -> None:
    summary_frame(rows).to_csv(path, index=False, float_format="%.12g", lineterminator="\n")


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(_clean(rec), sort_keys=True, ensure_ascii=False, allow_nan=False))
            f.write("\n")
            n += 1
    return n
