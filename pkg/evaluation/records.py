# evaluation/records.py
"""
評価データセット（1行1レコードの JSONL）の読み書き。

壊れた行はスキップしてログに残し、全体の10%を超えたら DataError で止める。
同じ sample_id の2行目以降も壊れた行として扱う。
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from backends.base import DataError
from evaluation.judge import ingest_judgments
from utils.logs import get_logger

log = get_logger("records")

SPLITS = ("factual", "counterfactual", "none")
MAX_MALFORMED_RATIO = 0.10


@dataclass
class EvalRecord:
    sample_id: str
    question: str
    image_ref: Any = None
    response: str = ""
    response_tokens: Optional[List[int]] = None
    label: Optional[int] = None
    split: str = "none"
    dataset: str = ""
    evidence_regions: List[Tuple[float, float, float, float]] = field(default_factory=list)
    judgments: List[str] = field(default_factory=list)
    label_reason: str = ""

    @classmethod
    def from_dict(cls, d: Dict[str, Any], dataset: str = "") -> "EvalRecord":
        if not isinstance(d, dict):
            raise DataError("record is not an object")
        sid = d.get("sample_id")
        if not isinstance(sid, str) or not sid:
            raise DataError("missing sample_id")
        question = d.get("question")
        if not isinstance(question, str):
            raise DataError(f"{sid}: missing question")

        split = d.get("split") or "none"
        if split not in SPLITS:
            raise DataError(f"{sid}: unknown split {split!r}")

        tokens = d.get("response_tokens")
        if tokens is not None:
            if not isinstance(tokens, list) or not all(isinstance(t, int) and not isinstance(t, bool) for t in tokens):
                raise DataError(f"{sid}: response_tokens must be a list of integers")

        boxes = []
        for box in d.get("evidence_regions") or []:
            if not isinstance(box, (list, tuple)) or len(box) != 4:
                raise DataError(f"{sid}: evidence box must be [x0, y0, x1, y1]")
            x0, y0, x1, y1 = (float(v) for v in box)
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise DataError(f"{sid}: evidence box out of range {box}")
            boxes.append((x0, y0, x1, y1))

        judgments = [str(j) for j in d.get("judgments") or []]
        label = d.get("label")
        reason = ""
        if label is not None:
            if label not in (0, 1) or isinstance(label, bool):
                raise DataError(f"{sid}: label must be 0, 1 or null")
            label = int(label)
        elif judgments:
            outcome = ingest_judgments(judgments)
            label, reason = outcome.label, outcome.reason
            if outcome.n_malformed:
                log.warning(f"{sid}: {outcome.n_malformed} unparseable judge verdict(s)")

        return cls(
            sample_id=sid,
            question=question,
            image_ref=d.get("image_ref"),
            response=str(d.get("response") or ""),
            response_tokens=tokens,
            label=label,
            split=split,
            dataset=str(d.get("dataset") or dataset),
            evidence_regions=boxes,
            judgments=judgments,
            label_reason=reason,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "question": self.question,
            "image_ref": self.image_ref,
            "response": self.response,
            "response_tokens": self.response_tokens,
            "label": self.label,
            "split": self.split,
            "dataset": self.dataset,
            "evidence_regions": [list(b) for b in self.evidence_regions],
            "judgments": list(self.judgments),
        }


@dataclass
class LoadResult:
    records: List[EvalRecord]
    malformed: List[Tuple[int, str]]
    total_lines: int

    @property
    def malformed_ratio(self) -> float:
        return len(self.malformed) / self.total_lines if self.total_lines else 0.0


def load_records(path, dataset: Optional[str] = None,
                 max_malformed_ratio: float = MAX_MALFORMED_RATIO) -> LoadResult:
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset not found: {p}")
    name = dataset or p.stem
    records: List[EvalRecord] = []
    malformed: List[Tuple[int, str]] = []
    seen = set()
    total = 0
    with open(p, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            total += 1
            try:
                rec = EvalRecord.from_dict(json.loads(line), dataset=name)
                if rec.sample_id in seen:
                    raise DataError(f"duplicate sample_id {rec.sample_id}")
            except (json.JSONDecodeError, DataError, TypeError, ValueError) as e:
                log.warning(f"{p.name}:{lineno} skipped: {e}")
                malformed.append((lineno, str(e)))
                continue
            seen.add(rec.sample_id)
            records.append(rec)

    result = LoadResult(records, malformed, total)
    if total == 0:
        raise DataError(f"dataset is empty: {p}")
    if result.malformed_ratio > max_malformed_ratio:
        raise DataError(f"{len(malformed)}/{total} malformed lines in {p.name} "
                        f"(> {max_malformed_ratio:.0%})")
    log.info(f"loaded {len(records)} records from {p.name} ({len(malformed)} malformed)")
    return result


def write_records(path, records: List[EvalRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True, ensure_ascii=False))
            f.write("\n")
