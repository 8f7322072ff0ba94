# tests/test_judge_records.py
import itertools
import json

import pytest

from backends.base import DataError
from evaluation.judge import LABEL_CORRECT, LABEL_HALLUCINATED, ingest_judgments
from evaluation.records import EvalRecord, load_records, write_records
from utils.parser import normalize_answer, parse_confidence, parse_verdict


class TestParser:

    @pytest.mark.parametrize("text, verdict", [
        ("Correct", "Correct"),
        (" wrong. ", "Wrong"),
        ("The answer is incorrect", "Wrong"),
        ("CORRECT!", "Correct"),
        ("Correct or Wrong", None),
        ("maybe", None),
        (None, None),
    ])
    def test_verdict(self, text, verdict):
        assert parse_verdict(text) == verdict

    @pytest.mark.parametrize("text, value", [
        ("100", 100), ("I'd say 75.5", 75), ("１０", 10), ("999 or 60", 60), ("sure", None),
    ])
    def test_confidence(self, text, value):
        assert parse_confidence(text) == value

    def test_normalize_answer(self):
        assert normalize_answer("  The  Red, car! ") == "red car"
        assert normalize_answer(None) == ""


class TestJudge:

    def test_majority(self):
        out = ingest_judgments(["Correct", "Wrong", "correct"])
        assert out.label == LABEL_CORRECT
        assert out.reason == "majority"
        out = ingest_judgments(["Wrong", "Wrong", "Correct"])
        assert out.label == LABEL_HALLUCINATED

    def test_tie_is_unlabeled(self):
        out = ingest_judgments(["Correct", "Wrong"])
        assert out.label is None
        assert out.reason == "tie"

    def test_malformed_verdicts_are_counted(self):
        out = ingest_judgments(["???", "Wrong", "n/a"])
        assert out.label == LABEL_HALLUCINATED
        assert out.n_malformed == 2
        empty = ingest_judgments(["???"])
        assert not empty.labeled
        assert empty.reason == "no parseable verdict"

    @pytest.mark.parametrize("verdicts", [
        ["Correct", "Wrong", "correct"],
        ["Wrong", "???", "Wrong", "Correct"],
        ["Correct", "Wrong"],
        ["n/a", "maybe"],
    ])
    def test_order_does_not_matter(self, verdicts):
        first = ingest_judgments(verdicts)
        for perm in itertools.permutations(verdicts):
            assert ingest_judgments(list(perm)) == first


def _line(sid, **kw):
    d = {"sample_id": sid, "question": "q?", "response": "a", "label": 0}
    d.update(kw)
    return json.dumps(d)


class TestRecords:

    def test_from_dict_uses_judgments_when_unlabeled(self):
        rec = EvalRecord.from_dict({"sample_id": "x", "question": "q", "judgments": ["Wrong", "Wrong"]})
        assert rec.label == 1
        assert rec.label_reason == "majority"
        assert rec.split == "none"

    def test_explicit_label_wins(self):
        rec = EvalRecord.from_dict({"sample_id": "x", "question": "q", "label": 0, "judgments": ["Wrong"]})
        assert rec.label == 0

    @pytest.mark.parametrize("bad", [
        {"question": "q"},
        {"sample_id": "x"},
        {"sample_id": "x", "question": "q", "label": 2},
        {"sample_id": "x", "question": "q", "split": "other"},
        {"sample_id": "x", "question": "q", "response_tokens": [1, "2"]},
        {"sample_id": "x", "question": "q", "evidence_regions": [[0.5, 0.1, 0.2, 0.9]]},
    ])
    def test_invalid_records(self, bad):
        with pytest.raises(DataError):
            EvalRecord.from_dict(bad)

    def test_load_skips_malformed_below_threshold(self, tmp_path):
        lines = [_line(f"s{i:02d}") for i in range(19)] + ["{not json"]
        path = tmp_path / "data.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        res = load_records(path)
        assert len(res.records) == 19
        assert res.malformed[0][0] == 20
        assert res.records[0].dataset == "data"

    def test_duplicates_count_as_malformed(self, tmp_path):
        lines = [_line(f"s{i:02d}") for i in range(19)] + [_line("s00")]
        path = tmp_path / "dup.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        res = load_records(path)
        assert len(res.records) == 19
        assert "duplicate" in res.malformed[0][1]

    def test_too_many_malformed(self, tmp_path):
        lines = [_line(f"s{i:02d}") for i in range(17)] + ["{", "[]", "null"]
        path = tmp_path / "bad.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(DataError):
            load_records(path)

    def test_empty_and_missing(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("\n", encoding="utf-8")
        with pytest.raises(DataError):
            load_records(path)
        with pytest.raises(DataError):
            load_records(tmp_path / "nope.jsonl")

    def test_write_then_load(self, tmp_path, toy_record):
        path = tmp_path / "out.jsonl"
        write_records(path, [toy_record])
        (loaded,) = load_records(path).records
        assert loaded.sample_id == toy_record.sample_id
        assert loaded.evidence_regions == toy_record.evidence_regions
        assert loaded.response_tokens == [1]
