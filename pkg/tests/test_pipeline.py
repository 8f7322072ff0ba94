# tests/test_pipeline.py
"""RecordScorer: スコアごとの値・状態・キャッシュ再利用"""
import math
from dataclasses import replace

import numpy as np
import pytest

from backends.toy import ToyBackend, ToyConfig
from scoring.baselines import EMPTY_SAMPLE, draw_samples, eigenscore, semantic_entropy
from scoring.pipeline import RecordScorer, ScoringOptions, derive_seed
from scoring.report import (
    SCORE_REGISTRY,
    STATUS_DEGENERATE,
    STATUS_FAILED,
    STATUS_OK,
    STATUS_UNAVAILABLE,
)
from scoring.vauq import VauqParams
from utils.cache import TraceCache


def _entropy(z):
    p = np.exp(z - z.max())
    p /= p.sum()
    return float(-(p * np.log(p)).sum())


H_FULL = _entropy(np.eye(16)[1] * 4.0)
H_UNIFORM = math.log(16)


def _by_name(result):
    return {row.score_name: row for row in result.rows}


class TestScoreRecord:

    def test_vauq_matches_closed_form(self, toy_backend, toy_record):
        opts = ScoringOptions(params=VauqParams(alpha=0.6, k_percent=25, layer_band=(10, 25)))
        rows = _by_name(RecordScorer(toy_backend, opts).score_record(toy_record, ["entropy", "vauq", "is_core"]))
        assert rows["entropy"].value == pytest.approx(H_FULL)
        # K=25% は根拠パッチ4枚ちょうど → g = 0 で一様分布
        assert rows["vauq"].value == pytest.approx(H_FULL - 0.6 * (H_UNIFORM - H_FULL))
        assert rows["is_core"].value == pytest.approx(-(H_UNIFORM - H_FULL))
        ce = rows["vauq"].condition_entropies
        assert ce["h_masked"]["core"] == pytest.approx(H_UNIFORM)
        assert all(r.status == STATUS_OK for r in rows.values())

    def test_ground_truth_equals_core_when_masks_agree(self, toy_backend, toy_record):
        opts = ScoringOptions(params=VauqParams(k_percent=25))
        rows = _by_name(RecordScorer(toy_backend, opts).score_record(
            toy_record, ["vauq", "vauq_ground_truth", "is_core", "is_ground_truth"]))
        assert rows["vauq"].value == pytest.approx(rows["vauq_ground_truth"].value)
        assert rows["is_core"].value == pytest.approx(rows["is_ground_truth"].value)

    def test_blank_variant(self, toy_backend, toy_record):
        rows = _by_name(RecordScorer(toy_backend).score_record(toy_record, ["vauq_blank", "is_blank"]))
        assert rows["is_blank"].value == pytest.approx(-(H_UNIFORM - H_FULL))
        assert rows["vauq_blank"].blank_mode == "knockout"

    def test_k_zero_gives_entropy(self, toy_backend, toy_record):
        opts = ScoringOptions(params=VauqParams(alpha=2.0, k_percent=0))
        rows = _by_name(RecordScorer(toy_backend, opts).score_record(toy_record, ["entropy", "vauq"]))
        assert rows["vauq"].value == pytest.approx(rows["entropy"].value)
        assert toy_backend.counters.rescores == 1

    def test_every_registered_score_has_a_row(self, toy_backend, toy_record):
        names = list(SCORE_REGISTRY)
        result = RecordScorer(toy_backend).score_record(toy_record, names)
        rows = _by_name(result)
        assert list(rows) == names
        assert rows["vl_uncertainty"].status == STATUS_UNAVAILABLE
        for name in names:
            if name != "vl_uncertainty":
                assert rows[name].status == STATUS_OK, (name, rows[name].error)
                assert math.isfinite(rows[name].value)
            assert rows[name].orientation == "higher_is_hallucinated"
        assert result.errors == []

    def test_missing_evidence_fails_only_that_score(self, toy_backend, toy_record):
        record = replace(toy_record, evidence_regions=[])
        result = RecordScorer(toy_backend).score_record(record, ["entropy", "vauq_ground_truth"])
        rows = _by_name(result)
        assert rows["entropy"].status == STATUS_OK
        assert rows["vauq_ground_truth"].status == STATUS_FAILED
        assert rows["vauq_ground_truth"].value is None
        assert result.errors[0]["error_type"] == "DataError"

    def test_empty_response_is_degenerate(self, toy_record):
        backend = ToyBackend(ToyConfig(eos_token=1))
        record = replace(toy_record, response_tokens=None)
        rows = _by_name(RecordScorer(backend).score_record(record, ["entropy", "vauq", "perplexity"]))
        assert {r.status for r in rows.values()} == {STATUS_DEGENERATE}

    def test_params_hash_changes_with_params(self, toy_backend, toy_record):
        a = RecordScorer(toy_backend, ScoringOptions(params=VauqParams(alpha=0.6)))
        b = RecordScorer(toy_backend, ScoringOptions(params=VauqParams(alpha=0.7)))
        ha = _by_name(a.score_record(toy_record, ["vauq", "entropy"]))
        hb = _by_name(b.score_record(toy_record, ["vauq", "entropy"]))
        assert ha["vauq"].params_hash != hb["vauq"].params_hash
        assert ha["entropy"].params_hash == hb["entropy"].params_hash

    def test_masks_are_recorded(self, toy_backend, toy_record):
        opts = ScoringOptions(params=VauqParams(k_percent=25))
        result = RecordScorer(toy_backend, opts).score_record(toy_record, ["vauq", "vauq_random"])
        kinds = {m["condition"]: m for m in result.masks}
        assert kinds["core"]["indices"] == [0, 1, 4, 5]
        assert len(kinds["random"]["indices"]) == 4


class TestBackendCalls:

    def test_sampling_scores_cost_k_generations(self, toy_backend, toy_record):
        opts = ScoringOptions(n_samples=5)
        RecordScorer(toy_backend, opts).score_record(toy_record, ["semantic_entropy", "eigenscore"])
        assert toy_backend.counters.generations == 5
        assert toy_backend.counters.rescores == 0

    def test_sampling_scores_match_draw_samples(self, toy_record, tmp_path):
        opts = ScoringOptions(n_samples=4, sample_seed=2)
        rows = _by_name(RecordScorer(ToyBackend(), opts, TraceCache(tmp_path / "c"))
                        .score_record(toy_record, ["eigenscore", "semantic_entropy"]))
        direct = draw_samples(ToyBackend(), toy_record.image_ref, toy_record.question, n_samples=4,
                              seed=derive_seed(toy_record.sample_id, 2), embed_layer=16)
        assert rows["eigenscore"].value == pytest.approx(eigenscore(direct))
        assert rows["semantic_entropy"].value == pytest.approx(semantic_entropy(direct))

    def test_empty_samples_are_flagged(self, toy_record):
        # 語彙1が EOS なので大半のサンプルは空応答
        opts = ScoringOptions(n_samples=5)
        rows = _by_name(RecordScorer(ToyBackend(ToyConfig(eos_token=1)), opts)
                        .score_record(toy_record, ["eigenscore", "semantic_entropy"]))
        for row in rows.values():
            assert row.status == STATUS_OK
            assert EMPTY_SAMPLE in row.flags
        clean = _by_name(RecordScorer(ToyBackend(), opts).score_record(toy_record, ["semantic_entropy"]))
        assert clean["semantic_entropy"].flags == []

    def test_sample_seeds_are_per_sample(self):
        assert derive_seed("a", 0) == derive_seed("a", 0)
        assert derive_seed("a", 0) != derive_seed("b", 0)
        assert derive_seed("a", 0) != derive_seed("a", 1)

    def test_warm_cache_makes_no_calls(self, toy_record, tmp_path):
        names = ["entropy", "vauq", "vauq_blank", "verbalized", "semantic_entropy", "contextual_lens"]
        cold = ToyBackend()
        first = RecordScorer(cold, cache=TraceCache(tmp_path / "c")).score_record(toy_record, names)
        assert cold.counters.calls > 0
        warm = ToyBackend()
        cache = TraceCache(tmp_path / "c")
        second = RecordScorer(warm, cache=cache).score_record(toy_record, names)
        assert warm.counters.calls == 0
        assert cache.misses == 0
        assert [r.to_dict() for r in first.rows] == [r.to_dict() for r in second.rows]

    def test_shared_cache_separates_backend_configs(self, toy_record, tmp_path):
        cache = TraceCache(tmp_path / "c")
        first = _by_name(RecordScorer(ToyBackend(ToyConfig(beta_img=4.0)), cache=cache)
                         .score_record(toy_record, ["entropy", "vauq"]))
        assert first["entropy"].value == pytest.approx(H_FULL)
        blind = ToyBackend(ToyConfig(beta_img=0.0))
        second = _by_name(RecordScorer(blind, cache=cache).score_record(toy_record, ["entropy", "vauq"]))
        assert blind.counters.calls > 0
        assert second["entropy"].value == pytest.approx(H_UNIFORM)
        assert second["entropy"].params_hash != first["entropy"].params_hash
        # 遅延だけが違うならキャッシュはそのまま使える
        slow = ToyBackend(ToyConfig(beta_img=4.0, forward_latency=0.001))
        RecordScorer(slow, cache=cache).score_record(toy_record, ["entropy", "vauq"])
        assert slow.counters.calls == 0

    def test_regenerate_ignores_recorded_response(self, toy_backend, toy_record):
        record = replace(toy_record, response_tokens=[7], response="tok7")
        recorded = _by_name(RecordScorer(toy_backend).score_record(record, ["perplexity"]))
        fresh = _by_name(RecordScorer(toy_backend, ScoringOptions(regenerate=True))
                         .score_record(record, ["perplexity"]))
        assert recorded["perplexity"].value > fresh["perplexity"].value
