# tests/test_saliency.py
"""注意の集計・マスク生成・根拠領域の注意比"""
import math
from fractions import Fraction

import numpy as np
import pytest

from backends.base import (
    DataError,
    Decoding,
    LayerRangeError,
    MaskError,
    MaskKind,
    MaskSpec,
    VisualLayout,
)
from scoring.saliency import (
    SUSPICIOUS_EMPTY,
    SaliencyMap,
    aggregate_attention,
    evidence_attention_ratio,
    ground_truth_mask,
    layer_ratio_curve,
    mask_cardinality,
    mask_overlay,
    mask_record,
    random_mask,
    top_k_mask,
)


@pytest.fixture
def full_trace(toy_backend):
    return toy_backend.generate(None, "q", Decoding.greedy(), 1)


@pytest.fixture
def layout():
    return VisualLayout(16, (4, 4), ((0.0, 0.0, 0.5, 0.5),))


class TestAggregate:

    def test_plain_sum_over_band_heads_tokens(self, full_trace):
        sal = aggregate_attention(full_trace, (10, 25))
        # 16 層 × 4 ヘッド × 1 トークン
        np.testing.assert_allclose(sal.weights[[0, 1, 4, 5]], 64 * 0.5 * 0.9 / 4, rtol=1e-6)
        np.testing.assert_allclose(sal.weights[2], 64 * 0.5 * 0.1 / 12, rtol=1e-6)
        assert sal.n_tokens == 16
        assert sal.n_generated == 1

    def test_sum_scales_with_response_length(self, toy_backend):
        one = toy_backend.rescore(None, "q", [1], MaskSpec.none(16))
        three = toy_backend.rescore(None, "q", [1, 1, 1], MaskSpec.none(16))
        np.testing.assert_allclose(aggregate_attention(three, (10, 25)).weights,
                                   3 * aggregate_attention(one, (10, 25)).weights, rtol=1e-6)

    def test_requires_full_condition(self, toy_backend):
        masked = toy_backend.rescore(None, "q", [1], MaskSpec(MaskKind.CORE, (0,), 16))
        with pytest.raises(MaskError):
            aggregate_attention(masked, (10, 25))

    def test_band_outside_model(self, full_trace):
        with pytest.raises(LayerRangeError):
            aggregate_attention(full_trace, (10, 32))
        with pytest.raises(LayerRangeError):
            aggregate_attention(full_trace, (20, 10))

    def test_band_not_exported(self, toy_backend):
        trace = toy_backend.generate(None, "q", Decoding.greedy(), 1, attention_layers=[0, 1])
        with pytest.raises(LayerRangeError):
            aggregate_attention(trace, (0, 5))

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            SaliencyMap(np.array([0.1, -0.2]), (0, 1), 1)


class TestTopK:

    @pytest.mark.parametrize("k, n, expected", [
        (60, 576, 345), (25, 16, 4), (0, 16, 0), (100, 16, 16), (33, 10, 3), (12.5, 16, 2),
    ])
    def test_cardinality(self, k, n, expected):
        assert mask_cardinality(k, n) == expected

    def test_cardinality_range(self):
        with pytest.raises(MaskError):
            mask_cardinality(101, 16)

    def test_cardinality_grid(self):
        for n in range(1, 65):
            for k in range(0, 101):
                assert mask_cardinality(k, n) == math.floor(Fraction(k * n, 100)), (k, n)

    def test_matches_brute_force_with_ties(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 40))
            weights = rng.integers(0, 4, size=n).astype(np.float64)
            k = float(rng.integers(0, 101))
            expected = sorted(range(n), key=lambda i: (-weights[i], i))[:mask_cardinality(k, n)]
            assert top_k_mask(SaliencyMap(weights, (0, 1), 1), k).indices == tuple(sorted(expected))

    @pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e4])
    def test_scale_invariant(self, scale):
        weights = np.random.default_rng(1).uniform(0, 1, 24)
        for k in (10, 25, 60, 90):
            a = top_k_mask(SaliencyMap(weights, (0, 1), 1), k)
            b = top_k_mask(SaliencyMap(weights * scale, (0, 1), 1), k)
            assert a == b

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(2)
        weights = rng.permutation(24).astype(np.float64) + 1.0
        for _ in range(20):
            perm = rng.permutation(24)
            for k in (25, 50):
                picked = set(top_k_mask(SaliencyMap(weights, (0, 1), 1), k).indices)
                moved = top_k_mask(SaliencyMap(weights[perm], (0, 1), 1), k).indices
                assert set(moved) == {j for j in range(24) if perm[j] in picked}

    def test_picks_evidence_patches(self, full_trace):
        mask = top_k_mask(aggregate_attention(full_trace, (10, 25)), 25)
        assert mask.kind == MaskKind.CORE
        assert mask.indices == (0, 1, 4, 5)

    def test_ties_go_to_lower_index(self, full_trace):
        mask = top_k_mask(aggregate_attention(full_trace, (0, 9)), 25)
        assert mask.indices == (0, 1, 2, 3)

    def test_degenerate_sizes_collapse(self, full_trace):
        sal = aggregate_attention(full_trace, (10, 25))
        assert top_k_mask(sal, 0).kind == MaskKind.NONE
        full = top_k_mask(sal, 100)
        assert full.kind == MaskKind.BLANK
        assert full.indices == tuple(range(16))

    def test_monotone_in_k(self, full_trace):
        sal = aggregate_attention(full_trace, (10, 25))
        prev = set()
        for k in range(0, 101, 10):
            cur = set(top_k_mask(sal, k).indices)
            assert prev <= cur
            prev = cur


class TestRandomAndGroundTruth:

    def test_random_is_seeded(self):
        a = random_mask(16, 4, seed=11)
        b = random_mask(16, 4, seed=11)
        assert a == b
        assert a.kind == MaskKind.RANDOM
        assert len(a.indices) == 4
        assert len({random_mask(16, 4, seed=s).indices for s in range(10)}) > 1

    def test_random_bounds(self):
        assert random_mask(16, 0, seed=0).kind == MaskKind.NONE
        assert random_mask(16, 16, seed=0).kind == MaskKind.BLANK
        with pytest.raises(MaskError):
            random_mask(16, 17, seed=0)

    def test_ground_truth_uses_patch_centers(self, layout):
        assert ground_truth_mask(layout).indices == (0, 1, 4, 5)
        # 境界上の中心も含む
        edge = VisualLayout(16, (4, 4), ((0.0, 0.0, 0.125, 0.125),))
        assert ground_truth_mask(edge).indices == (0,)

    def test_ground_truth_empty_is_flagged(self):
        tiny = VisualLayout(16, (4, 4), ((0.2, 0.2, 0.3, 0.3),))
        mask = ground_truth_mask(tiny)
        assert mask.kind == MaskKind.NONE
        assert SUSPICIOUS_EMPTY in mask.flags

    def test_ground_truth_without_regions(self):
        with pytest.raises(DataError):
            ground_truth_mask(VisualLayout(16, (4, 4)))


class TestEvidenceRatio:

    def test_ratio_inside_and_outside_band(self, full_trace, layout):
        inside, outside = evidence_attention_ratio(aggregate_attention(full_trace, (10, 25)), layout)
        assert inside / outside == pytest.approx(27.0, rel=1e-5)
        inside, outside = evidence_attention_ratio(aggregate_attention(full_trace, (0, 9)), layout)
        assert inside / outside == pytest.approx(1.0, rel=1e-5)

    def test_layer_curve(self, full_trace, layout):
        rows = layer_ratio_curve(full_trace, layout)
        assert [r["layer"] for r in rows] == list(range(32))
        ratios = {r["layer"]: r["ratio"] for r in rows}
        assert ratios[15] == pytest.approx(27.0, rel=1e-5)
        assert ratios[5] == pytest.approx(1.0, rel=1e-5)
        assert ratios[26] == pytest.approx(1.0, rel=1e-5)

    def test_ratio_needs_both_regions(self, full_trace):
        everything = VisualLayout(16, (4, 4), ((0.0, 0.0, 1.0, 1.0),))
        with pytest.raises(DataError):
            evidence_attention_ratio(aggregate_attention(full_trace, (10, 25)), everything)


class TestOverlay:

    def test_overlay_and_record(self):
        mask = MaskSpec(MaskKind.CORE, (0, 5), 16)
        grid = mask_overlay(mask, (4, 4))
        assert grid[0] == [1, 0, 0, 0]
        assert grid[1] == [0, 1, 0, 0]
        rec = mask_record("s1", mask, 12.5, (4, 4))
        assert rec["kind"] == "core"
        assert rec["indices"] == [0, 5]
        with pytest.raises(MaskError):
            mask_overlay(mask, (3, 5))
