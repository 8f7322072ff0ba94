# tests/test_vauq.py
import numpy as np
import pytest

from backends.base import ConfigError, DegenerateSampleError, MissingConditionError, StepStats
from scoring.vauq import (
    CORRECT,
    HALLUCINATED,
    ConditionEntropies,
    VauqParams,
    image_information_score,
    mean_entropy,
    threshold_decision,
    vauq_score,
    vauq_score_expanded,
    vauq_surface,
)


class TestEntropy:

    def test_mean_over_steps(self):
        steps = [StepStats(0.2, -0.1), StepStats(0.6, -0.5)]
        assert mean_entropy(steps) == pytest.approx(0.4)
        assert mean_entropy([0.3, 0.9, 0.0]) == pytest.approx(0.4)

    def test_empty_is_degenerate(self):
        with pytest.raises(DegenerateSampleError):
            mean_entropy([])

    def test_step_stats_domain(self):
        with pytest.raises(ValueError):
            StepStats(-0.5, -0.1)
        with pytest.raises(ValueError):
            StepStats(0.5, 0.2)


class TestScore:

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 0.6, 1.5, 5.0])
    def test_two_forms_agree(self, alpha):
        ce = ConditionEntropies(0.7, 2.1, {"core": 1.9, "random": 0.8}, 3)
        params = VauqParams(alpha=alpha)
        for cond in ("core", "random", "blank"):
            assert vauq_score(ce, params, cond) == pytest.approx(vauq_score_expanded(ce, params, cond))

    def test_two_forms_agree_on_random_triples(self):
        rng = np.random.default_rng(0)
        h_full, h_deg, alpha = rng.uniform(0, 10, (3, 10_000))
        for h, hd, a in zip(h_full, h_deg, alpha):
            ce = ConditionEntropies(h, None, {"core": hd})
            params = VauqParams(alpha=a)
            assert vauq_score(ce, params) == pytest.approx(vauq_score_expanded(ce, params), abs=1e-12)

    def test_score_non_increasing_in_alpha_when_information_is_positive(self):
        rng = np.random.default_rng(1)
        alphas = np.linspace(0, 5, 21)
        for _ in range(200):
            h = float(rng.uniform(0, 3))
            ce = ConditionEntropies(h, None, {"core": h + float(rng.uniform(0, 3))})
            scores = [vauq_score(ce, VauqParams(alpha=a)) for a in alphas]
            assert all(b <= a + 1e-12 for a, b in zip(scores, scores[1:]))

    def test_alpha_zero_is_entropy(self):
        ce = ConditionEntropies(0.7, None, {"core": 1.9})
        assert vauq_score(ce, VauqParams(alpha=0.0)) == pytest.approx(0.7)

    def test_negative_information_is_kept(self):
        ce = ConditionEntropies(1.0, None, {"core": 0.4})
        assert image_information_score(ce, "core") == pytest.approx(-0.6)
        assert vauq_score(ce, VauqParams(alpha=1.0)) == pytest.approx(1.6)

    def test_none_condition_gives_zero_information(self):
        ce = ConditionEntropies(1.3)
        assert image_information_score(ce, "none") == 0.0

    def test_missing_condition(self):
        ce = ConditionEntropies(1.0, None, {"core": 1.2})
        with pytest.raises(MissingConditionError):
            vauq_score(ce, VauqParams(), "blank")
        with pytest.raises(MissingConditionError):
            image_information_score(ce, "random")
        with pytest.raises(ConfigError):
            image_information_score(ce, "everything")

    def test_negative_entropies_rejected(self):
        with pytest.raises(ValueError):
            ConditionEntropies(-0.1)

    def test_threshold(self):
        assert threshold_decision(0.5, 0.5) == HALLUCINATED
        assert threshold_decision(0.49, 0.5) == CORRECT


class TestParams:

    @pytest.mark.parametrize("kwargs", [
        {"alpha": -0.1}, {"k_percent": 101}, {"k_percent": -1}, {"layer_band": (20, 10)},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            VauqParams(**kwargs)

    def test_to_dict(self):
        assert VauqParams(0.6, 60, (10, 25)).to_dict() == {"alpha": 0.6, "k_percent": 60, "layer_band": [10, 25]}


class TestSurface:

    def test_matches_pointwise(self):
        rng = np.random.default_rng(3)
        h_full = rng.uniform(0, 2, 12)
        h_core = rng.uniform(0, 3, 12)
        alphas = [0.0, 0.5, 2.0]
        surface = vauq_surface(h_full, h_core, alphas)
        assert surface.shape == (3, 12)
        for a_idx, alpha in enumerate(alphas):
            for i in range(12):
                ce = ConditionEntropies(h_full[i], None, {"core": h_core[i]})
                assert surface[a_idx, i] == pytest.approx(vauq_score(ce, VauqParams(alpha=alpha)))
