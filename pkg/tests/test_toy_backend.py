# tests/test_toy_backend.py
"""トイバックエンドの閉形式オラクルとの一致、knockout の正規化、契約上のエラー"""
import numpy as np
import pytest

from backends import load_backend
from backends.base import (
    BackendError,
    ConfigError,
    DataError,
    Decoding,
    DegenerateSampleError,
    MaskError,
    MaskKind,
    MaskSpec,
)
from backends.toy import ToyBackend, ToyConfig
from scoring.baselines import perplexity


def _softmax_entropy(z):
    p = np.exp(z - z.max())
    p /= p.sum()
    return float(-(p * np.log(p)).sum()), p


def _oracle_logits(vocab, a_img, a_prior, beta_img, beta_prior, g):
    z = np.zeros(vocab)
    z[a_img] += beta_img * g
    z[a_prior] += beta_prior
    return z


class TestClosedForm:

    def test_full_entropy_and_logprob(self, toy_backend):
        trace = toy_backend.generate(None, "q", Decoding.greedy(), 8)
        h, p = _softmax_entropy(_oracle_logits(16, 1, 2, 4.0, 0.0, 1.0))
        assert trace.tokens.tolist() == [1]
        np.testing.assert_allclose(trace.entropies, [h], atol=1e-12)
        np.testing.assert_allclose(trace.logprobs, [np.log(p[1])], atol=1e-12)
        assert trace.condition == "full"

    def test_half_evidence_knockout(self, toy_backend):
        mask = MaskSpec(MaskKind.CORE, (0, 1), 16)
        trace = toy_backend.rescore(None, "q", [1], mask)
        h, _ = _softmax_entropy(_oracle_logits(16, 1, 2, 4.0, 0.0, 0.5))
        np.testing.assert_allclose(trace.entropies, [h], atol=1e-12)
        assert trace.condition == "masked"

    def test_blank_is_uniform_without_prior(self, toy_backend):
        trace = toy_backend.rescore(None, "q", [1], MaskSpec.blank(16))
        np.testing.assert_allclose(trace.entropies, [np.log(16)], atol=1e-12)
        assert trace.condition == "blank"

    def test_knockout_outside_evidence_changes_nothing(self, toy_backend):
        full = toy_backend.rescore(None, "q", [1, 3], MaskSpec.none(16))
        other = toy_backend.rescore(None, "q", [1, 3], MaskSpec(MaskKind.RANDOM, (2, 3, 15), 16))
        np.testing.assert_allclose(full.entropies, other.entropies, atol=1e-12)
        np.testing.assert_allclose(full.logprobs, other.logprobs, atol=1e-12)

    def test_scene_override(self, toy_backend):
        scene = {"a_img": 5, "a_prior": 5, "beta_img": 1.0, "beta_prior": 2.0, "evidence": [3]}
        trace = toy_backend.generate(scene, "q", Decoding.greedy(), 4)
        h, _ = _softmax_entropy(_oracle_logits(16, 5, 5, 1.0, 2.0, 1.0))
        assert trace.tokens.tolist() == [5]
        np.testing.assert_allclose(trace.entropies, [h], atol=1e-12)

    def test_answer_length_and_max_tokens(self, toy_backend):
        scene = {"answer_length": 4}
        assert toy_backend.generate(scene, "q", Decoding.greedy(), 10).length == 4
        assert toy_backend.generate(scene, "q", Decoding.greedy(), 2).length == 2


class TestAttention:

    def test_rows_and_nonvisual_sum_to_one(self, toy_backend):
        mask = MaskSpec(MaskKind.CORE, (0, 4, 7), 16)
        trace = toy_backend.rescore(None, "q", [1, 1], mask)
        total = trace.attention.astype(np.float64).sum(axis=-1) + trace.nonvisual_mass
        np.testing.assert_allclose(total, 1.0, atol=1e-6)
        assert np.all(trace.attention[..., [0, 4, 7]] == 0)

    def test_grounded_band_concentrates_on_evidence(self, toy_backend):
        trace = toy_backend.generate(None, "q", Decoding.greedy(), 1)
        row = trace.attention[15, 0, 0].astype(np.float64)
        np.testing.assert_allclose(row[[0, 1, 4, 5]], 0.5 * 0.9 / 4, rtol=1e-6)
        np.testing.assert_allclose(row[2], 0.5 * 0.1 / 12, rtol=1e-6)
        outside = trace.attention[3, 0, 0].astype(np.float64)
        np.testing.assert_allclose(outside, 0.5 / 16, rtol=1e-6)

    def test_export_subset(self, toy_backend):
        trace = toy_backend.generate(None, "q", Decoding.greedy(), 1,
                                     attention_layers=[12, 3, 99], hidden_layers=[0, 32])
        assert trace.attention_layers == (3, 12)
        assert trace.attention.shape == (2, 4, 1, 16)
        assert trace.hidden_layers == (0, 32)
        assert trace.hidden_generated.shape == (2, 1, 8)
        assert trace.hidden_visual.shape == (2, 16, 8)

    def test_trace_is_read_only(self, toy_backend):
        trace = toy_backend.generate(None, "q", Decoding.greedy(), 1)
        with pytest.raises(ValueError):
            trace.entropies[0] = 0.0
        with pytest.raises(ValueError):
            trace.attention[0, 0, 0, 0] = 1.0


class TestDecoding:

    def test_sampling_is_seeded(self, toy_backend):
        scene = {"answer_length": 6, "beta_img": 0.5}
        a = toy_backend.generate(scene, "q", Decoding.sample(1.0, 7), 6)
        b = toy_backend.generate(scene, "q", Decoding.sample(1.0, 7), 6)
        assert a.tokens.tolist() == b.tokens.tolist()

    def test_eos_gives_degenerate_trace(self):
        backend = ToyBackend(ToyConfig(eos_token=1))
        trace = backend.generate(None, "q", Decoding.greedy(), 4)
        assert trace.degenerate
        assert trace.length == 0

    def test_decode_and_ask(self, toy_backend):
        assert toy_backend.decode([1, 12]) == "tok1 tok12"
        _, p = _softmax_entropy(_oracle_logits(16, 1, 2, 4.0, 0.0, 1.0))
        reply = toy_backend.ask(None, "Question: q.\nModel answer: tok1.\nOn a scale of 0 to 100 ...")
        assert reply == str(int(round(100 * p[1])))


class TestContract:

    def test_counters(self, toy_backend):
        toy_backend.generate({"answer_length": 3}, "q", Decoding.greedy(), 8)
        toy_backend.rescore(None, "q", [1], MaskSpec.none(16))
        toy_backend.ask(None, "anything")
        snap = toy_backend.counters.snapshot()
        assert snap == {"generations": 1, "rescores": 1, "queries": 1, "forward_passes": 5}
        assert toy_backend.counters.calls == 3

    def test_rescore_errors(self, toy_backend):
        with pytest.raises(DataError):
            toy_backend.rescore(None, "q", [16], MaskSpec.none(16))
        with pytest.raises(DegenerateSampleError):
            toy_backend.rescore(None, "q", [], MaskSpec.none(16))
        with pytest.raises(MaskError):
            toy_backend.rescore(None, "q", [1], MaskSpec.none(9))
        with pytest.raises(ConfigError):
            toy_backend.rescore(None, "q", [1], MaskSpec.blank(16), blank_mode="erase")

    def test_remove_matches_blank_knockout(self, toy_backend):
        a = toy_backend.rescore(None, "q", [1], MaskSpec.blank(16), blank_mode="knockout")
        b = toy_backend.rescore(None, "q", [1], MaskSpec.blank(16), blank_mode="remove")
        np.testing.assert_allclose(a.entropies, b.entropies)

    def test_single_owner(self, toy_backend):
        with toy_backend._exclusive():
            with pytest.raises(BackendError):
                toy_backend.generate(None, "q", Decoding.greedy(), 1)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            ToyConfig(a_img=16)
        with pytest.raises(ConfigError):
            ToyConfig(grounded_band=(10, 40))
        with pytest.raises(ConfigError):
            ToyConfig(evidence=(), beta_img=1.0)
        with pytest.raises(ConfigError):
            ToyConfig().with_scene({"colour": "red"})

    def test_load_backend(self):
        backend = load_backend({"kind": "toy", "config": {"vocab_size": 8, "name": "small"}})
        assert backend.backend_id == "toy:small"
        assert backend.describe()["config"]["vocab_size"] == 8
        with pytest.raises(ConfigError):
            load_backend({"kind": "mystery"})

    def test_llava_without_hf_stack(self, monkeypatch):
        from backends import llava_hf
        monkeypatch.setattr(llava_hf, "HF_AVAILABLE", False)
        with pytest.raises(BackendError):
            load_backend({"kind": "llava-hf", "model_id": "llava-hf/llava-1.5-7b-hf"})
        with pytest.raises(ConfigError):
            load_backend({"kind": "llava-hf", "colour": "red"})


class TestRandomizedOracle:

    def test_random_configs_match_closed_form(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            vocab = int(rng.integers(2, 33))
            evidence = tuple(rng.choice(16, size=int(rng.integers(1, 17)), replace=False).tolist())
            cfg = ToyConfig(vocab_size=vocab, evidence=evidence, a_img=int(rng.integers(vocab)),
                            a_prior=int(rng.integers(vocab)), beta_img=float(rng.uniform(0, 8)),
                            beta_prior=float(rng.uniform(0, 4)))
            hidden = rng.choice(16, size=int(rng.integers(0, 17)), replace=False).tolist()
            mask = MaskSpec.from_indices(MaskKind.RANDOM, hidden, 16)
            tokens = rng.integers(vocab, size=int(rng.integers(1, 4))).tolist()

            trace = ToyBackend(cfg).rescore(None, "q", tokens, mask)
            g = sum(i not in hidden for i in evidence) / len(evidence)
            h, p = _softmax_entropy(_oracle_logits(vocab, cfg.a_img, cfg.a_prior, cfg.beta_img, cfg.beta_prior, g))
            np.testing.assert_allclose(trace.entropies, [h] * len(tokens), atol=1e-10)
            np.testing.assert_allclose(trace.logprobs, np.log(p[tokens]), atol=1e-10)
            assert perplexity(trace.logprobs) == pytest.approx(np.exp(-np.mean(np.log(p[tokens]))), rel=1e-10)

    @pytest.mark.parametrize("beta_img", [0.5, 2.0, 4.0, 8.0])
    def test_entropy_rises_as_evidence_is_hidden(self, beta_img):
        backend = ToyBackend(ToyConfig(beta_img=beta_img))
        evidence = [0, 1, 4, 5]
        entropies = [float(backend.rescore(None, "q", [1], MaskSpec.from_indices(MaskKind.CORE, evidence[:j], 16))
                           .entropies[0])
                     for j in range(len(evidence) + 1)]
        assert all(a < b for a, b in zip(entropies, entropies[1:]))

    def test_blank_dominates_partial_masks(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            evidence = tuple(rng.choice(16, size=int(rng.integers(1, 17)), replace=False).tolist())
            backend = ToyBackend(ToyConfig(evidence=evidence, beta_img=float(rng.uniform(0, 8))))
            hidden = rng.choice(16, size=int(rng.integers(0, 17)), replace=False).tolist()
            partial = backend.rescore(None, "q", [1], MaskSpec.from_indices(MaskKind.RANDOM, hidden, 16))
            blank = backend.rescore(None, "q", [1], MaskSpec.blank(16))
            assert blank.entropies[0] >= partial.entropies[0] - 1e-12
