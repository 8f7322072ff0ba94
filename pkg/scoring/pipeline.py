# scoring/pipeline.py
"""
レコード1件ぶんのスコア計算。

必要なものだけを遅延計算する:
  full トレース（生成 or 記録済み応答の再スコア）→ 注意の集計 → マスク →
  条件ごとの再スコア（エントロピー）→ 各スコア
トレースは TraceCache 経由で取り、同じレコード内では条件ごとに1回しか計算しない。
スコアごとの失敗はその行の status に落とし、他のスコアは続行する。
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from backends.base import (
    Backend,
    BackendError,
    Decoding,
    DegenerateSampleError,
    GenerationTrace,
    MaskKind,
    MaskSpec,
    UnavailableScoreError,
    VauqError,
    VisualLayout,
)
from evaluation.records import EvalRecord
from scoring import baselines
from scoring.report import (
    SCORE_REGISTRY,
    STATUS_DEGENERATE,
    STATUS_FAILED,
    STATUS_OK,
    STATUS_UNAVAILABLE,
    ScoreRow,
    params_hash,
)
from scoring.saliency import (
    SaliencyMap,
    aggregate_attention,
    ground_truth_mask,
    mask_record,
    random_mask,
    top_k_mask,
)
from scoring.vauq import ConditionEntropies, VauqParams, image_information_score, mean_entropy, vauq_score
from utils.cache import TraceCache, generate_key
from utils.logs import get_logger

log = get_logger("pipeline")

HIDDEN_SCORES = ("contextual_lens", "chain_of_embeddings")
# スコア名 → VAUQ 系で使う劣化条件
_VAUQ_CONDITION = {"vauq_blank": "blank", "vauq_random": "random", "vauq_ground_truth": "ground_truth"}
_IS_CONDITION = {"is_blank": "blank", "is_core": "core", "is_random": "random", "is_ground_truth": "ground_truth"}


def derive_seed(sample_id: str, base: int) -> int:
    """プロセスをまたいでも同じになる sample ごとのシード"""
    digest = hashlib.sha1(f"{base}:{sample_id}".encode("utf-8")).hexdigest()
    return int(digest[:8], 16)


@dataclass(frozen=True)
class ScoringOptions:
    params: VauqParams = field(default_factory=VauqParams)
    decoding: Decoding = field(default_factory=Decoding.greedy)
    max_tokens: int = 128
    blank_mode: str = "knockout"
    mask_kind: str = "core"
    n_samples: int = baselines.DEFAULT_N_SAMPLES
    sample_temperature: float = 1.0
    sample_seed: int = 0
    svar_layers: Tuple[int, int] = baselines.DEFAULT_SVAR_LAYERS
    lens_text_layer: Optional[int] = None
    lens_image_layer: Optional[int] = None
    embed_layer: Optional[int] = None
    eigen_ridge: float = baselines.DEFAULT_EIGEN_RIDGE
    random_seed: int = 0
    regenerate: bool = False

    @classmethod
    def from_run_config(cls, cfg) -> "ScoringOptions":
        dec = dict(cfg.decoding)
        mode = dec.get("mode", "greedy")
        decoding = Decoding.greedy() if mode == "greedy" else Decoding.sample(dec.get("temperature", 1.0),
                                                                                dec.get("seed", 0))
        return cls(
            params=VauqParams(cfg.alpha, cfg.k_percent, tuple(cfg.layer_band)),
            decoding=decoding,
            max_tokens=cfg.max_tokens,
            blank_mode=cfg.blank_mode,
            mask_kind=cfg.mask_kind,
            n_samples=cfg.n_samples,
            sample_temperature=cfg.sample_temperature,
            sample_seed=cfg.sample_seed,
            svar_layers=tuple(cfg.svar_layers),
            lens_text_layer=cfg.lens_text_layer,
            lens_image_layer=cfg.lens_image_layer,
            embed_layer=cfg.embed_layer,
            eigen_ridge=cfg.eigen_ridge,
            random_seed=cfg.random_seed,
        )


@dataclass
class RecordResult:
    rows: List[ScoreRow]
    masks: List[Dict[str, Any]]
    errors: List[Dict[str, Any]]


class _Sample:
    """1レコード分の中間結果（トレース・マスク・条件別エントロピー）"""

    def __init__(self, scorer: "RecordScorer", record: EvalRecord):
        self.scorer = scorer
        self.record = record
        self._full: Optional[GenerationTrace] = None
        self._layout: Optional[VisualLayout] = None
        self._saliency: Dict[Tuple[int, int], SaliencyMap] = {}
        self._entropy: Dict[Tuple, float] = {}
        self._samples: Optional[baselines.SampleSet] = None
        self.masks_used: Dict[Tuple, Dict[str, Any]] = {}

    # --- full ------------------------------------------------------------
    def full(self) -> GenerationTrace:
        if self._full is None:
            self._full = self.scorer._full_trace(self.record)
        return self._full

    def layout(self) -> VisualLayout:
        if self._layout is None:
            base = self.scorer.backend.layout(self.record.image_ref)
            self._layout = base.with_evidence(self.record.evidence_regions)
        return self._layout

    # --- マスク ----------------------------------------------------------
    def saliency(self, band: Tuple[int, int]) -> SaliencyMap:
        band = (int(band[0]), int(band[1]))
        if band not in self._saliency:
            self._saliency[band] = aggregate_attention(self.full(), band)
        return self._saliency[band]

    def mask(self, condition: str, k_percent: Optional[float] = None,
             band: Optional[Tuple[int, int]] = None) -> MaskSpec:
        opts = self.scorer.options
        k = opts.params.k_percent if k_percent is None else k_percent
        band = opts.params.layer_band if band is None else band
        n = self.layout().n_tokens
        if condition == "blank":
            return MaskSpec.blank(n)
        if condition == "none":
            return MaskSpec.none(n)
        if condition == "core":
            return top_k_mask(self.saliency(band), k)
        if condition == "random":
            size = len(self.mask("core", k, band).indices)
            return random_mask(n, size, derive_seed(self.record.sample_id, opts.random_seed))
        if condition == "ground_truth":
            return ground_truth_mask(self.layout())
        raise VauqError(f"unknown mask condition: {condition}")

    # --- エントロピー ----------------------------------------------------
    def entropy(self, condition: str, k_percent: Optional[float] = None,
                band: Optional[Tuple[int, int]] = None) -> float:
        full = self.full()
        if full.degenerate:
            raise DegenerateSampleError(f"{self.record.sample_id}: empty response")
        if condition == "full":
            return mean_entropy(full.entropies)
        mask = self.mask(condition, k_percent, band)
        self._remember_mask(condition, mask, k_percent)
        blank_mode = self.scorer.options.blank_mode if mask.kind == MaskKind.BLANK else "knockout"
        memo = (mask.indices, blank_mode)
        if memo not in self._entropy:
            if mask.kind == MaskKind.NONE:
                self._entropy[memo] = mean_entropy(full.entropies)
            else:
                trace = self.scorer._rescore(self.record, full, mask, blank_mode)
                self._entropy[memo] = mean_entropy(trace.entropies)
        return self._entropy[memo]

    def _remember_mask(self, condition: str, mask: MaskSpec, k_percent: Optional[float]) -> None:
        k = self.scorer.options.params.k_percent if k_percent is None else k_percent
        key = (condition, mask.indices, k if condition in ("core", "random") else None)
        if key not in self.masks_used:
            rec = mask_record(self.record.sample_id, mask,
                              k if condition in ("core", "random") else None, self.layout().grid)
            rec["condition"] = condition
            self.masks_used[key] = rec

    def condition_entropies(self, conditions: Sequence[str]) -> ConditionEntropies:
        h_full = self.entropy("full")
        h_blank = None
        masked = {}
        for cond in conditions:
            if cond == "blank":
                h_blank = self.entropy("blank")
            else:
                masked[cond] = self.entropy(cond)
        return ConditionEntropies(h_full, h_blank, masked, self.full().length)

    # --- サンプリング ----------------------------------------------------
    def samples(self) -> baselines.SampleSet:
        if self._samples is None:
            self._samples = self.scorer._sample_set(self.record)
        return self._samples


class RecordScorer:
    """バックエンド1インスタンスを専有してレコードを順に処理する"""

    def __init__(self, backend: Backend, options: Optional[ScoringOptions] = None,
                 cache: Optional[TraceCache] = None):
        self.backend = backend
        self.options = options or ScoringOptions()
        self.cache = cache or TraceCache(None, enabled=False)
        self.need_hidden = False
        self._current: Optional[_Sample] = None
        # backend_id と出力を左右する設定の両方で決まる
        self.backend_key = generate_key(backend.backend_id, backend.fingerprint())

    # --- 層の既定値 --------------------------------------------------------
    @property
    def embed_layer(self) -> int:
        o = self.options.embed_layer
        return self.backend.n_layers // 2 if o is None else o

    @property
    def lens_layers(self) -> Tuple[int, int]:
        mid = self.backend.n_layers // 2
        t = self.options.lens_text_layer
        i = self.options.lens_image_layer
        return (mid if t is None else t, mid if i is None else i)

    # --- キャッシュ付きのバックエンド呼び出し -------------------------------
    def _key(self, record: EvalRecord, tag: str, decoding: Optional[Decoding],
             mask: Optional[MaskSpec], tokens: Optional[Sequence[int]], exports: Dict[str, Any]) -> str:
        return generate_key(
            self.backend_key,
            decoding.to_dict() if decoding else None,
            record.question,
            record.image_ref,
            list(mask.indices) if mask is not None else None,
            tag,
            [int(t) for t in tokens] if tokens is not None else None,
            exports,
        )

    def _full_trace(self, record: EvalRecord) -> GenerationTrace:
        hidden = list(range(self.backend.n_layers + 1)) if self.need_hidden else None
        exports = {"attention": "all", "hidden": "all" if hidden else None}
        use_record = record.response_tokens is not None and not self.options.regenerate
        tokens = record.response_tokens if use_record else None
        decoding = None if use_record else self.options.decoding
        key = self._key(record, "full", decoding, None, tokens,
                        dict(exports, max_tokens=None if use_record else self.options.max_tokens))
        trace = None if self.options.regenerate else self.cache.load(record.sample_id, "full", key)
        if trace is None:
            if use_record:
                if not tokens:
                    raise DegenerateSampleError(f"{record.sample_id}: recorded response is empty")
                n = self.backend.layout(record.image_ref).n_tokens
                trace = self.backend.rescore(record.image_ref, record.question, tokens, MaskSpec.none(n),
                                             attention_layers=None, hidden_layers=hidden)
            else:
                trace = self.backend.generate(record.image_ref, record.question, self.options.decoding,
                                              self.options.max_tokens, attention_layers=None,
                                              hidden_layers=hidden)
            self.cache.store(record.sample_id, "full", key, trace)
        return trace

    def _rescore(self, record: EvalRecord, full: GenerationTrace, mask: MaskSpec, blank_mode: str) -> GenerationTrace:
        tag = f"{mask.kind.value}:{blank_mode}"
        key = self._key(record, tag, None, mask, full.tokens.tolist(), {"attention": None, "hidden": None})
        cond = mask.kind.value
        trace = None if self.options.regenerate else self.cache.load(record.sample_id, cond, key)
        if trace is None:
            trace = self.backend.rescore(record.image_ref, record.question, full.tokens.tolist(), mask,
                                         attention_layers=(), hidden_layers=None, blank_mode=blank_mode)
            self.cache.store(record.sample_id, cond, key, trace)
        return trace

    def _sample_set(self, record: EvalRecord) -> baselines.SampleSet:
        o = self.options
        layer = self.embed_layer

        def cached(i: int, dec: Decoding, generate) -> GenerationTrace:
            key = self._key(record, "sample", dec, None, None,
                            {"attention": None, "hidden": [layer], "max_tokens": o.max_tokens})
            trace = None if o.regenerate else self.cache.load(record.sample_id, f"sample{i}", key)
            if trace is None:
                trace = generate()
                self.cache.store(record.sample_id, f"sample{i}", key, trace)
            return trace

        return baselines.draw_samples(self.backend, record.image_ref, record.question, n_samples=o.n_samples,
                                      temperature=o.sample_temperature,
                                      seed=derive_seed(record.sample_id, o.sample_seed),
                                      max_tokens=o.max_tokens, embed_layer=layer, through=cached)

    def _ask(self, record: EvalRecord, answer: str) -> str:
        prompt = baselines.verbalized_prompt(record.question, answer)
        key = generate_key(self.backend_key, "ask", prompt, record.image_ref)
        reply = None if self.options.regenerate else self.cache.load_reply(record.sample_id, key)
        if reply is None:
            reply = self.backend.ask(record.image_ref, prompt)
            self.cache.store_reply(record.sample_id, key, reply)
        return reply

    # --- スコアごとのパラメータ記録 ----------------------------------------
    def score_params(self, name: str) -> Dict[str, Any]:
        o = self.options
        p: Dict[str, Any] = {"score": name, "backend_id": self.backend.backend_id,
                             "backend_key": self.backend_key[:12],
                             "decoding": o.decoding.to_dict(), "max_tokens": o.max_tokens}
        info = SCORE_REGISTRY[name]
        if name == "vauq" or info.family == "ablation":
            p.update(o.params.to_dict())
            p["mask_kind"] = o.mask_kind if name == "vauq" else (_VAUQ_CONDITION.get(name) or _IS_CONDITION[name])
            p["blank_mode"] = o.blank_mode
            if p["mask_kind"] == "random":
                p["random_seed"] = o.random_seed
        elif name == "svar":
            p["layers"] = list(o.svar_layers)
        elif name == "contextual_lens":
            p["text_layer"], p["image_layer"] = self.lens_layers
        elif name == "verbalized":
            p["prompt"] = baselines.VERBALIZED_PROMPT
            p["fallback"] = baselines.VERBALIZED_FALLBACK
        elif info.family == "sampling":
            p.update({"n_samples": o.n_samples, "temperature": o.sample_temperature,
                      "sample_seed": o.sample_seed, "embed_layer": self.embed_layer})
            if name == "eigenscore":
                p.update({"ridge": o.eigen_ridge, "covariance": "centered, 1/K"})
            if name == "semantic_entropy":
                p["equivalence"] = "normalized_exact_match"
        return p

    # --- 1スコア ---------------------------------------------------------
    def _compute(self, name: str, s: _Sample) -> Tuple[float, List[str], Optional[ConditionEntropies]]:
        o = self.options
        if name == "vl_uncertainty":
            baselines.vl_uncertainty()
        if name == "entropy":
            return s.entropy("full"), [], None
        if name == "vauq" or name in _VAUQ_CONDITION:
            cond = o.mask_kind if name == "vauq" else _VAUQ_CONDITION[name]
            ce = s.condition_entropies([cond])
            return vauq_score(ce, o.params, cond), self._mask_flags(s, cond), ce
        if name in _IS_CONDITION:
            cond = _IS_CONDITION[name]
            ce = s.condition_entropies([cond])
            return -image_information_score(ce, cond), self._mask_flags(s, cond), ce
        if name == "perplexity":
            full = s.full()
            if full.degenerate:
                raise DegenerateSampleError("empty response")
            return baselines.perplexity(full.logprobs), [], None
        if name == "svar":
            return baselines.svar(s.full(), o.svar_layers), [], None
        if name == "contextual_lens":
            res = baselines.contextual_lens(s.full(), *self.lens_layers)
            return res.value, list(res.flags), None
        if name == "chain_of_embeddings":
            return baselines.chain_of_embeddings(s.full()), [], None
        if name == "verbalized":
            full = s.full()
            if full.degenerate:
                raise DegenerateSampleError("empty response")
            answer = full.text if o.regenerate or not s.record.response else s.record.response
            res = baselines.verbalized_score_from_reply(self._ask(s.record, answer))
            return res.value, list(res.flags), None
        if name == "eigenscore":
            samples = s.samples()
            return baselines.eigenscore(samples, o.eigen_ridge), list(samples.flags), None
        if name == "semantic_entropy":
            samples = s.samples()
            return baselines.semantic_entropy(samples), list(samples.flags), None
        raise UnavailableScoreError(f"no implementation for score {name}")

    def _mask_flags(self, s: _Sample, cond: str) -> List[str]:
        if cond in ("blank", "none"):
            return []
        return list(s.mask(cond).flags)

    # --- 1レコード -------------------------------------------------------
    def score_record(self, record: EvalRecord, score_names: Sequence[str]) -> RecordResult:
        self.need_hidden = any(n in HIDDEN_SCORES for n in score_names)
        s = _Sample(self, record)
        rows: List[ScoreRow] = []
        errors: List[Dict[str, Any]] = []
        for name in score_names:
            params = self.score_params(name)
            row = ScoreRow(sample_id=record.sample_id, score_name=name, value=None,
                           params_hash=params_hash(params), dataset=record.dataset, params=params,
                           split=record.split, label=record.label)
            try:
                value, flags, ce = self._compute(name, s)
                row.value = float(value)
                row.flags = flags
                row.status = STATUS_OK
                if ce is not None:
                    row.condition_entropies = ce.to_dict()
                    if ce.h_blank is not None:
                        row.blank_mode = self.options.blank_mode if self.backend.supports_removal else "knockout"
            except UnavailableScoreError as e:
                row.status, row.error = STATUS_UNAVAILABLE, str(e)
            except DegenerateSampleError as e:
                row.status, row.error = STATUS_DEGENERATE, str(e)
            except Exception as e:
                # 1スコアの失敗でレコード全体は止めない
                kind = "backend" if isinstance(e, BackendError) else type(e).__name__
                row.status, row.error = STATUS_FAILED, str(e)
                errors.append({"sample_id": record.sample_id, "score_name": name,
                               "error_type": kind, "message": str(e)})
                log.warning(f"{record.sample_id}/{name} failed: {e}")
            rows.append(row)
        return RecordResult(rows, list(s.masks_used.values()), errors)

    # --- スイープ用 ------------------------------------------------------
    def sample_view(self, record: EvalRecord) -> _Sample:
        """同じレコードを何度も問い合わせるときは同じ中間結果を使い回す"""
        if self._current is None or self._current.record is not record:
            self._current = _Sample(self, record)
        return self._current

    def condition_entropy(self, record: EvalRecord, condition: str, k_percent: Optional[float] = None,
                          band: Optional[Tuple[int, int]] = None) -> float:
        return self.sample_view(record).entropy(condition, k_percent, band)
