# scoring/baselines.py
"""
比較用の自己評価スコア群。どれも「大きいほどハルシネーションらしい」向きに揃える。

単一トレースで計算するもの:
  perplexity / svar / contextual_lens / chain_of_embeddings
2ターン目の問い合わせ:
  verbalized_confidence
複数サンプル（SampleSet）で計算するもの:
  eigenscore / semantic_entropy
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from backends.base import (
    Backend,
    DataError,
    Decoding,
    DegenerateSampleError,
    EquivalenceError,
    GenerationTrace,
    LayerRangeError,
    StepStats,
    UnavailableScoreError,
)
from utils.parser import normalize_answer, parse_confidence

VERBALIZED_PROMPT = (
    "Question: {question}.\n"
    "Model answer: {model_answer}.\n"
    "On a scale of 0 to 100, how confident are you about the correctness of this answer? "
    "Respond with only a single number."
)
VERBALIZED_FALLBACK = 50
PARSE_FAILURE = "parse_failure"
ZERO_NORM = "zero_norm"
EMPTY_SAMPLE = "empty_sample"

DEFAULT_SVAR_LAYERS = (5, 18)
DEFAULT_EIGEN_RIDGE = 1e-3
DEFAULT_N_SAMPLES = 5


@dataclass(frozen=True)
class Scored:
    """値と、計算途中で立ったフラグ"""
    value: float
    flags: Tuple[str, ...] = ()


@dataclass
class SampleSet:
    """同じ (画像, 質問) から独立にサンプルした K 個の応答"""
    texts: List[str]
    log_probs: Optional[List[float]] = None
    embeddings: Optional[np.ndarray] = None
    responses: List[GenerationTrace] = field(default_factory=list)

    def __post_init__(self):
        if self.log_probs is not None and len(self.log_probs) != len(self.texts):
            raise DataError("log_probs must have one entry per response")
        if self.embeddings is not None:
            emb = np.asarray(self.embeddings, dtype=np.float64)
            if emb.ndim != 2 or emb.shape[0] != len(self.texts):
                raise DataError(f"embeddings must be [K, d] with K={len(self.texts)}, got {emb.shape}")
            self.embeddings = emb

    @property
    def size(self) -> int:
        return len(self.texts)

    @property
    def flags(self) -> Tuple[str, ...]:
        """空の応答が混じっていれば EMPTY_SAMPLE（埋め込みはゼロベクトルになっている）"""
        return (EMPTY_SAMPLE,) if any(r.degenerate for r in self.responses) else ()


# ============================================================
# 単一トレース
# ============================================================
def perplexity(steps) -> float:
    """exp(平均負対数尤度)。StepStats 列か実現トークンの対数確率列を受け取る"""
    lps = [s.logprob_realized if isinstance(s, StepStats) else float(s) for s in steps]
    if not lps:
        raise DegenerateSampleError("perplexity of an empty response")
    return float(np.exp(-np.mean(lps)))


def svar(trace: GenerationTrace, layer_range: Tuple[int, int] = DEFAULT_SVAR_LAYERS) -> float:
    """視覚注意の総量（ヘッド平均・層和・視覚トークン和）のトークン平均を符号反転"""
    if trace.degenerate:
        raise DegenerateSampleError("svar of an empty response")
    l_s, l_e = layer_range
    pos = trace.attention_positions(range(l_s, l_e + 1))
    att = trace.attention[pos].astype(np.float64)          # [L, H, M, N]
    per_token = att.sum(axis=(0, 3)).mean(axis=0)          # ヘッド平均 → [M]
    return -float(per_token.mean())


def _cosine_rows(matrix: np.ndarray, vec: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1) * np.linalg.norm(vec)
    dots = matrix @ vec
    out = np.zeros(len(matrix))
    ok = norms > 0
    out[ok] = dots[ok] / norms[ok]
    return out


def contextual_lens(trace: GenerationTrace, text_layer: int, image_layer: int) -> Scored:
    if trace.degenerate:
        raise DegenerateSampleError("contextual lens of an empty response")
    (pt,) = trace.hidden_positions([text_layer])
    (pi,) = trace.hidden_positions([image_layer])
    text_vec = trace.hidden_generated[pt].astype(np.float64).mean(axis=0)
    if np.linalg.norm(text_vec) == 0:
        return Scored(0.0, (ZERO_NORM,))
    visual = trace.hidden_visual[pi].astype(np.float64)
    return Scored(-float(_cosine_rows(visual, text_vec).max()))


def chain_of_embeddings_states(states: np.ndarray) -> float:
    """層ごとの平均隠れ状態 [L+1, d] から (1/L) Σ (‖Δh‖ - 角度)"""
    h = np.asarray(states, dtype=np.float64)
    if h.ndim != 2 or len(h) < 2:
        raise LayerRangeError("chain of embeddings needs at least two layers")
    total = 0.0
    for prev, nxt in zip(h[:-1], h[1:]):
        norm = float(np.linalg.norm(nxt - prev))
        denom = float(np.linalg.norm(nxt) * np.linalg.norm(prev))
        angle = 0.0
        if denom > 0:
            angle = float(np.arccos(np.clip(np.dot(nxt, prev) / denom, -1.0, 1.0)))
        total += norm - angle
    return total / (len(h) - 1)


def chain_of_embeddings(trace: GenerationTrace) -> float:
    if trace.degenerate:
        raise DegenerateSampleError("chain of embeddings of an empty response")
    pos = trace.hidden_positions(range(trace.n_layers + 1))
    states = trace.hidden_generated[pos].astype(np.float64).mean(axis=1)
    return chain_of_embeddings_states(states)


# ============================================================
# 2ターン目の問い合わせ
# ============================================================
def verbalized_prompt(question: str, model_answer: str) -> str:
    return VERBALIZED_PROMPT.format(question=question, model_answer=model_answer)


def verbalized_score_from_reply(reply: str) -> Scored:
    value = parse_confidence(reply)
    if value is None:
        return Scored(-VERBALIZED_FALLBACK / 100.0, (PARSE_FAILURE,))
    return Scored(-value / 100.0)


def verbalized_confidence(backend: Backend, question: str, answer: str, image_ref: Any = None) -> Scored:
    reply = backend.ask(image_ref, verbalized_prompt(question, answer))
    return verbalized_score_from_reply(reply)


# ============================================================
# 複数サンプル
# ============================================================
def draw_samples(backend: Backend, image_ref: Any, prompt: str, *, n_samples: int = DEFAULT_N_SAMPLES,
                 temperature: float = 1.0, seed: int = 0, max_tokens: int = 128,
                 embed_layer: Optional[int] = None,
                 through: Optional[Callable[[int, Decoding, Callable[[], GenerationTrace]], GenerationTrace]] = None
                 ) -> SampleSet:
    """
    seed, seed+1, ... で K 回独立に生成する（呼び出し順に依存しない）。
    through(i, decoding, generate) を渡すと i 番目の生成をそれ経由で行う（キャッシュなど）。
    """
    layer = backend.n_layers // 2 if embed_layer is None else embed_layer
    traces = []
    for i in range(n_samples):
        dec = Decoding.sample(temperature, seed + i)

        def generate(dec=dec):
            return backend.generate(image_ref, prompt, dec, max_tokens, attention_layers=(), hidden_layers=[layer])

        traces.append(generate() if through is None else through(i, dec, generate))
    return sample_set_from_traces(traces, layer)


def sample_set_from_traces(traces: Sequence[GenerationTrace], embed_layer: int) -> SampleSet:
    """各応答の埋め込みは指定層の生成位置の平均（空応答はゼロベクトル）"""
    texts, lps, embs = [], [], []
    for trace in traces:
        texts.append(trace.text)
        lps.append(trace.sequence_logprob)
        if trace.hidden_generated is not None and embed_layer in trace.hidden_layers:
            (b,) = trace.hidden_positions([embed_layer])
            hg = trace.hidden_generated[b].astype(np.float64)
            embs.append(hg.mean(axis=0) if len(hg) else np.zeros(hg.shape[-1]))
    embeddings = np.stack(embs) if embs and len(embs) == len(traces) else None
    return SampleSet(texts, lps, embeddings, list(traces))


def eigenscore(sample_set, ridge: float = DEFAULT_EIGEN_RIDGE) -> float:
    """
    中心化した埋め込み Z [K, d] から C = Z^T Z / K + ridge*I を作り、
    固有値の対数和を K で割る。d > K のときは Gram 行列 Z Z^T / K の固有値から
    同じ値を求める（残り d - K 個の固有値は ridge）。
    """
    emb = sample_set.embeddings if isinstance(sample_set, SampleSet) else sample_set
    if emb is None:
        raise DataError("eigenscore needs embeddings")
    z = np.asarray(emb, dtype=np.float64)
    if z.ndim != 2:
        raise DataError(f"embeddings must be [K, d], got shape {z.shape}")
    k, d = z.shape
    if k < 2:
        raise DataError(f"eigenscore needs at least 2 responses, got {k}")
    z = z - z.mean(axis=0, keepdims=True)
    with np.errstate(divide="ignore"):
        if d <= k:
            eig = np.clip(np.linalg.eigvalsh(z.T @ z / k), 0.0, None)
            return float(np.sum(np.log(eig + ridge)) / k)
        eig = np.clip(np.linalg.eigvalsh(z @ z.T / k), 0.0, None)
        return float((np.sum(np.log(eig + ridge)) + (d - k) * np.log(ridge)) / k)


def default_equivalence(a: str, b: str) -> bool:
    return normalize_answer(a) == normalize_answer(b)


def cluster_responses(texts: Sequence[str], equiv: Callable[[str, str], bool] = default_equivalence) -> List[List[int]]:
    """同値判定で union-find。判定した組はすべて対称性を確認する"""
    n = len(texts)
    parent = list(range(n))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(n):
        for j in range(i + 1, n):
            forward = bool(equiv(texts[i], texts[j]))
            if forward != bool(equiv(texts[j], texts[i])):
                raise EquivalenceError(f"equivalence oracle is not symmetric on ({texts[i]!r}, {texts[j]!r})")
            if forward:
                pi, pj = find(i), find(j)
                if pi != pj:
                    parent[pj] = pi

    clusters: dict = {}
    for i in range(n):
        clusters.setdefault(find(i), []).append(i)
    return list(clusters.values())


def cluster_probabilities(clusters: List[List[int]], log_probs: Optional[Sequence[float]]) -> np.ndarray:
    n = sum(len(c) for c in clusters)
    if log_probs is None:
        return np.array([len(c) / n for c in clusters])
    lp = np.asarray(log_probs, dtype=np.float64)
    log_z = logsumexp(lp)
    return np.array([np.exp(logsumexp(lp[c]) - log_z) for c in clusters])


def semantic_entropy(sample_set: SampleSet, equiv: Callable[[str, str], bool] = default_equivalence,
                     weighted: bool = True) -> float:
    if sample_set.size < 1:
        raise DataError("semantic entropy needs at least one response")
    clusters = cluster_responses(sample_set.texts, equiv)
    p = cluster_probabilities(clusters, sample_set.log_probs if weighted else None)
    p = p[p > 0]
    return float(max(-np.sum(p * np.log(p)), 0.0))


def vl_uncertainty(*args, **kwargs) -> float:
    raise UnavailableScoreError("vl_uncertainty needs external image/text perturbation and an entailment model")
