# backends/toy.py
"""
卓上規模のオラクル検証用トイ多モーダルモデル。

各ステップのロジットは
    z = beta_img * g * onehot(a_img) + beta_prior * onehot(a_prior)
で、g は knockout 後に見えている根拠パッチ E の割合 (visible |E|) / |E|。
ロジットは位置に依存しないので、teacher forcing の各ステップは同じ分布になる。

注意（attention）は grounded_band の層ではヘッド一様に視覚質量の割合 rho を E へ、
1 - rho を E 以外へ配り、帯の外では視覚トークン全体に一様に配る。
視覚トークン以外（プロンプト等）へは常に 1 - visual_mass が割り当てられる。

image_ref に dict を渡すとサンプルごとのシーン（a_img, beta_img, evidence など）で
ToyConfig の既定値を上書きできる。それ以外の image_ref は既定シーン扱い。
"""
from __future__ import annotations

import re
import time
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from backends.base import (
    Backend,
    ConfigError,
    DataError,
    Decoding,
    DegenerateSampleError,
    GenerationTrace,
    MaskError,
    MaskSpec,
    VisualLayout,
    resolve_layers,
)
from utils.logs import get_logger

log = get_logger("toy")

# シーンとして image_ref から上書きできる項目
SCENE_KEYS = ("evidence", "a_img", "a_prior", "beta_img", "beta_prior", "answer_length")

_ANSWER_PAT = re.compile(r"Model answer:\s*(?P<ans>.*?)\.?\s*(?:\n|$)")
_TOKEN_PAT = re.compile(r"tok(?P<id>\d+)")


@dataclass(frozen=True)
class ToyConfig:
    vocab_size: int = 16
    grid: Tuple[int, int] = (4, 4)
    evidence: Tuple[int, ...] = (0, 1, 4, 5)
    a_img: int = 1
    a_prior: int = 2
    beta_img: float = 4.0
    beta_prior: float = 0.0
    answer_length: int = 1
    n_layers: int = 32
    n_heads: int = 4
    grounded_band: Tuple[int, int] = (10, 25)
    rho: float = 0.9
    visual_mass: float = 0.5
    hidden_dim: int = 8
    eos_token: Optional[int] = None
    forward_latency: float = 0.0
    seed: int = 0
    name: str = "toy"

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(v) for v in self.grid))
        object.__setattr__(self, "grounded_band", tuple(int(v) for v in self.grounded_band))
        object.__setattr__(self, "evidence", tuple(sorted({int(i) for i in self.evidence})))
        n = self.n_visual
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.grid[0] < 1 or self.grid[1] < 1:
            raise ConfigError(f"invalid grid {self.grid}")
        for name in ("a_img", "a_prior"):
            if not 0 <= getattr(self, name) < self.vocab_size:
                raise ConfigError(f"{name} outside vocabulary")
        if self.eos_token is not None and not 0 <= self.eos_token < self.vocab_size:
            raise ConfigError("eos_token outside vocabulary")
        if any(i < 0 or i >= n for i in self.evidence):
            raise ConfigError(f"evidence patch outside [0, {n})")
        if self.beta_img < 0 or self.beta_prior < 0:
            raise ConfigError("beta_img and beta_prior must be >= 0")
        if not self.evidence and self.beta_img > 0:
            raise ConfigError("empty evidence set with beta_img > 0")
        if self.answer_length < 1:
            raise ConfigError("answer_length must be >= 1")
        if self.n_layers < 1 or self.n_heads < 1 or self.hidden_dim < 1:
            raise ConfigError("n_layers, n_heads and hidden_dim must be >= 1")
        l_s, l_e = self.grounded_band
        if not 0 <= l_s <= l_e < self.n_layers:
            raise ConfigError(f"grounded_band {self.grounded_band} outside [0, {self.n_layers})")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must be in [0, 1]")
        if not 0.0 < self.visual_mass < 1.0:
            raise ConfigError("visual_mass must be in (0, 1)")
        if self.forward_latency < 0:
            raise ConfigError("forward_latency must be >= 0")

    @property
    def n_visual(self) -> int:
        return self.grid[0] * self.grid[1]

    def with_scene(self, image_ref: Any) -> "ToyConfig":
        """image_ref が dict ならシーンとして上書きした設定を返す"""
        if not isinstance(image_ref, dict):
            return self
        unknown = set(image_ref) - set(SCENE_KEYS)
        if unknown:
            raise ConfigError(f"unknown toy scene keys: {sorted(unknown)}")
        scene = dict(image_ref)
        if "evidence" in scene:
            scene["evidence"] = tuple(scene["evidence"])
        return replace(self, **scene)

    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["grounded_band"] = list(self.grounded_band)
        d["evidence"] = list(self.evidence)
        return d

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ToyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown toy config keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("grid", "grounded_band", "evidence"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


# ============================================================
# 閉形式の部品（テストのオラクルとは独立に numpy で計算）
# ============================================================
def visible_fraction(cfg: ToyConfig, mask: MaskSpec) -> float:
    if not cfg.evidence:
        return 0.0
    hidden = set(mask.indices)
    visible = sum(1 for i in cfg.evidence if i not in hidden)
    return visible / len(cfg.evidence)


def toy_logits(cfg: ToyConfig, g: float) -> np.ndarray:
    z = np.zeros(cfg.vocab_size, dtype=np.float64)
    z[cfg.a_img] += cfg.beta_img * g
    z[cfg.a_prior] += cfg.beta_prior
    return z


def log_softmax(z: np.ndarray) -> np.ndarray:
    return z - logsumexp(z)


def entropy_of(logp: np.ndarray) -> float:
    p = np.exp(logp)
    return max(float(-np.sum(p * logp)), 0.0)


def base_visual_row(cfg: ToyConfig, layer: int) -> np.ndarray:
    """knockout 前の視覚トークンへの注意（行和は visual_mass）"""
    n = cfg.n_visual
    l_s, l_e = cfg.grounded_band
    row = np.full(n, cfg.visual_mass / n)
    k = len(cfg.evidence)
    if l_s <= layer <= l_e and 0 < k < n:
        row[:] = cfg.visual_mass * (1.0 - cfg.rho) / (n - k)
        row[list(cfg.evidence)] = cfg.visual_mass * cfg.rho / k
    return row


def knockout_rows(cfg: ToyConfig, mask: MaskSpec, layers: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    マスクした視覚キーへのロジットを -inf にしてから正規化したのと同じ結果。
    生き残ったキーの重みは 1 / (1 - 消えた質量) 倍になる。
    戻り値: (視覚行 [len(layers), N], 非視覚質量 [len(layers)])
    """
    rows = np.zeros((len(layers), cfg.n_visual))
    other = np.zeros(len(layers))
    masked = list(mask.indices)
    for a, layer in enumerate(layers):
        row = base_visual_row(cfg, layer)
        removed = float(row[masked].sum()) if masked else 0.0
        scale = 1.0 / (1.0 - removed)
        row = row * scale
        row[masked] = 0.0
        rows[a] = row
        other[a] = (1.0 - cfg.visual_mass) * scale
    return rows, other


@lru_cache(maxsize=64)
def _embeddings(seed: int, vocab: int, n_visual: int, n_layers: int, dim: int):
    rng = np.random.default_rng(seed)
    tok = rng.normal(size=(vocab, dim))
    vis = rng.normal(size=(n_visual, dim))
    drift = 0.1 * rng.normal(size=(n_layers, dim))
    return tok, vis, drift


class ToyBackend(Backend):
    """ToyConfig から作る決定的なバックエンド"""

    def __init__(self, config: Optional[ToyConfig] = None):
        super().__init__()
        self.config = config or ToyConfig()
        self.backend_id = f"toy:{self.config.name}"
        self.n_layers = self.config.n_layers

    # --- 内部 ------------------------------------------------------------
    def _forward_pass(self, n: int = 1) -> None:
        self.counters.forward_passes += n
        if self.config.forward_latency > 0:
            time.sleep(self.config.forward_latency * n)

    def _check_tokens(self, cfg: ToyConfig, tokens: Sequence[int]) -> np.ndarray:
        arr = np.asarray(list(tokens), dtype=np.int64)
        if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
            raise DataError(f"response token outside vocabulary of size {cfg.vocab_size}")
        return arr

    def _check_mask(self, cfg: ToyConfig, mask: MaskSpec) -> None:
        if mask.n_tokens != cfg.n_visual:
            raise MaskError(f"mask built for {mask.n_tokens} visual tokens, backend has {cfg.n_visual}")

    def _hidden(self, cfg: ToyConfig, tokens: np.ndarray, visual_rows: np.ndarray,
                layers: Tuple[int, ...]) -> Tuple[np.ndarray, np.ndarray]:
        """
        生成位置: h_0 = 埋め込み, h_{l+1} = h_l + 0.5 * (注意で重み付けした視覚読み出し) + drift_l
        視覚位置: 層ごとに少しずつ伸びる固定ベクトル
        """
        tok, vis, drift = _embeddings(cfg.seed, cfg.vocab_size, cfg.n_visual, cfg.n_layers, cfg.hidden_dim)
        m = len(tokens)
        gen = np.zeros((cfg.n_layers + 1, m, cfg.hidden_dim))
        if m:
            gen[0] = tok[tokens]
            for layer in range(cfg.n_layers):
                read = visual_rows[layer] @ vis
                gen[layer + 1] = gen[layer] + 0.5 * read + drift[layer]
        scale = 1.0 + 0.05 * np.arange(cfg.n_layers + 1)
        visual = scale[:, None, None] * vis[None, :, :]
        sel = list(layers)
        return gen[sel], visual[sel]

    def _trace(self, cfg: ToyConfig, tokens: np.ndarray, mask: MaskSpec,
               attention_layers, hidden_layers, t0: float) -> GenerationTrace:
        g = visible_fraction(cfg, mask)
        logp = log_softmax(toy_logits(cfg, g))
        h = entropy_of(logp)
        m = len(tokens)
        att_layers = resolve_layers(attention_layers, cfg.n_layers)
        hid_layers = resolve_layers(hidden_layers, cfg.n_layers + 1) if hidden_layers is not None else ()

        rows, other = knockout_rows(cfg, mask, att_layers)
        attention = np.broadcast_to(rows[:, None, None, :],
                                    (len(att_layers), cfg.n_heads, m, cfg.n_visual))
        nonvisual = np.broadcast_to(other[:, None, None], (len(att_layers), cfg.n_heads, m))

        hidden_gen = hidden_vis = None
        if hid_layers:
            all_rows, _ = knockout_rows(cfg, mask, range(cfg.n_layers))
            hidden_gen, hidden_vis = self._hidden(cfg, tokens, all_rows, hid_layers)

        return GenerationTrace(
            tokens=tokens,
            entropies=np.full(m, h),
            logprobs=logp[tokens] if m else np.zeros(0),
            condition=mask.condition,
            mask=mask,
            n_layers=cfg.n_layers,
            n_visual=cfg.n_visual,
            attention_layers=att_layers,
            attention=attention,
            nonvisual_mass=nonvisual,
            hidden_layers=hid_layers,
            hidden_generated=hidden_gen,
            hidden_visual=hidden_vis,
            wall_time=self._clock() - t0,
            backend_id=self.backend_id,
            blank_mode="knockout",
            text=self.decode(tokens),
        )

    # --- 契約 ------------------------------------------------------------
    def generate(self, image_ref, prompt, decoding: Decoding, max_tokens: int,
                 *, attention_layers=None, hidden_layers=None) -> GenerationTrace:
        if max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        cfg = self.config.with_scene(image_ref)
        with self._exclusive():
            t0 = self._clock()
            self.counters.generations += 1
            logp = log_softmax(toy_logits(cfg, 1.0))
            rng = None
            if decoding.mode == "sample":
                rng = np.random.default_rng(decoding.seed)
                sample_p = np.exp(log_softmax(logp / decoding.temperature))
            tokens = []
            for _ in range(min(cfg.answer_length, max_tokens)):
                self._forward_pass()
                if rng is None:
                    tok = int(np.argmax(logp))
                else:
                    tok = int(rng.choice(cfg.vocab_size, p=sample_p))
                if cfg.eos_token is not None and tok == cfg.eos_token:
                    break
                tokens.append(tok)
            if not tokens:
                log.warning(f"degenerate generation (M=0) for scene {image_ref!r}")
            return self._trace(cfg, np.asarray(tokens, dtype=np.int64), MaskSpec.none(cfg.n_visual),
                               attention_layers, hidden_layers, t0)

    def rescore(self, image_ref, prompt, response_tokens, mask: MaskSpec,
                *, attention_layers=None, hidden_layers=None, blank_mode="knockout") -> GenerationTrace:
        cfg = self.config.with_scene(image_ref)
        tokens = self._check_tokens(cfg, response_tokens)
        if tokens.size == 0:
            raise DegenerateSampleError("rescore needs a non-empty response")
        self._check_mask(cfg, mask)
        if blank_mode not in ("knockout", "remove"):
            raise ConfigError(f"unknown blank_mode: {blank_mode}")
        # 画像トークン以外の位置情報を持たないので、除去は全 knockout と同一
        with self._exclusive():
            t0 = self._clock()
            self.counters.rescores += 1
            self._forward_pass()
            return self._trace(cfg, tokens, mask, attention_layers, hidden_layers, t0)

    def ask(self, image_ref, prompt: str) -> str:
        """自己申告の確信度。回答トークンが読めればその確率、なければ最大確率"""
        cfg = self.config.with_scene(image_ref)
        with self._exclusive():
            self.counters.queries += 1
            self._forward_pass()
            p = np.exp(log_softmax(toy_logits(cfg, 1.0)))
            conf = float(p.max())
            m = _ANSWER_PAT.search(prompt or "")
            if m:
                ids = [int(t) for t in _TOKEN_PAT.findall(m.group("ans"))]
                if ids and all(0 <= t < cfg.vocab_size for t in ids):
                    conf = float(np.prod(p[ids]))
            return f"{int(round(100 * conf))}"

    def decode(self, tokens: Sequence[int]) -> str:
        return " ".join(f"tok{int(t)}" for t in tokens)

    def layout(self, image_ref) -> VisualLayout:
        cfg = self.config.with_scene(image_ref)
        return VisualLayout(cfg.n_visual, cfg.grid)

    def describe(self) -> Dict[str, Any]:
        d = super().describe()
        d["config"] = self.config.to_dict()
        return d

    def fingerprint(self) -> Dict[str, Any]:
        # 遅延は値に影響しない
        cfg = self.config.to_dict()
        cfg.pop("forward_latency")
        return {"backend_id": self.backend_id, "config": cfg}
