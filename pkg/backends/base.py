# backends/base.py
"""
スコア対象モデルが満たすべき契約と、その入出力の型。

どのバックエンドも
  - generate : 自己回帰生成（条件 full）
  - rescore  : 固定した応答 y の teacher forcing 再スコア（視覚トークンの knockout 付き）
  - ask      : 2ターン目のテキスト問い合わせ（Verbalized Confidence 用）
  - decode   : トークン列 → 文字列
  - layout   : 視覚トークンのパッチ格子
を実装する。語彙全体の分布はバックエンドの外に出さず、ステップごとのスカラー
（エントロピーと実現トークンの対数確率）だけを GenerationTrace に載せる。
"""
from __future__ import annotations

import threading
import time
from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

SCHEMA_VERSION = "1.0"

# 数値誤差の許容幅
_EPS = 1e-9


# ============================================================
# 例外
# ============================================================
class VauqError(Exception):
    """このリポジトリの例外の基底。exit_code は CLI の終了コード"""
    exit_code = 4


class ConfigError(VauqError):
    exit_code = 2


class BackendError(VauqError):
    exit_code = 3


class DataError(VauqError):
    exit_code = 4


class MaskError(VauqError):
    pass


class LayerRangeError(VauqError):
    pass


class DegenerateSampleError(VauqError):
    """M = 0 の応答など、スコアが定義できないサンプル"""


class MissingConditionError(VauqError):
    pass


class InsufficientDataError(DataError):
    pass


class EquivalenceError(VauqError):
    pass


class UnavailableScoreError(VauqError):
    """名前はあるが実装していないスコア"""


# ============================================================
# 型
# ============================================================
@dataclass(frozen=True)
class StepStats:
    entropy: float            # nats（語彙全体のシャノンエントロピー）
    logprob_realized: float   # nats（実際に並んでいるトークンの対数確率）

    def __post_init__(self):
        if self.entropy < -_EPS:
            raise ValueError(f"entropy must be >= 0, got {self.entropy}")
        if self.logprob_realized > _EPS:
            raise ValueError(f"logprob_realized must be <= 0, got {self.logprob_realized}")


class MaskKind(str, Enum):
    CORE = "core"
    RANDOM = "random"
    GROUND_TRUTH = "ground_truth"
    BLANK = "blank"
    NONE = "none"


@dataclass(frozen=True)
class MaskSpec:
    """knockout する視覚トークン番号の集合"""
    kind: MaskKind
    indices: Tuple[int, ...]
    n_tokens: int
    flags: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", MaskKind(self.kind))
        idx = tuple(int(i) for i in self.indices)
        if len(set(idx)) != len(idx):
            raise MaskError(f"duplicate mask indices: {idx}")
        if any(i < 0 or i >= self.n_tokens for i in idx):
            raise MaskError(f"mask index out of range [0, {self.n_tokens}): {idx}")
        idx = tuple(sorted(idx))
        object.__setattr__(self, "indices", idx)
        if (self.kind == MaskKind.BLANK) != (len(idx) == self.n_tokens and self.n_tokens > 0):
            raise MaskError(f"kind=blank must cover all {self.n_tokens} tokens (got {len(idx)})")
        if (self.kind == MaskKind.NONE) != (len(idx) == 0):
            raise MaskError("kind=none must have no indices and vice versa")

    @classmethod
    def none(cls, n_tokens: int) -> "MaskSpec":
        return cls(MaskKind.NONE, (), n_tokens)

    @classmethod
    def blank(cls, n_tokens: int) -> "MaskSpec":
        return cls(MaskKind.BLANK, tuple(range(n_tokens)), n_tokens)

    @classmethod
    def from_indices(cls, kind, indices: Sequence[int], n_tokens: int,
                     flags: Tuple[str, ...] = ()) -> "MaskSpec":
        """空集合は none、全トークンは blank に畳み込んで作る"""
        idx = sorted({int(i) for i in indices})
        if not idx:
            return cls(MaskKind.NONE, (), n_tokens, flags)
        if len(idx) == n_tokens:
            return cls(MaskKind.BLANK, tuple(idx), n_tokens, flags)
        return cls(MaskKind(kind), tuple(idx), n_tokens, flags)

    @property
    def condition(self) -> str:
        if self.kind == MaskKind.NONE:
            return "full"
        if self.kind == MaskKind.BLANK:
            return "blank"
        return "masked"

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "indices": list(self.indices),
                "n_tokens": self.n_tokens, "flags": list(self.flags)}

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "MaskSpec":
        return cls(d["kind"], tuple(d.get("indices", ())), int(d["n_tokens"]),
                   tuple(d.get("flags", ())))


Box = Tuple[float, float, float, float]


@dataclass(frozen=True)
class VisualLayout:
    """視覚トークン列のパッチ格子（行優先: i = row * cols + col）"""
    n_tokens: int
    grid: Tuple[int, int]
    evidence_regions: Tuple[Box, ...] = ()

    def __post_init__(self):
        rows, cols = (int(v) for v in self.grid)
        object.__setattr__(self, "grid", (rows, cols))
        if rows * cols != self.n_tokens:
            raise ConfigError(f"grid {rows}x{cols} does not match n_tokens={self.n_tokens}")
        boxes = tuple(tuple(float(v) for v in b) for b in (self.evidence_regions or ()))
        for x0, y0, x1, y1 in boxes:
            if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
                raise DataError(f"invalid evidence box {(x0, y0, x1, y1)}")
        object.__setattr__(self, "evidence_regions", boxes)

    def with_evidence(self, boxes: Optional[Sequence[Sequence[float]]]) -> "VisualLayout":
        return replace(self, evidence_regions=tuple(tuple(b) for b in (boxes or ())))

    def patch_centers(self) -> np.ndarray:
        """各パッチ中心の正規化座標 [N, 2] (x, y)"""
        rows, cols = self.grid
        r, c = np.divmod(np.arange(self.n_tokens), cols)
        return np.stack([(c + 0.5) / cols, (r + 0.5) / rows], axis=1)

    def evidence_patch_indices(self) -> List[int]:
        """中心点がいずれかの根拠ボックスに入るパッチ（境界は含む）"""
        centers = self.patch_centers()
        inside = np.zeros(self.n_tokens, dtype=bool)
        for x0, y0, x1, y1 in self.evidence_regions:
            inside |= ((centers[:, 0] >= x0) & (centers[:, 0] <= x1)
                       & (centers[:, 1] >= y0) & (centers[:, 1] <= y1))
        return [int(i) for i in np.flatnonzero(inside)]


@dataclass(frozen=True)
class Decoding:
    mode: str = "greedy"          # greedy | sample
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ConfigError(f"unknown decoding mode: {self.mode}")
        if self.mode == "sample" and self.temperature <= 0:
            raise ConfigError("sampling temperature must be > 0")

    @classmethod
    def greedy(cls) -> "Decoding":
        return cls("greedy")

    @classmethod
    def sample(cls, temperature: float = 1.0, seed: int = 0) -> "Decoding":
        return cls("sample", float(temperature), int(seed))

    def to_dict(self) -> Dict[str, Any]:
        if self.mode == "greedy":
            return {"mode": "greedy"}
        return {"mode": self.mode, "temperature": self.temperature, "seed": self.seed}


def _frozen(arr, dtype) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class GenerationTrace:
    """
    1回のモデル実行の記録。構築後は不変（配列は書き込み禁止）。

    attention[a][h][j][i] は attention_layers[a] 層・ヘッド h における
    生成トークン y_j から視覚トークン v_i への注意重み。
    nonvisual_mass[a][h][j] は同じ行の視覚トークン以外への重みの合計。
    hidden_generated[b] / hidden_visual[b] は hidden_layers[b]（0 = 埋め込み層出力）の隠れ状態。
    """
    tokens: np.ndarray
    entropies: np.ndarray
    logprobs: np.ndarray
    condition: str
    mask: MaskSpec
    n_layers: int
    n_visual: int
    attention_layers: Tuple[int, ...] = ()
    attention: Optional[np.ndarray] = None
    nonvisual_mass: Optional[np.ndarray] = None
    hidden_layers: Tuple[int, ...] = ()
    hidden_generated: Optional[np.ndarray] = None
    hidden_visual: Optional[np.ndarray] = None
    wall_time: float = 0.0
    backend_id: str = ""
    blank_mode: str = "knockout"
    text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", _frozen(self.tokens, np.int64).reshape(-1))
        object.__setattr__(self, "entropies", _frozen(self.entropies, np.float64).reshape(-1))
        object.__setattr__(self, "logprobs", _frozen(self.logprobs, np.float64).reshape(-1))
        m = len(self.tokens)
        if len(self.entropies) != m or len(self.logprobs) != m:
            raise ValueError("steps must have exactly one entry per generated token")
        object.__setattr__(self, "attention_layers", tuple(int(x) for x in self.attention_layers))
        object.__setattr__(self, "hidden_layers", tuple(int(x) for x in self.hidden_layers))
        # 注意は 32bit で保持（キャッシュ往復で値が変わらないように）
        for name in ("attention", "nonvisual_mass", "hidden_generated", "hidden_visual"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, _frozen(value, np.float32))
        if self.attention is not None and self.attention.shape[0] != len(self.attention_layers):
            raise ValueError("attention does not match attention_layers")

    # --- 派生値 ----------------------------------------------------------
    @property
    def length(self) -> int:
        return int(len(self.tokens))

    @property
    def degenerate(self) -> bool:
        return self.length == 0

    @property
    def steps(self) -> Tuple[StepStats, ...]:
        return tuple(StepStats(max(float(h), 0.0), min(float(lp), 0.0))
                     for h, lp in zip(self.entropies, self.logprobs))

    @property
    def sequence_logprob(self) -> float:
        return float(np.sum(self.logprobs))

    @property
    def n_heads(self) -> int:
        if self.attention is None:
            return 0
        return int(self.attention.shape[1])

    def attention_positions(self, layers: Sequence[int]) -> List[int]:
        """層番号 → attention 配列内の位置。書き出していない層は LayerRangeError"""
        pos = {layer: k for k, layer in enumerate(self.attention_layers)}
        missing = [layer for layer in layers if layer not in pos]
        if self.attention is None or missing:
            raise LayerRangeError(
                f"attention not exported for layers {missing or list(layers)} "
                f"(exported: {list(self.attention_layers)})")
        return [pos[layer] for layer in layers]

    def hidden_positions(self, layers: Sequence[int]) -> List[int]:
        pos = {layer: k for k, layer in enumerate(self.hidden_layers)}
        missing = [layer for layer in layers if layer not in pos]
        if self.hidden_generated is None or missing:
            raise LayerRangeError(
                f"hidden states not exported for layers {missing or list(layers)} "
                f"(exported: {list(self.hidden_layers)})")
        return [pos[layer] for layer in layers]


# ============================================================
# 実行回数カウンタ
# ============================================================
@dataclass
class PassCounter:
    generations: int = 0
    rescores: int = 0
    queries: int = 0
    forward_passes: int = 0

    def snapshot(self) -> Dict[str, int]:
        return {"generations": self.generations, "rescores": self.rescores,
                "queries": self.queries, "forward_passes": self.forward_passes}

    @property
    def calls(self) -> int:
        return self.generations + self.rescores + self.queries


def counter_delta(before: Dict[str, int], after: Dict[str, int]) -> Dict[str, int]:
    return {k: after[k] - before.get(k, 0) for k in after}


# ============================================================
# バックエンド契約
# ============================================================
class Backend(ABC):
    """
    1インスタンスにつき同時に1呼び出しまで（single-owner）。
    並列化したい場合はインスタンスを複数作るか、呼び出しをキューに積む。
    """
    backend_id: str = "backend"
    n_layers: int = 0
    supports_removal: bool = False

    def __init__(self):
        self.counters = PassCounter()
        self._busy = threading.Lock()

    @contextmanager
    def _exclusive(self) -> Iterator[None]:
        if not self._busy.acquire(blocking=False):
            raise BackendError(f"{self.backend_id}: another call is already in flight")
        try:
            yield
        finally:
            self._busy.release()

    @staticmethod
    def _clock() -> float:
        return time.perf_counter()

    @abstractmethod
    def generate(self, image_ref: Any, prompt: str, decoding: Decoding, max_tokens: int,
                 *, attention_layers: Optional[Sequence[int]] = None,
                 hidden_layers: Optional[Sequence[int]] = None) -> GenerationTrace:
        ...

    @abstractmethod
    def rescore(self, image_ref: Any, prompt: str, response_tokens: Sequence[int], mask: MaskSpec,
                *, attention_layers: Optional[Sequence[int]] = None,
                hidden_layers: Optional[Sequence[int]] = None,
                blank_mode: str = "knockout") -> GenerationTrace:
        ...

    @abstractmethod
    def ask(self, image_ref: Any, prompt: str) -> str:
        ...

    @abstractmethod
    def decode(self, tokens: Sequence[int]) -> str:
        ...

    @abstractmethod
    def layout(self, image_ref: Any) -> VisualLayout:
        ...

    def describe(self) -> Dict[str, Any]:
        return {"backend_id": self.backend_id, "n_layers": self.n_layers,
                "supports_removal": self.supports_removal}

    def fingerprint(self) -> Dict[str, Any]:
        """出力を左右する設定。トレースキャッシュのキーに入る"""
        return self.describe()


def resolve_layers(requested: Optional[Sequence[int]], n_points: int) -> Tuple[int, ...]:
    """None は全層、それ以外は範囲内の層だけを昇順で"""
    if requested is None:
        return tuple(range(n_points))
    return tuple(sorted({int(x) for x in requested if 0 <= int(x) < n_points}))
