# utils/cache.py
"""
GenerationTrace のディスクキャッシュ。

1ファイル = 1 (sample_id, condition)。ファイル名は
    {sample_id}__{condition}__{key先頭16桁}.npz
キーは (backend_id + 設定の fingerprint, decoding, prompt, image_ref, mask indices, 書き出し層) の sha1。
npz 内の "header" に schema_version などのメタ情報を JSON で持つ自己記述形式。
同じキーへの書き込みは1回だけ（既存ファイルは上書きしない）。
"""
from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from backends.base import SCHEMA_VERSION, GenerationTrace, MaskSpec
from utils.logs import get_logger

log = get_logger("cache")

_UNSAFE = re.compile(r"[^A-Za-z0-9._-]+")


def canonical_json(obj: Any) -> str:
    """キー順・区切りを固定した JSON（ハッシュ用）"""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=str)


def generate_key(*parts: Any) -> str:
    return hashlib.sha1(canonical_json(list(parts)).encode("utf-8")).hexdigest()


def _safe(name: str) -> str:
    return _UNSAFE.sub("_", str(name)) or "_"


class TraceCache:
    """read-shared / write-once のトレースキャッシュ"""

    def __init__(self, root: Optional[Path], enabled: bool = True):
        self.root = Path(root) if root is not None else None
        self.enabled = enabled and root is not None
        self.hits = 0
        self.misses = 0
        if self.enabled:
            self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, sample_id: str, condition: str, key: str, suffix: str) -> Path:
        return self.root / f"{_safe(sample_id)}__{_safe(condition)}__{key[:16]}{suffix}"

    def _write_atomic(self, path: Path, writer) -> None:
        fd, tmp = tempfile.mkstemp(dir=str(self.root), suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                writer(f)
            os.replace(tmp, path)
        except Exception:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    # --- トレース ---------------------------------------------------------
    def load(self, sample_id: str, condition: str, key: str) -> Optional[GenerationTrace]:
        if not self.enabled:
            return None
        path = self._path(sample_id, condition, key, ".npz")
        if not path.exists():
            self.misses += 1
            return None
        try:
            trace = trace_from_npz(path)
        except Exception as e:
            log.warning(f"unreadable cache entry {path.name}: {e}")
            self.misses += 1
            return None
        self.hits += 1
        return trace

    def store(self, sample_id: str, condition: str, key: str, trace: GenerationTrace) -> None:
        if not self.enabled:
            return
        path = self._path(sample_id, condition, key, ".npz")
        if path.exists():
            return
        self._write_atomic(path, lambda f: np.savez(f, **trace_to_arrays(trace)))

    # --- 2ターン目の返答 --------------------------------------------------
    def load_reply(self, sample_id: str, key: str) -> Optional[str]:
        if not self.enabled:
            return None
        path = self._path(sample_id, "ask", key, ".json")
        if not path.exists():
            self.misses += 1
            return None
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        if data.get("schema_version") != SCHEMA_VERSION:
            self.misses += 1
            return None
        self.hits += 1
        return data["reply"]

    def store_reply(self, sample_id: str, key: str, reply: str) -> None:
        if not self.enabled:
            return
        path = self._path(sample_id, "ask", key, ".json")
        if path.exists():
            return
        payload = json.dumps({"schema_version": SCHEMA_VERSION, "reply": reply}, ensure_ascii=False)
        self._write_atomic(path, lambda f: f.write(payload.encode("utf-8")))


# ============================================================
# 直列化
# ============================================================
_OPTIONAL_ARRAYS = ("attention", "nonvisual_mass", "hidden_generated", "hidden_visual")


def trace_to_arrays(trace: GenerationTrace) -> Dict[str, np.ndarray]:
    header = {
        "schema_version": SCHEMA_VERSION,
        "condition": trace.condition,
        "mask": trace.mask.to_dict(),
        "n_layers": trace.n_layers,
        "n_visual": trace.n_visual,
        "wall_time": trace.wall_time,
        "backend_id": trace.backend_id,
        "blank_mode": trace.blank_mode,
        "text": trace.text,
        "present": [name for name in _OPTIONAL_ARRAYS if getattr(trace, name) is not None],
    }
    arrays = {
        "header": np.array(canonical_json(header)),
        "tokens": trace.tokens.astype(np.int64),
        "entropies": trace.entropies.astype(np.float64),
        "logprobs": trace.logprobs.astype(np.float64),
        "attention_layers": np.asarray(trace.attention_layers, dtype=np.int64),
        "hidden_layers": np.asarray(trace.hidden_layers, dtype=np.int64),
    }
    for name in header["present"]:
        arrays[name] = getattr(trace, name).astype(np.float32)
    return arrays


def trace_from_npz(path: Path) -> GenerationTrace:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"schema {header.get('schema_version')} != {SCHEMA_VERSION}")
        optional = {name: data[name] for name in header["present"]}
        return GenerationTrace(
            tokens=data["tokens"],
            entropies=data["entropies"],
            logprobs=data["logprobs"],
            condition=header["condition"],
            mask=MaskSpec.from_dict(header["mask"]),
            n_layers=header["n_layers"],
            n_visual=header["n_visual"],
            attention_layers=tuple(data["attention_layers"].tolist()),
            hidden_layers=tuple(data["hidden_layers"].tolist()),
            wall_time=header["wall_time"],
            backend_id=header["backend_id"],
            blank_mode=header["blank_mode"],
            text=header["text"],
            **optional,
        )
