# backends/__init__.py
from typing import Any, Dict, Optional

from backends.base import Backend, BackendError, ConfigError
from backends.toy import ToyBackend, ToyConfig


def toy_model(config: Optional[ToyConfig] = None) -> ToyBackend:
    return ToyBackend(config)


def load_backend(spec: Optional[Dict[str, Any]]) -> Backend:
    """
    RunConfig.backend の辞書からバックエンドを作る。
      {"kind": "toy", "config": {...ToyConfig...}}
      {"kind": "llava-hf", "model_id": "...", "device": "cuda", "grid": [24, 24]}
    """
    spec = dict(spec or {"kind": "toy"})
    kind = spec.pop("kind", "toy")
    if kind == "toy":
        return ToyBackend(ToyConfig.from_dict(spec.get("config", {})))
    if kind == "llava-hf":
        from backends.llava_hf import LlavaHFBackend
        try:
            return LlavaHFBackend(**spec)
        except TypeError as e:
            raise ConfigError(f"invalid llava-hf backend options: {e}") from e
    raise ConfigError(f"unknown backend kind: {kind}")


__all__ = ["Backend", "BackendError", "ToyBackend", "ToyConfig", "load_backend", "toy_model"]
