# utils/config.py
"""
実行設定（RunConfig）の読み込み・上書き・保存。

優先順位: CLI フラグ > 設定ファイル(JSON) > プリセット(BACKEND_DEFAULTS) > 既定値
環境変数は .env から load_dotenv() で読み込む（呼び出しはエントリスクリプト側）。
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from backends.base import ConfigError
from utils.paths import cache_dir, output_dir

# --- バックエンド系列ごとの推奨ハイパーパラメータ -----------------------------
# (layer_band, {dataset: (alpha, k_percent)})
BACKEND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "llava-1.5-7b": {
        "layer_band": (10, 25),
        "datasets": {"vilp": (0.6, 60), "mmvet": (0.6, 40), "visualcot": (0.3, 60), "cvbench": (1.2, 30)},
    },
    "llava-1.5-13b": {
        "layer_band": (10, 35),
        "datasets": {"vilp": (1.5, 20), "mmvet": (0.4, 30), "visualcot": (0.2, 60), "cvbench": (1.2, 40)},
    },
    "qwen2.5-vl-7b": {
        "layer_band": (12, 26),
        "datasets": {"vilp": (0.8, 80), "mmvet": (0.1, 60), "visualcot": (0.1, 50), "cvbench": (2.0, 60)},
    },
    "internvl3.5-8b": {
        "layer_band": (10, 25),
        "datasets": {"vilp": (0.5, 70), "mmvet": (0.1, 50), "visualcot": (0.1, 50), "cvbench": (0.2, 60)},
    },
}

DEFAULT_ALPHA = 0.6
DEFAULT_K_PERCENT = 60
DEFAULT_LAYER_BAND = (10, 25)
DEFAULT_SCORES = ("entropy", "vauq")


def resolve_preset(name: str) -> Tuple[float, int, Tuple[int, int]]:
    """'llava-1.5-7b/vilp' のようなプリセット名 → (alpha, k_percent, layer_band)"""
    family, _, dataset = name.partition("/")
    if family not in BACKEND_DEFAULTS:
        raise ConfigError(f"unknown preset family: {family} (known: {sorted(BACKEND_DEFAULTS)})")
    entry = BACKEND_DEFAULTS[family]
    dataset = dataset or "vilp"
    if dataset not in entry["datasets"]:
        raise ConfigError(f"preset {family} has no dataset {dataset}")
    alpha, k = entry["datasets"][dataset]
    return alpha, k, tuple(entry["layer_band"])


def _float_range(start: float, stop: float, step: float) -> List[float]:
    n = int(round((stop - start) / step))
    return [round(start + i * step, 10) for i in range(n + 1)]


@dataclass
class SweepSettings:
    alphas: List[float] = field(default_factory=lambda: _float_range(0.0, 5.0, 0.1))
    ks: List[int] = field(default_factory=lambda: list(range(0, 101, 10)))
    bands: List[Tuple[int, int]] = field(default_factory=lambda: [DEFAULT_LAYER_BAND])
    val_fraction: float = 0.2


@dataclass
class RunConfig:
    backend: Dict[str, Any] = field(default_factory=lambda: {"kind": "toy"})
    dataset: Optional[str] = None
    scores: List[str] = field(default_factory=lambda: list(DEFAULT_SCORES))
    preset: Optional[str] = None
    alpha: float = DEFAULT_ALPHA
    k_percent: float = DEFAULT_K_PERCENT
    layer_band: Tuple[int, int] = DEFAULT_LAYER_BAND
    mask_kind: str = "core"
    blank_mode: str = "knockout"
    decoding: Dict[str, Any] = field(default_factory=lambda: {"mode": "greedy"})
    max_tokens: int = 128
    n_samples: int = 5
    sample_temperature: float = 1.0
    sample_seed: int = 0
    svar_layers: Tuple[int, int] = (5, 18)
    lens_text_layer: Optional[int] = None
    lens_image_layer: Optional[int] = None
    embed_layer: Optional[int] = None
    eigen_ridge: float = 1e-3
    random_seed: int = 0
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    sweep: SweepSettings = field(default_factory=SweepSettings)
    cache_dir: Optional[str] = None
    output_dir: Optional[str] = None
    use_cache: bool = True
    jobs: int = 1

    def __post_init__(self):
        self.layer_band = tuple(int(v) for v in self.layer_band)
        self.svar_layers = tuple(int(v) for v in self.svar_layers)
        if isinstance(self.sweep, dict):
            self.sweep = _sweep_from_dict(self.sweep)

    # --- 検証 ------------------------------------------------------------
    def validate(self) -> "RunConfig":
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0 <= self.k_percent <= 100:
            raise ConfigError(f"k_percent must be in [0, 100], got {self.k_percent}")
        if len(self.layer_band) != 2 or self.layer_band[0] > self.layer_band[1]:
            raise ConfigError(f"invalid layer_band {self.layer_band}")
        if self.mask_kind not in ("core", "random", "ground_truth", "blank"):
            raise ConfigError(f"unknown mask_kind: {self.mask_kind}")
        if self.blank_mode not in ("knockout", "remove"):
            raise ConfigError(f"unknown blank_mode: {self.blank_mode}")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")
        sw = self.sweep
        if not sw.alphas or not sw.ks or not sw.bands:
            raise ConfigError("sweep grids must be nonempty")
        if not 0.0 < sw.val_fraction < 1.0:
            raise ConfigError("sweep.val_fraction must be in (0, 1)")
        if self.dataset is not None and not Path(self.dataset).exists():
            raise ConfigError(f"dataset not found: {self.dataset}")
        return self

    # --- パス ------------------------------------------------------------
    def resolved_cache_dir(self) -> Path:
        if self.cache_dir:
            path = Path(self.cache_dir)
            path.mkdir(parents=True, exist_ok=True)
            return path
        return cache_dir()

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            path = Path(self.output_dir)
            path.mkdir(parents=True, exist_ok=True)
            return path
        return output_dir()

    # --- 直列化 ----------------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        d = asdict(self)
        d["layer_band"] = list(self.layer_band)
        d["svar_layers"] = list(self.svar_layers)
        d["sweep"]["bands"] = [list(b) for b in self.sweep.bands]
        return d

    def save(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=2, sort_keys=True)
            f.write("\n")


def _sweep_from_dict(d: Dict[str, Any]) -> SweepSettings:
    known = {f.name for f in fields(SweepSettings)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown sweep keys: {sorted(unknown)}")
    kw = dict(d)
    if "bands" in kw:
        kw["bands"] = [tuple(int(v) for v in b) for b in kw["bands"]]
    return SweepSettings(**kw)


def config_from_dict(d: Dict[str, Any]) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kw = dict(d)
    preset = kw.get("preset")
    if preset:
        # プリセットは明示されていない項目だけを埋める
        alpha, k, band = resolve_preset(preset)
        kw.setdefault("alpha", alpha)
        kw.setdefault("k_percent", k)
        kw.setdefault("layer_band", band)
    try:
        return RunConfig(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid config: {e}") from e


def load_run_config(path: Optional[str], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """JSON 設定を読み、None 以外の上書き値を適用して検証済みの RunConfig を返す"""
    data: Dict[str, Any] = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(p, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
    for key, value in (overrides or {}).items():
        if value is not None:
            data[key] = value
    return config_from_dict(data).validate()
