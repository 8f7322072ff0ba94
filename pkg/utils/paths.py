# utils/paths.py
import os
from pathlib import Path

# リポジトリのルート
BASE_DIR = Path(__file__).resolve().parents[1]
# 既定の保存先（キャッシュ・実行結果はここに統一）
STORAGE_DIR = BASE_DIR / "storage"


def cache_dir() -> Path:
    """トレースキャッシュのルート。VAUQ_CACHE_DIR があればそちらを優先"""
    override = os.getenv("VAUQ_CACHE_DIR")
    path = Path(override) if override else STORAGE_DIR / "cache"
    path.mkdir(parents=True, exist_ok=True)
    return path


def output_dir() -> Path:
    """実行結果の出力先。VAUQ_OUTPUT_DIR があればそちらを優先"""
    override = os.getenv("VAUQ_OUTPUT_DIR")
    path = Path(override) if override else STORAGE_DIR / "runs"
    path.mkdir(parents=True, exist_ok=True)
    return path
