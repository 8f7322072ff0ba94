# utils/logs.py
"""
ログ出力の共通設定。

従来の print ベースのタグ付きログ（例: "[dispatch][WARN] ..."）と同じ見た目を
標準 logging の上で再現する。INFO はタグのみ、WARN 以上はレベルタグを付ける。
"""
import logging
import os
import sys

_ROOT = "vauq"

_LEVEL_TAGS = {
    logging.DEBUG: "DEBUG",
    logging.WARNING: "WARN",
    logging.ERROR: "ERROR",
    logging.CRITICAL: "ERROR",
}


class TagFormatter(logging.Formatter):
    """'[tag] msg' / '[tag][WARN] msg' 形式のフォーマッタ"""

    def format(self, record: logging.LogRecord) -> str:
        tag = record.name.rsplit(".", 1)[-1]
        level = _LEVEL_TAGS.get(record.levelno)
        prefix = f"[{tag}][{level}]" if level else f"[{tag}]"
        msg = record.getMessage()
        if record.exc_info:
            msg = f"{msg}\n{self.formatException(record.exc_info)}"
        return f"{prefix} {msg}"


def _configure_root() -> logging.Logger:
    root = logging.getLogger(_ROOT)
    if not root.handlers:
        # Windows環境でのUnicodeEncodeError（cp932エラー）を防止
        if sys.platform.startswith("win"):
            try:
                sys.stdout.reconfigure(encoding="utf-8")
            except AttributeError:
                pass
        handler = logging.StreamHandler(sys.stdout)
        handler.setFormatter(TagFormatter())
        root.addHandler(handler)
        root.propagate = False
    root.setLevel(os.getenv("LOG_LEVEL", "INFO").upper())
    return root


def get_logger(tag: str) -> logging.Logger:
    """モジュールごとのロガーを取得（タグはログ行の先頭に出る）"""
    _configure_root()
    return logging.getLogger(f"{_ROOT}.{tag}")


def progress_enabled() -> bool:
    """tqdm の進捗表示を出すかどうか"""
    if os.getenv("VAUQ_NO_PROGRESS") == "1":
        return False
    return sys.stderr.isatty()
