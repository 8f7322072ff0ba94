# notify/dispatch.py（実行ログ通知専用）
"""
score / eval 実行後のサマリを Slack の Incoming Webhook に送る。

件数と AUROC は等幅で揃えた表にし、コードブロックで包んで送る。
SLACK_WEBHOOK_URL が無い、または DRY_RUN=1 のときは送らずにプレビューだけ出す。
通知の失敗で実行全体を失敗にはしない。
"""
import os
import unicodedata
from datetime import datetime, timedelta, timezone
from typing import Collection, Dict, List, Optional, Sequence

import requests

from utils.logs import get_logger

log = get_logger("dispatch")

# --- 設定 ---------------------------------------------------------------
JST = timezone(timedelta(hours=9))
WIDE = "FWA"
WARN_KEYS = ("failed", "malformed", "degenerate")
MAX_ERRORS = 10
POST_TIMEOUT = 15


# --- 表 -----------------------------------------------------------------
def display_width(text: str) -> int:
    """等幅フォントでの表示幅（全角は2）"""
    return sum(2 if unicodedata.east_asian_width(c) in WIDE else 1 for c in text)


def pad_to(text: str, width: int, right: bool = False) -> str:
    gap = " " * max(0, width - display_width(text))
    return gap + text if right else text + gap


def render_table(header: Sequence[str], rows: Sequence[Sequence[str]],
                 right: Collection[int] = ()) -> List[str]:
    """列幅を表示幅で揃えた表。right に入れた列は右寄せ"""
    cols = range(len(header))
    widths = [max(display_width(r[i]) for r in [header, *rows]) for i in cols]

    def line(cells: Sequence[str]) -> str:
        return "  ".join(pad_to(cells[i], widths[i], i in right) for i in cols).rstrip()

    return [line(header), "  ".join("-" * w for w in widths), *(line(r) for r in rows)]


def _fmt(value) -> str:
    return f"{value:.4f}" if isinstance(value, float) else str(value)


# --- メッセージ生成 ------------------------------------------------------
def build_log_message(command: str, counts: Dict[str, int], headline: Optional[Dict[str, float]] = None,
                      errors: Optional[List[str]] = None, now: Optional[datetime] = None) -> str:
    """件数とAUROCの実行ログを組み立てる純関数"""
    stamp = (now or datetime.now(JST)).strftime("%Y-%m-%d %H:%M JST")
    lines = [f"【実行ログ】vauq {command} {stamp}", ""]

    count_rows = [[key, str(n), "⚠️" if key in WARN_KEYS and n > 0 else ""] for key, n in counts.items()]
    lines += render_table(["件数", "n", ""], count_rows, right={1})

    if headline:
        # eval の見出しは "score@dataset"
        score_rows = []
        for key, value in headline.items():
            score, _, dataset = key.partition("@")
            score_rows.append([score, dataset or "-", _fmt(value)])
        lines += ["", *render_table(["score", "dataset", "AUROC"], score_rows, right={2})]

    if errors:
        lines += ["", "--- エラー ---", *(f"・{e}" for e in errors[:MAX_ERRORS])]
        if len(errors) > MAX_ERRORS:
            lines.append(f"…ほか {len(errors) - MAX_ERRORS} 件")
    return "\n".join(lines)


# --- 送信 ---------------------------------------------------------------
def post_webhook(url: str, body: str) -> bool:
    payload = {"text": f"```\n{body}\n```"}
    try:
        resp = requests.post(url, json=payload, timeout=POST_TIMEOUT)
        resp.raise_for_status()
    except requests.RequestException as e:
        log.error(f"webhook post failed: {e}")
        return False
    log.info(f"webhook status={resp.status_code}")
    return True


# --- エントリポイント ------------------------------------------------------
def send_log(command: str, counts: Dict[str, int], headline: Optional[Dict[str, float]] = None,
             errors: Optional[List[str]] = None) -> bool:
    """vauq_cli.py から呼び出すエントリポイント"""
    body = build_log_message(command, counts, headline, errors)
    log.info("preview:\n" + body)

    if os.getenv("DRY_RUN") == "1":
        log.info("DRY_RUN mode - not sending")
        return False
    url = os.getenv("SLACK_WEBHOOK_URL")
    if not url:
        log.warning("SLACK_WEBHOOK_URL not set - skip")
        return False
    return post_webhook(url, body)
