# utils/parser.py
"""
モデル・ジャッジの自由記述テキストを解析する小さなパーサ群。

  - parse_verdict     : "Correct" / "Wrong" 判定文字列の正規化
  - parse_confidence  : 自己申告の確信度（0〜100の最初の整数）
  - normalize_answer  : 意味的同値判定の既定ルール（大小文字・句読点・冠詞を無視）
"""
import re
import string
import unicodedata
from typing import Optional

CORRECT = "Correct"
WRONG = "Wrong"

# "Correct" / "Wrong" を単語単位で拾う（"Incorrect" は Correct 扱いにしない）
_VERDICT_PAT = re.compile(r"\b(?P<v>incorrect|correct|wrong)\b", re.IGNORECASE)

# 整数トークン（小数の "75.5" は先頭の 75 を採用）
_INT_PAT = re.compile(r"(?<!\d)(?P<n>\d{1,3})(?!\d)")

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT_TABLE = str.maketrans({c: " " for c in string.punctuation})


def _nfkc(text: Optional[str]) -> str:
    if text is None:
        return ""
    return unicodedata.normalize("NFKC", text)


def parse_verdict(text: Optional[str]) -> Optional[str]:
    """
    ジャッジ出力を Correct / Wrong に正規化。解釈できなければ None。

    例: "Correct" → "Correct", " wrong. " → "Wrong", "Incorrect" → "Wrong",
        "Correct or Wrong" → None（両方含む曖昧な出力）
    """
    found = set()
    for m in _VERDICT_PAT.finditer(_nfkc(text)):
        word = m.group("v").lower()
        found.add(CORRECT if word == "correct" else WRONG)
    if len(found) != 1:
        return None
    return found.pop()


def parse_confidence(text: Optional[str]) -> Optional[int]:
    """
    返答中で最初に現れる 0〜100 の整数を返す。無ければ None。

    例: "100" → 100, "confidence: 75 out of 100" → 75, "very sure" → None
    """
    for m in _INT_PAT.finditer(_nfkc(text)):
        value = int(m.group("n"))
        if 0 <= value <= 100:
            return value
    return None


def normalize_answer(text: Optional[str]) -> str:
    """大小文字・句読点・冠詞・空白の揺れを吸収した比較用文字列"""
    x = _nfkc(text).casefold()
    x = x.translate(_PUNCT_TABLE)
    x = _ARTICLES.sub(" ", x)
    return re.sub(r"\s+", " ", x).strip()
