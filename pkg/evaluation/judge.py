# evaluation/judge.py
"""ジャッジ出力（"Correct" / "Wrong"）の多数決でラベルを決める"""
from dataclasses import dataclass
from typing import Optional, Sequence

from utils.parser import CORRECT, WRONG, parse_verdict

LABEL_CORRECT = 0
LABEL_HALLUCINATED = 1


@dataclass(frozen=True)
class JudgeOutcome:
    label: Optional[int]      # 0 = correct, 1 = hallucinated, None = unlabeled
    reason: str = ""
    n_votes: int = 0
    n_malformed: int = 0

    @property
    def labeled(self) -> bool:
        return self.label is not None


def ingest_judgments(verdicts: Sequence[str]) -> JudgeOutcome:
    correct = wrong = malformed = 0
    for raw in verdicts or ():
        v = parse_verdict(raw)
        if v == CORRECT:
            correct += 1
        elif v == WRONG:
            wrong += 1
        else:
            malformed += 1
    votes = correct + wrong
    if votes == 0:
        return JudgeOutcome(None, "no parseable verdict", 0, malformed)
    if correct == wrong:
        return JudgeOutcome(None, "tie", votes, malformed)
    label = LABEL_CORRECT if correct > wrong else LABEL_HALLUCINATED
    return JudgeOutcome(label, "majority", votes, malformed)
