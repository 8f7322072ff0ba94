# tests/conftest.py
import sys
from pathlib import Path

import pytest

# リポジトリルートをパスに追加（scripts と同じやり方）
repo_root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(repo_root))

from backends import toy_model  # noqa: E402
from backends.toy import ToyBackend, ToyConfig  # noqa: E402
from evaluation.records import EvalRecord  # noqa: E402
from evaluation.synthetic import PopulationSpec, build_population  # noqa: E402


@pytest.fixture(autouse=True)
def _quiet_env(monkeypatch, tmp_path):
    """通知は送らず、キャッシュ・出力はテストごとの一時ディレクトリへ"""
    monkeypatch.setenv("DRY_RUN", "1")
    monkeypatch.setenv("VAUQ_NO_PROGRESS", "1")
    monkeypatch.delenv("SLACK_WEBHOOK_URL", raising=False)
    monkeypatch.setenv("VAUQ_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("VAUQ_OUTPUT_DIR", str(tmp_path / "runs"))


@pytest.fixture
def toy_config() -> ToyConfig:
    return ToyConfig()


@pytest.fixture
def toy_backend(toy_config) -> ToyBackend:
    return toy_model(toy_config)


@pytest.fixture
def toy_record() -> EvalRecord:
    """既定シーン（4x4 格子、根拠パッチ 0,1,4,5）の1件"""
    return EvalRecord(
        sample_id="toy-0000",
        question="What is in the top-left corner?",
        image_ref=None,
        response="tok1",
        response_tokens=[1],
        label=0,
        split="factual",
        dataset="toy",
        evidence_regions=[(0.0, 0.0, 0.5, 0.5)],
    )


@pytest.fixture(scope="session")
def population():
    """合成集団 200 件（トイバックエンドとレコード）"""
    return build_population(PopulationSpec(n_samples=200), seed=0)
