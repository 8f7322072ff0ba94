# evaluation/synthetic.py
"""
トイバックエンド用の合成評価集団。

  factual        : a_img = a_prior。画像と事前知識が同じ答えを指す
  counterfactual : a_img != a_prior。半分は画像が勝つ（grounded）、
                   半分は事前知識が圧倒する（prior-dominated: 自信のあるハルシネーション）

根拠パッチ E は格子上のランダムな 2x2 ブロックで、その外接ボックスを evidence_regions に入れる。
応答は full 条件の分布からサンプルした1トークンで、ラベルは「応答 != a_img」。
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from backends.toy import ToyBackend, ToyConfig, log_softmax, toy_logits
from evaluation.records import EvalRecord


@dataclass(frozen=True)
class PopulationSpec:
    n_samples: int = 200
    factual_fraction: float = 0.5
    grounded_fraction: float = 0.5
    grid: Tuple[int, int] = (4, 5)
    vocab_size: int = 16
    factual_beta_img: Tuple[float, float] = (0.0, 4.0)
    factual_beta_prior: Tuple[float, float] = (0.0, 2.0)
    grounded_beta_img: Tuple[float, float] = (3.5, 6.0)
    grounded_beta_prior: Tuple[float, float] = (2.0, 3.5)
    prior_beta_img: Tuple[float, float] = (0.0, 1.0)
    prior_beta_prior: Tuple[float, float] = (4.5, 7.0)
    image_weight_scale: float = 1.0
    dataset: str = "toy"


def toy_base_config(spec: PopulationSpec, **overrides) -> ToyConfig:
    cols = spec.grid[1]
    kw = dict(vocab_size=spec.vocab_size, grid=spec.grid, evidence=(0, 1, cols, cols + 1), name=spec.dataset)
    kw.update(overrides)
    return ToyConfig(**kw)


def evidence_block(rng: np.random.Generator, grid: Tuple[int, int]) -> Tuple[List[int], Tuple[float, float, float, float]]:
    rows, cols = grid
    r0 = int(rng.integers(0, rows - 1))
    c0 = int(rng.integers(0, cols - 1))
    patches = [r0 * cols + c0, r0 * cols + c0 + 1, (r0 + 1) * cols + c0, (r0 + 1) * cols + c0 + 1]
    box = (c0 / cols, r0 / rows, (c0 + 2) / cols, (r0 + 2) / rows)
    return patches, box


def _uniform(rng: np.random.Generator, bounds: Tuple[float, float]) -> float:
    return float(rng.uniform(bounds[0], bounds[1]))


def build_population(spec: PopulationSpec = PopulationSpec(), seed: int = 0,
                     **config_overrides) -> Tuple[ToyBackend, List[EvalRecord]]:
    rng = np.random.default_rng(seed)
    base = toy_base_config(spec, **config_overrides)
    backend = ToyBackend(base)
    records = []
    for i in range(spec.n_samples):
        patches, box = evidence_block(rng, spec.grid)
        a_img = int(rng.integers(0, spec.vocab_size))
        if rng.random() < spec.factual_fraction:
            split = "factual"
            a_prior = a_img
            beta_img = _uniform(rng, spec.factual_beta_img)
            beta_prior = _uniform(rng, spec.factual_beta_prior)
        else:
            split = "counterfactual"
            a_prior = int((a_img + rng.integers(1, spec.vocab_size)) % spec.vocab_size)
            if rng.random() < spec.grounded_fraction:
                beta_img = _uniform(rng, spec.grounded_beta_img)
                beta_prior = _uniform(rng, spec.grounded_beta_prior)
            else:
                beta_img = _uniform(rng, spec.prior_beta_img)
                beta_prior = _uniform(rng, spec.prior_beta_prior)
        beta_img *= spec.image_weight_scale
        scene = {"evidence": patches, "a_img": a_img, "a_prior": a_prior,
                 "beta_img": beta_img, "beta_prior": beta_prior}
        cfg = base.with_scene(scene)
        p = np.exp(log_softmax(toy_logits(cfg, 1.0)))
        token = int(rng.choice(spec.vocab_size, p=p))
        records.append(EvalRecord(
            sample_id=f"{spec.dataset}-{seed}-{i:04d}",
            question=f"What is shown in scene {i}?",
            image_ref=scene,
            response=backend.decode([token]),
            response_tokens=[token],
            label=int(token != a_img),
            split=split,
            dataset=spec.dataset,
            evidence_regions=[box],
        ))
    return backend, records
