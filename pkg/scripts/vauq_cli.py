# scripts/vauq_cli.py
"""
コマンドライン入口。

  python scripts/vauq_cli.py score --config run.json --dataset data.jsonl
  python scripts/vauq_cli.py eval  --scores-file storage/runs/scores.jsonl --seeds 0,1,2
  python scripts/vauq_cli.py eval  --config run.json --sweep --components --layer-curves --timing
  python scripts/vauq_cli.py eval  --config run.json --transfer source=a.jsonl,target=b.jsonl
  python scripts/vauq_cli.py synth --n 200 --seed 0 --out storage/toy.jsonl

終了コード: 0 成功 / 2 設定エラー / 3 バックエンドエラー / 4 データエラー
"""
import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

# リポジトリルートをパスに追加
repo_root = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(repo_root))

# .env自動読み込み
from dotenv import load_dotenv
load_dotenv()

import numpy as np
import pandas as pd
from tqdm import tqdm

from backends import load_backend
from backends.base import Backend, BackendError, ConfigError, DataError, InsufficientDataError, VauqError
from evaluation.metrics import score_auroc
from evaluation.records import EvalRecord, load_records, write_records
from evaluation.sweep import (
    MIN_LABELED,
    SweepGrid,
    collect_entropies,
    component_analysis,
    stratified_split,
    sweep_table,
    transfer_tables,
)
from evaluation.synthetic import PopulationSpec, build_population, toy_base_config
from evaluation.timing import timing_report
from scoring.pipeline import RecordScorer, ScoringOptions
from scoring.report import (
    STATUS_DEGENERATE,
    STATUS_FAILED,
    STATUS_OK,
    STATUS_UNAVAILABLE,
    ScoreRow,
    check_score_names,
    read_score_rows,
    write_jsonl,
    write_score_rows,
    write_summary,
)
from scoring.saliency import layer_ratio_curve
from scoring.vauq import VauqParams
from utils.cache import TraceCache
from utils.config import RunConfig, config_from_dict, load_run_config
from utils.logs import get_logger, progress_enabled

log = get_logger("cli")


# ============================================================
# 引数
# ============================================================
def _int_list(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _str_list(text: Optional[str]) -> Optional[List[str]]:
    if text is None:
        return None
    return [x.strip() for x in text.split(",") if x.strip()]


def _band(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    parts = text.replace("-", ",").replace(":", ",").split(",")
    try:
        start, end = (int(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--layer-band expects 'start,end', got {text!r}") from None
    return [start, end]


def _transfer_spec(text: str) -> Tuple[str, str]:
    spec = dict(part.split("=", 1) for part in text.split(",") if "=" in part)
    if "source" not in spec or "target" not in spec:
        raise ConfigError(f"--transfer expects 'source=A,target=B', got {text!r}")
    return spec["source"], spec["target"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON")
    p.add_argument("--dataset", help="評価データ (JSONL)")
    p.add_argument("--preset", help="例: llava-1.5-7b/vilp")
    p.add_argument("--alpha", type=float)
    p.add_argument("--k-percent", type=float)
    p.add_argument("--layer-band", help="例: 10,25")
    p.add_argument("--mask-kind", choices=["core", "random", "ground_truth", "blank"])
    p.add_argument("--blank-mode", choices=["knockout", "remove"])
    p.add_argument("--scores", help="カンマ区切りのスコア名")
    p.add_argument("--seeds", help="例: 0,1,2")
    p.add_argument("--out", help="出力ディレクトリ")
    p.add_argument("--cache-dir")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vauq", description="vision-aware uncertainty scoring")
    sub = parser.add_subparsers(dest="command", required=True)

    p_score = sub.add_parser("score", help="データセットの各レコードをスコアリング")
    _add_common(p_score)

    p_eval = sub.add_parser("eval", help="AUROC / スイープ / 転移 / 時間計測")
    _add_common(p_eval)
    p_eval.add_argument("--scores-file", help="score の出力 scores.jsonl")
    p_eval.add_argument("--sweep", action="store_true")
    p_eval.add_argument("--transfer", help="source=A.jsonl,target=B.jsonl")
    p_eval.add_argument("--timing", action="store_true")
    p_eval.add_argument("--layer-curves", action="store_true")
    p_eval.add_argument("--components", action="store_true")

    p_synth = sub.add_parser("synth", help="トイ用の合成データセットを作る")
    p_synth.add_argument("--n", type=int, default=200)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--name", default="toy")
    p_synth.add_argument("--image-weight-scale", type=float, default=1.0)
    p_synth.add_argument("--out", required=True)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides: Dict[str, Any] = {
        "dataset": args.dataset,
        "preset": args.preset,
        "alpha": args.alpha,
        "k_percent": args.k_percent,
        "layer_band": _band(args.layer_band),
        "mask_kind": args.mask_kind,
        "blank_mode": args.blank_mode,
        "scores": _str_list(args.scores),
        "seeds": _int_list(args.seeds),
        "output_dir": args.out,
        "cache_dir": args.cache_dir,
        "jobs": args.jobs,
    }
    if args.no_cache:
        overrides["use_cache"] = False
    return load_run_config(args.config, overrides)


# ============================================================
# score
# ============================================================
def _score_worker(payload) -> List[Tuple[str, List[Dict[str, Any]], List[Dict[str, Any]], List[Dict[str, Any]]]]:
    """--jobs > 1 のときのワーカー。プロセスごとにバックエンドを1つ持つ"""
    config_dict, record_dicts, names = payload
    config = config_from_dict(config_dict)
    backend = load_backend(config.backend)
    scorer = RecordScorer(backend, ScoringOptions.from_run_config(config),
                          TraceCache(config.resolved_cache_dir(), enabled=config.use_cache))
    out = []
    for d in record_dicts:
        rec = EvalRecord.from_dict(d)
        res = scorer.score_record(rec, names)
        out.append((rec.sample_id, [r.to_dict() for r in res.rows], res.masks, res.errors))
    return out


def _score_parallel(config: RunConfig, records: List[EvalRecord], names: List[str]):
    chunks = [records[i::config.jobs] for i in range(config.jobs)]
    payloads = [(config.to_dict(), [r.to_dict() for r in chunk], names) for chunk in chunks if chunk]
    merged = []
    with ProcessPoolExecutor(max_workers=len(payloads)) as pool:
        for part in pool.map(_score_worker, payloads):
            merged.extend(part)
    # sample_id 順に並べ直す
    merged.sort(key=lambda item: item[0])
    rows = [ScoreRow.from_dict(d) for _, rs, _, _ in merged for d in rs]
    masks = [m for _, _, ms, _ in merged for m in ms]
    errors = [e for _, _, _, es in merged for e in es]
    return rows, masks, errors


def cmd_score(config: RunConfig, backend: Optional[Backend] = None) -> int:
    log.info("=== score start ===")
    if not config.dataset:
        raise ConfigError("score needs a dataset (--dataset or config.dataset)")
    names = check_score_names(config.scores)
    out = config.resolved_output_dir()
    config.save(out / "run_config.json")

    loaded = load_records(config.dataset)
    records = sorted(loaded.records, key=lambda r: r.sample_id)
    malformed = [{"line": lineno, "error_type": "malformed", "message": msg} for lineno, msg in loaded.malformed]

    if backend is None and config.jobs > 1:
        rows, masks, errors = _score_parallel(config, records, names)
    else:
        if backend is None:
            backend = load_backend(config.backend)
        scorer = RecordScorer(backend, ScoringOptions.from_run_config(config),
                              TraceCache(config.resolved_cache_dir(), enabled=config.use_cache))
        rows, masks, errors = [], [], []
        for rec in tqdm(records, desc="score", disable=not progress_enabled()):
            res = scorer.score_record(rec, names)
            rows.extend(res.rows)
            masks.extend(res.masks)
            errors.extend(res.errors)

    write_score_rows(out / "scores.jsonl", rows)
    write_summary(out / "summary.csv", rows)
    write_jsonl(out / "masks.jsonl", masks)
    write_jsonl(out / "errors.jsonl", malformed + errors)

    counts = {
        "records": len(records),
        "rows": len(rows),
        "ok": sum(r.status == STATUS_OK for r in rows),
        "degenerate": sum(r.status == STATUS_DEGENERATE for r in rows),
        "unavailable": sum(r.status == STATUS_UNAVAILABLE for r in rows),
        "failed": sum(r.status == STATUS_FAILED for r in rows),
        "malformed": len(malformed),
    }
    headline = {}
    for name in names:
        res = score_auroc(rows, name)
        if res["n_nonfinite"]:
            log.warning(f"{name}: {res['n_nonfinite']} non-finite value(s) left out of the headline AUROC")
        if res["n"] and not np.isnan(res["auroc"]):
            headline[name] = res["auroc"]
    log.info(f"counts: {counts}")
    _notify("score", counts, headline, [f"{e.get('sample_id', e.get('line'))}: {e['message']}" for e in errors])

    # 失敗したサンプルが1件でもあれば非0（詳細は errors.jsonl）。閾値内の壊れた行は 0 のまま
    failed_ids = sorted({e["sample_id"] for e in errors})
    if failed_ids:
        if any(e["error_type"] == "backend" for e in errors):
            raise BackendError(f"{len(failed_ids)} of {len(records)} samples failed with a backend error; "
                               f"see {out / 'errors.jsonl'}")
        raise DataError(f"{len(failed_ids)} of {len(records)} samples failed; see {out / 'errors.jsonl'}")
    log.info(f"=== score complete → {out} ===")
    return 0


# ============================================================
# eval
# ============================================================
def _seed_rows(rows: List[ScoreRow], seeds: Sequence[int], val_fraction: float) -> pd.DataFrame:
    """スコア × データセット × シードの AUROC。ラベル付きが少ないときは全件で計算"""
    out = []
    names = list(dict.fromkeys(r.score_name for r in rows))
    datasets = list(dict.fromkeys(r.dataset for r in rows))
    for ds in datasets:
        ds_rows = [r for r in rows if r.dataset == ds]
        labels = {}
        for r in ds_rows:
            if r.label in (0, 1):
                labels[r.sample_id] = r.label
        ids = sorted(labels)
        for seed in seeds:
            subset, split = None, "all"
            if len(ids) >= MIN_LABELED:
                try:
                    _, test = stratified_split([labels[i] for i in ids], val_fraction, seed)
                    subset, split = {ids[i] for i in test}, "test"
                except InsufficientDataError as e:
                    log.warning(f"{ds} seed={seed}: {e}; falling back to all labeled samples")
            for name in names:
                res = score_auroc(ds_rows, name, sample_ids=subset)
                out.append({"score": name, "dataset": ds, "seed": str(seed), "split": split, **res})
    frame = pd.DataFrame(out)
    if frame.empty:
        return frame
    means = (frame.groupby(["score", "dataset"], sort=False)
             .agg(auroc=("auroc", "mean"), n=("n", "mean"), n_pos=("n_pos", "mean"),
                  n_excluded=("n_excluded", "mean"), split=("split", "first"))
             .reset_index())
    means["seed"] = "mean"
    cols = ["score", "dataset", "seed", "split", "auroc", "n", "n_pos", "n_excluded"]
    return pd.concat([frame[cols], means[cols]], ignore_index=True)


def _write_csv(frame: pd.DataFrame, path: Path) -> None:
    frame.to_csv(path, index=False, float_format="%.12g", lineterminator="\n")
    log.info(f"wrote {path.name} ({len(frame)} rows)")


def cmd_eval(config: RunConfig, *, scores_file: Optional[str] = None, sweep: bool = False,
             transfer: Optional[str] = None, timing: bool = False, layer_curves: bool = False,
             components: bool = False, backend: Optional[Backend] = None) -> int:
    log.info("=== eval start ===")
    out = config.resolved_output_dir()
    config.save(out / "run_config.json")
    headline: Dict[str, float] = {}
    counts: Dict[str, int] = {}

    if scores_file:
        rows = read_score_rows(Path(scores_file))
        if not any(r.label in (0, 1) for r in rows):
            raise DataError(f"{scores_file} has no labeled rows; AUROC needs labels")
        table = _seed_rows(rows, config.seeds, config.sweep.val_fraction)
        _write_csv(table, out / "auroc.csv")
        counts["score_rows"] = len(rows)
        for _, r in table[table["seed"] == "mean"].iterrows():
            headline[f"{r['score']}@{r['dataset']}"] = float(r["auroc"])

    needs_backend = sweep or transfer or timing or layer_curves or components
    if needs_backend:
        backend = backend or load_backend(config.backend)
        options = ScoringOptions.from_run_config(config)
        cache = TraceCache(config.resolved_cache_dir(), enabled=config.use_cache)
        grid = SweepGrid.from_settings(config.sweep)
        params = VauqParams(config.alpha, config.k_percent, tuple(config.layer_band))

    if sweep or components or layer_curves or timing:
        if not config.dataset:
            raise ConfigError("this eval mode needs a dataset")
        records = sorted(load_records(config.dataset).records, key=lambda r: r.sample_id)
        counts["records"] = len(records)

    if sweep or components:
        scorer = RecordScorer(backend, options, cache)
        ks = list(grid.ks) if sweep else []
        bands = list(grid.bands) if sweep else []
        if params.k_percent not in ks:
            ks.append(params.k_percent)
        if params.layer_band not in bands:
            bands.append(params.layer_band)
        table = collect_entropies(records, scorer, ks, bands)
        counts["sweep_excluded"] = len(table.excluded)
        if sweep:
            results = [sweep_table(table, grid, seed) for seed in config.seeds]
            surface = pd.concat([r.surface for r in results], ignore_index=True)
            _write_csv(surface, out / "sweep_surface.csv")
            best = pd.DataFrame([r.best_row() for r in results])
            _write_csv(best, out / "sweep_best.csv")
            headline["sweep_test_mean"] = float(best["test_auroc"].mean())
        if components:
            _write_csv(component_analysis(table, params), out / "components.csv")

    if transfer:
        src_path, tgt_path = _transfer_spec(transfer)
        ks = sorted(set(grid.ks))
        scorer = RecordScorer(backend, options, cache)
        src_records = sorted(load_records(src_path).records, key=lambda r: r.sample_id)
        tgt_records = sorted(load_records(tgt_path).records, key=lambda r: r.sample_id)
        src_table = collect_entropies(src_records, scorer, ks, grid.bands, desc="source")
        tgt_table = collect_entropies(tgt_records, scorer, ks, grid.bands, desc="target")
        src_name, tgt_name = Path(src_path).stem, Path(tgt_path).stem
        rows_t = [transfer_tables(src_table, tgt_table, grid, seed, src_name, tgt_name).to_row()
                  for seed in config.seeds]
        frame = pd.DataFrame(rows_t)
        _write_csv(frame, out / "transfer.csv")
        headline["transfer_gap_mean"] = float(frame["gap"].mean())

    if layer_curves:
        scorer = RecordScorer(backend, options, cache)
        curve_rows = []
        for rec in records:
            if not rec.evidence_regions:
                continue
            try:
                view = scorer.sample_view(rec)
                for row in layer_ratio_curve(view.full(), view.layout()):
                    curve_rows.append({"sample_id": rec.sample_id, **row})
            except VauqError as e:
                log.warning(f"{rec.sample_id} skipped for layer curves: {e}")
        if not curve_rows:
            raise DataError("no record with evidence regions for layer curves")
        curves = pd.DataFrame(curve_rows)
        per_layer = (curves.groupby("layer")
                     .agg(inside=("inside", "mean"), outside=("outside", "mean"), n=("sample_id", "count"))
                     .reset_index())
        per_layer["ratio"] = per_layer["inside"] / per_layer["outside"]
        _write_csv(per_layer[["layer", "inside", "outside", "ratio", "n"]], out / "layer_curves.csv")

    if timing:
        _write_csv(timing_report(backend, records, check_score_names(config.scores), options),
                   out / "timing.csv")

    _notify("eval", counts, headline, None)
    log.info(f"=== eval complete → {out} ===")
    return 0


# ============================================================
# synth
# ============================================================
def cmd_synth(n: int, seed: int, name: str, image_weight_scale: float, out: str) -> int:
    spec = PopulationSpec(n_samples=n, dataset=name, image_weight_scale=image_weight_scale)
    backend, records = build_population(spec, seed)
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_records(path, records)
    # そのまま score / eval に渡せる設定も書いておく
    config = RunConfig(backend={"kind": "toy", "config": toy_base_config(spec).to_dict()}, dataset=str(path))
    config.save(path.with_suffix(".config.json"))
    counts = {"records": len(records), "hallucinated": sum(r.label for r in records)}
    log.info(f"wrote {path} {counts} (toy backend {backend.backend_id})")
    return 0


# ============================================================
# エントリポイント
# ============================================================
def _notify(command: str, counts: Dict[str, int], headline: Dict[str, float], errors) -> None:
    try:
        from notify import dispatch
        dispatch.send_log(command, counts, headline, errors)
    except Exception as e:
        log.warning(f"Failed to send dispatch log: {e}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args.n, args.seed, args.name, args.image_weight_scale, args.out)
        config = config_from_args(args)
        if args.command == "score":
            return cmd_score(config)
        return cmd_eval(config, scores_file=args.scores_file, sweep=args.sweep, transfer=args.transfer,
                        timing=args.timing, layer_curves=args.layer_curves, components=args.components)
    except VauqError as e:
        log.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
