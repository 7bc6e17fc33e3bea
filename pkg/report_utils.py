"""
报告与运行清单工具
每次运行把原始结果写入 results.json，再由同一套函数渲染出CSV报告；
report 子命令读取 results.json 重新渲染，保证两次渲染逐字节一致。
"""

import glob
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime
from importlib import metadata
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config import ARTIFACT_VERSION, DATA_CONFIG
from data_utils import get_schema
from Experiment_Runner import ExperimentConfig, FoldResult, attention_grid, stage_summary, summarize_f1
from Feature_Selection import ImportanceScores, scores_to_frame
from Signal_Masking import MaskReport
from utils import WARNING_COUNTS, BridgingInputError, dump_json, file_digest, write_atomic

logger = logging.getLogger(__name__)

RESULTS_FILE = "results.json"
MANIFEST_FILE = "manifest.json"


@dataclass
class RunManifest:
    """运行清单：命令行、配置快照、种子、输入摘要与版本信息"""
    command: List[str]
    config: Dict[str, Any]
    seed: Optional[int]
    input_digests: Dict[str, str] = field(default_factory=dict)
    artifact_version: str = ARTIFACT_VERSION
    versions: Dict[str, str] = field(default_factory=dict)
    fingerprints: Dict[str, str] = field(default_factory=dict)
    warnings: Dict[str, int] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""


def library_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for package in ("numpy", "pandas", "scikit-learn", "click", "tqdm", "PyYAML"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


def now() -> str:
    return datetime.now().strftime("%Y-%m-%d %H:%M:%S")


def start_manifest(config: Dict[str, Any], seed: Optional[int], inputs: Dict[str, str]) -> RunManifest:
    """
    创建运行清单

    Args:
        config: 合并后的配置快照
        seed: 主种子
        inputs: {名称: 输入文件路径}，记录其SHA-256
    """
    digests = {name: file_digest(path) for name, path in sorted(inputs.items()) if path}
    return RunManifest(command=list(sys.argv), config=config, seed=seed, input_digests=digests,
                       versions=library_versions(), started_at=now())


def finish_manifest(manifest: RunManifest, run_dir: str, outputs: Sequence[str]) -> str:
    """写入告警计数、输出文件列表与结束时间，原子写出manifest.json"""
    manifest.warnings = dict(sorted(WARNING_COUNTS.items()))
    manifest.outputs = sorted(os.path.basename(p) for p in outputs)
    manifest.finished_at = now()
    path = os.path.join(run_dir, MANIFEST_FILE)
    write_atomic(path, dump_json(asdict(manifest)))
    return path


def load_manifest(run_dir: str) -> Dict[str, Any]:
    path = os.path.join(run_dir, MANIFEST_FILE)
    if not os.path.exists(path):
        raise BridgingInputError(f"目录 {run_dir} 中没有 {MANIFEST_FILE}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# 结果载荷
# ---------------------------------------------------------------------------

def _scores_payload(scores: Optional[ImportanceScores]) -> Optional[Dict[str, Any]]:
    if scores is None:
        return None
    return {"method": scores.method, "task": scores.task, "signal_type": scores.signal_type,
            "feature_names": list(scores.feature_names), "scores": [float(s) for s in scores.scores],
            "normalized": scores.normalized}


def scores_from_payload(payload: Dict[str, Any]) -> ImportanceScores:
    return ImportanceScores(payload["method"], np.asarray(payload["scores"], dtype=float),
                            list(payload["feature_names"]), payload.get("normalized", True),
                            payload.get("task", ""), payload.get("signal_type", ""))


def run_payload(config: ExperimentConfig, results: Sequence[FoldResult], scores: Optional[ImportanceScores],
                mask_report: Optional[MaskReport] = None) -> Dict[str, Any]:
    """run命令的原始结果"""
    return {
        "kind": "run",
        "task": config.task,
        "signal_type": config.signal_type,
        "seed": config.seed,
        "mean_f1": summarize_f1(results),
        "folds": [
            {"fold": r.fold, "macro_f1": r.macro_f1, "best_epoch": r.best_epoch, "n_test": r.n_test,
             "flagged": r.flagged, "per_class": r.per_class,
             "fingerprint": r.stats.fingerprint if r.stats is not None else None}
            for r in results
        ],
        "attention": _scores_payload(scores),
        "mask": asdict(mask_report) if mask_report is not None else None,
    }


def featsel_payload(task: str, signal_type: str, seed: int, grid: pd.DataFrame,
                    method_scores: Dict[str, ImportanceScores]) -> Dict[str, Any]:
    """featsel命令的原始结果"""
    return {
        "kind": "featsel",
        "task": task,
        "signal_type": signal_type,
        "seed": seed,
        "scores": [_scores_payload(s) for _, s in sorted(method_scores.items())],
        "grid": grid.to_dict(orient="records"),
    }


def load_results(run_dir: str) -> Dict[str, Any]:
    path = os.path.join(run_dir, RESULTS_FILE)
    if not os.path.exists(path):
        raise BridgingInputError(f"目录 {run_dir} 中没有 {RESULTS_FILE}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# CSV渲染
# ---------------------------------------------------------------------------

def write_csv(frame: pd.DataFrame, path: str, sort_by: Optional[Sequence[str]] = None, index: bool = False) -> str:
    """固定浮点格式、行排序后原子写出CSV"""
    if sort_by:
        frame = frame.sort_values(list(sort_by), kind="mergesort").reset_index(drop=True)
    content = frame.to_csv(index=index, float_format=DATA_CONFIG["float_format"], lineterminator="\n")
    write_atomic(path, content)
    return path


def _series_frame(frame: pd.DataFrame, series_cols: Sequence[str], x: str, y: str) -> pd.DataFrame:
    series = frame[list(series_cols)].astype(str).agg("/".join, axis=1)
    return pd.DataFrame({"series": series, "x": frame[x], "y": frame[y]})


def write_reports(run_dir: str, payload: Dict[str, Any]) -> List[str]:
    """
    由结果载荷渲染CSV报告

    Args:
        run_dir: 运行目录
        payload: run_payload / featsel_payload 的结果

    Returns:
        写出的文件路径列表
    """
    written = []
    task, signal_type = payload["task"], payload["signal_type"]
    if payload["kind"] == "run":
        folds = pd.DataFrame([{k: v for k, v in f.items() if k != "per_class"} for f in payload["folds"]])
        folds.insert(0, "signal_type", signal_type)
        folds.insert(0, "task", task)
        written.append(write_csv(folds, os.path.join(run_dir, "fold_metrics.csv"), ["fold"]))

        class_rows = [{"task": task, "signal_type": signal_type, "fold": f["fold"], "label": label, **metrics}
                      for f in payload["folds"] for label, metrics in f["per_class"].items()]
        written.append(write_csv(pd.DataFrame(class_rows), os.path.join(run_dir, "class_metrics.csv"),
                                 ["fold", "label"]))

        if payload["attention"] is not None:
            scores = scores_from_payload(payload["attention"])
            frame = scores_to_frame([scores]).rename(columns={"score_or_rank": "attention"})
            written.append(write_csv(frame, os.path.join(run_dir, "attention.csv")))
            stages = stage_summary(scores, get_schema(signal_type))
            stage_frame = pd.DataFrame({"task": task, "signal_type": signal_type,
                                        "group": list(stages), "attention": list(stages.values())})
            written.append(write_csv(stage_frame, os.path.join(run_dir, "attention_stages.csv"), ["group"]))

        if payload["mask"] is not None:
            frame = MaskReport(**payload["mask"]).to_frame()
            written.append(write_csv(frame, os.path.join(run_dir, "mask_curve.csv"), ["rank"]))
            written.append(write_csv(_series_frame(frame, ["task", "signal_type"], "rank", "f1_after_masking"),
                                     os.path.join(run_dir, "mask_series.csv"), ["series", "x"]))
    elif payload["kind"] == "featsel":
        scores = [scores_from_payload(s) for s in payload["scores"]]
        written.append(write_csv(scores_to_frame(scores), os.path.join(run_dir, "selection_scores.csv"),
                                 ["method", "feature"]))
        grid = pd.DataFrame(payload["grid"], columns=["method", "k", "classifier", "features", "mean_f1"])
        written.append(write_csv(grid, os.path.join(run_dir, "featsel_grid.csv"), ["classifier", "method", "k"]))
        written.append(write_csv(_series_frame(grid, ["method", "classifier"], "k", "mean_f1"),
                                 os.path.join(run_dir, "featsel_series.csv"), ["series", "x"]))
    else:
        raise BridgingInputError(f"未知的结果类型: {payload['kind']}")
    return written


def save_results(run_dir: str, payload: Dict[str, Any]) -> List[str]:
    """保存results.json并由写出的内容渲染报告（与report子命令走同一条路径）"""
    os.makedirs(run_dir, exist_ok=True)
    path = os.path.join(run_dir, RESULTS_FILE)
    content = dump_json(payload)
    write_atomic(path, content)
    return [path] + write_reports(run_dir, json.loads(content))


def write_attention_grids(root: str) -> List[str]:
    """
    汇总root下所有run目录的注意力，按信号类型各写一张 特征×任务 表

    Returns:
        写出的文件路径列表
    """
    by_signal: Dict[str, Dict[str, ImportanceScores]] = {}
    for path in sorted(glob.glob(os.path.join(root, "**", RESULTS_FILE), recursive=True)):
        payload = load_results(os.path.dirname(path))
        if payload.get("kind") != "run" or payload.get("attention") is None:
            continue
        by_signal.setdefault(payload["signal_type"], {})[payload["task"]] = scores_from_payload(payload["attention"])
    written = []
    for signal_type, results in sorted(by_signal.items()):
        grid = attention_grid(dict(sorted(results.items())))
        written.append(write_csv(grid, os.path.join(root, f"attention_grid_{signal_type}.csv"), index=True))
    return written


def render_reports(path: str) -> List[str]:
    """
    重新渲染报告：path为单个运行目录时重写该运行的CSV，
    否则渲染其下所有运行，并汇总注意力表
    """
    written = []
    if os.path.exists(os.path.join(path, RESULTS_FILE)):
        load_manifest(path)
        written += write_reports(path, load_results(path))
    else:
        runs = sorted(glob.glob(os.path.join(path, "**", RESULTS_FILE), recursive=True))
        if not runs:
            raise BridgingInputError(f"目录 {path} 下没有任何运行结果")
        for results_path in runs:
            run_dir = os.path.dirname(results_path)
            written += write_reports(run_dir, load_results(run_dir))
    written += write_attention_grids(path)
    logger.info(f"✅ 重新渲染 {len(written)} 个报告文件")
    return written
