"""
信号遮蔽验证与特征选择比较
- 遮蔽：按注意力从高到低逐个把测试折中的特征列置0，记录macro-F1变化
- 比较：各方法选出top-k特征后，分别用线性分类器和无注意力的Bi-LSTM重新做交叉验证
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.exceptions import ConvergenceWarning
from tqdm import tqdm

from Experiment_Runner import (
    ExperimentConfig, FoldResult, evaluate, macro_f1, restore_fold_model, run_folds, summarize_f1,
)
from data_utils import Corpus
from Feature_Selection import ImportanceScores, linear_classifier, top_k
from Task_Labels import LabeledDataset
from utils import BridgingInputError, count_warning, stable_argsort_desc

logger = logging.getLogger(__name__)

CLASSIFIERS = ("linear", "recurrent")


@dataclass
class MaskReport:
    """遮蔽曲线：特征按注意力降序排列"""
    task: str
    signal_type: str
    features: List[str]
    scores: List[float]
    f1_after: List[float]
    baseline_f1: float
    retrained: bool = False

    def __post_init__(self):
        if not len(self.features) == len(self.scores) == len(self.f1_after):
            raise BridgingInputError("遮蔽报告的特征、得分、F1长度不一致")

    @property
    def deltas(self) -> List[float]:
        return [f1 - self.baseline_f1 for f1 in self.f1_after]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "task": self.task,
            "signal_type": self.signal_type,
            "rank": range(1, len(self.features) + 1),
            "feature": self.features,
            "attention": self.scores,
            "f1_after_masking": self.f1_after,
            "baseline_f1": self.baseline_f1,
            "delta_f1": self.deltas,
        })


def _mean_over_folds(values: Dict[int, float], results: Sequence[FoldResult]) -> float:
    kept = [values[r.fold] for r in results if not r.flagged]
    return float(np.mean(kept if kept else list(values.values())))


def mask_eval(config: ExperimentConfig, dataset: LabeledDataset, corpus: Corpus, results: Sequence[FoldResult],
              scores: ImportanceScores, retrain: Optional[bool] = None) -> MaskReport:
    """
    信号遮蔽验证

    Args:
        config: 训练这些模型时的实验配置
        dataset: 未归一化的数据集
        corpus: 原始语料
        results: run_cv的各折结果（含训练好的参数与归一化统计量）
        scores: 注意力特征重要性，决定遮蔽顺序
        retrain: True时遮蔽后重新训练，默认取配置

    Returns:
        MaskReport
    """
    retrain = config.mask_retrain if retrain is None else retrain
    if len(scores.scores) != dataset.d:
        raise BridgingInputError(f"得分维度 {len(scores.scores)} 与数据集特征数 {dataset.d} 不一致")
    order = stable_argsort_desc(scores.scores)
    baseline = summarize_f1(results)
    f1_after: List[float] = []

    if retrain:
        for j in tqdm(order, desc="遮蔽后重新训练", disable=None if config.progress else True):
            f1_after.append(summarize_f1(run_folds(config, dataset, corpus, masked=[j])))
    else:
        prepared = []
        for r in results:
            prepared.append((r, dataset.apply_stats(r.stats), restore_fold_model(config, dataset, r)))
        for j in tqdm(order, desc="遮蔽评估", disable=None if config.progress else True):
            per_fold = {}
            for r, normalized, model in prepared:
                split = normalized.mask_feature(j, folds=[r.fold]).split(r.fold)
                per_fold[r.fold], _, _ = evaluate(model, split.test, split.vocabulary)
            f1_after.append(_mean_over_folds(per_fold, results))

    names = [scores.feature_names[j] for j in order]
    logger.info(f"✅ 遮蔽验证完成（{config.task}/{config.signal_type}）：基线F1={baseline:.4f}，"
                f"遮蔽第一名 {names[0]} 后F1={f1_after[0]:.4f}")
    return MaskReport(config.task, config.signal_type, names, [float(scores.scores[j]) for j in order],
                      f1_after, baseline, retrained=retrain)


# ---------------------------------------------------------------------------
# 特征选择比较
# ---------------------------------------------------------------------------

def _fold_vectors(examples, cols: Sequence[int], sequence: bool) -> Tuple[np.ndarray, List[int]]:
    X, y = [], []
    for e in examples:
        rows = e.matrix.H[:e.matrix.n][:, cols]
        if sequence:
            X.extend(rows)
            y.extend(e.target)
        else:
            X.append(rows.mean(axis=0))
            y.append(e.target)
    return np.asarray(X, dtype=float), [int(v) for v in y]


def linear_cv(dataset: LabeledDataset, cols: Sequence[int]) -> float:
    """
    线性分类器交叉验证：句子级均值向量（序列任务为逐词向量）+ 标准化逻辑回归

    Returns:
        各折macro-F1的平均
    """
    sequence = dataset.task.kind == "sequence"
    scores = []
    for fold in sorted(set(it.fold for it in dataset.items)):
        split = dataset.split(fold)
        X_train, y_train = _fold_vectors(split.train, cols, sequence)
        X_test, y_test = _fold_vectors(split.test, cols, sequence)
        if len(set(y_train)) < 2:
            preds = [y_train[0]] * len(y_test)
        else:
            clf = linear_classifier(len(y_train))
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ConvergenceWarning)
                clf.fit(X_train, y_train)
            if any(issubclass(w.category, ConvergenceWarning) for w in caught):
                count_warning("linear_not_converged")
            preds = clf.predict(X_test).tolist()
        scores.append(macro_f1(preds, y_test, split.vocabulary))
    return float(np.mean(scores))


def featsel_compare(config: ExperimentConfig, dataset: LabeledDataset, corpus: Corpus,
                    method_scores: Dict[str, ImportanceScores], k_sweep: Sequence[int],
                    classifiers: Sequence[str] = CLASSIFIERS) -> pd.DataFrame:
    """
    特征选择比较网格

    各方法的特征排序都来自整个数据集：mi/rfe/rf在全部句子（含各测试折的标签）的聚合特征上拟合，
    注意力取run中所有测试句子alpha的平均。因此每一折使用相同的top-k特征列，
    交叉验证只评估这组特征列上分类器的效果，不评估排序本身的泛化。

    Args:
        config: 实验配置（循环分类器的训练设置）
        dataset: 未归一化的数据集
        corpus: 原始语料
        method_scores: {方法名: 特征重要性}
        k_sweep: 保留的特征数列表
        classifiers: linear / recurrent

    Returns:
        DataFrame: method, k, classifier, features, mean_f1
    """
    d = dataset.d
    bad = [k for k in k_sweep if not 1 <= k <= d]
    if bad:
        raise BridgingInputError(f"k={bad[0]} 超出范围 1..{d}")
    unknown = [c for c in classifiers if c not in CLASSIFIERS]
    if unknown:
        raise BridgingInputError(f"未知的分类器: {unknown[0]}（可选: {', '.join(CLASSIFIERS)}）")

    cache: Dict[Tuple[Tuple[int, ...], str], float] = {}
    rows = []
    cells = [(m, k, c) for m in method_scores for k in k_sweep for c in classifiers]
    for method, k, classifier in tqdm(cells, desc="特征选择比较", disable=None if config.progress else True):
        scores = method_scores[method]
        cols = tuple(sorted(top_k(scores, k)))
        key = (cols, classifier)
        if key not in cache:
            if classifier == "linear":
                cache[key] = linear_cv(dataset, cols)
            else:
                cache[key] = summarize_f1(run_folds(config, dataset, corpus, use_attention=False, features=cols))
        rows.append({
            "method": method,
            "k": k,
            "classifier": classifier,
            "features": ";".join(scores.feature_names[j] for j in cols),
            "mean_f1": cache[key],
        })
        logger.debug(f"{method} k={k} {classifier}: F1={cache[key]:.4f}")
    return pd.DataFrame(rows, columns=["method", "k", "classifier", "features", "mean_f1"])
