"""
传统特征选择方法模块
在句子级聚合特征上计算互信息、递归特征消除(RFE)和随机森林重要性，
与注意力得分使用相同的schema顺序，便于并排比较。
"""

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.ensemble import RandomForestClassifier
from sklearn.exceptions import ConvergenceWarning
from sklearn.feature_selection import RFE
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import mutual_info_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from config import SELECTION_CONFIG
from Task_Labels import bin3, build_pos_vocabulary
from utils import BridgingInputError, count_warning

logger = logging.getLogger(__name__)

METHODS = ("attention", "mutual-information", "rfe", "random-forest")
METHOD_ALIASES = {"attention": "attention", "mi": "mutual-information", "mutual-information": "mutual-information",
                  "rfe": "rfe", "rf": "random-forest", "random-forest": "random-forest"}


@dataclass
class AggregatedDataset:
    """句子级特征：每个句子对有效词取均值（或最大值）"""
    X: np.ndarray  # m × d
    y: np.ndarray  # m
    feature_names: List[str]
    sentence_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.X.ndim != 2 or self.X.shape[1] != len(self.feature_names):
            raise BridgingInputError(f"聚合特征形状 {self.X.shape} 与特征名数量 {len(self.feature_names)} 不一致")
        if len(self.y) != self.X.shape[0]:
            raise BridgingInputError("聚合特征与标签数量不一致")
        if not np.all(np.isfinite(self.X)):
            raise BridgingInputError("聚合特征包含NaN或Inf")

    @property
    def d(self) -> int:
        return self.X.shape[1]


@dataclass
class ImportanceScores:
    """特征重要性（rfe为排名1..d，其余为非负得分）"""
    method: str
    scores: np.ndarray
    feature_names: List[str]
    normalized: bool = True
    task: str = ""
    signal_type: str = ""

    @property
    def is_rank(self) -> bool:
        return self.method == "rfe"

    def as_dict(self) -> Dict[str, float]:
        return {name: float(s) for name, s in zip(self.feature_names, self.scores)}


def normalize_scores(values: Sequence[float]) -> np.ndarray:
    arr = np.clip(np.asarray(values, dtype=float), 0.0, None)
    total = arr.sum()
    if total <= 0:
        return np.full(len(arr), 1.0 / len(arr))
    return arr / total


def aggregate(matrices, labels: Sequence[int], feature_names: Sequence[str], how: Optional[str] = None,
              sentence_ids: Optional[Sequence[str]] = None) -> AggregatedDataset:
    """
    把变长信号矩阵聚合为句子级向量

    Args:
        matrices: SignalMatrix列表
        labels: 句子标签id
        feature_names: 特征名
        how: mean / max，默认取配置

    Returns:
        AggregatedDataset
    """
    how = how or SELECTION_CONFIG["aggregation"]
    rows = []
    for m in matrices:
        valid = m.H[:m.n]
        if how == "mean":
            rows.append(valid.mean(axis=0))
        elif how == "max":
            rows.append(valid.max(axis=0))
        else:
            raise BridgingInputError(f"未知的聚合方式: {how}")
    X = np.vstack(rows) if rows else np.zeros((0, len(feature_names)))
    return AggregatedDataset(X, np.asarray(labels, dtype=int), list(feature_names), list(sentence_ids or []))


# ---------------------------------------------------------------------------
# 互信息
# ---------------------------------------------------------------------------

def equal_frequency_bins(values: Sequence[float], bins: int) -> np.ndarray:
    """
    等频离散化：阈值取排序后第 ceil(b·m/B) 个值，与阈值相等的值归入较低的箱

    Returns:
        每个值的箱编号
    """
    arr = np.asarray(values, dtype=float)
    ordered = np.sort(arr)
    m = len(arr)
    thresholds = np.unique([ordered[math.ceil(b * m / bins) - 1] for b in range(1, bins)])
    return np.searchsorted(thresholds, arr, side="left")


def mutual_information(data: AggregatedDataset, bins: Optional[int] = None) -> ImportanceScores:
    """
    每个特征与标签的插件式互信息（nats），归一化到和为1

    Args:
        data: 聚合数据
        bins: 等频箱数（>=2），默认取配置
    """
    bins = SELECTION_CONFIG["mi_bins"] if bins is None else bins
    if bins < 2:
        raise BridgingInputError(f"互信息箱数必须>=2，当前 {bins}")
    raw = []
    for j in range(data.d):
        column = data.X[:, j]
        if np.ptp(column) == 0:
            raw.append(0.0)
            continue
        raw.append(float(mutual_info_score(data.y, equal_frequency_bins(column, bins))))
    logger.debug(f"互信息原始值: {np.round(raw, 4).tolist()}")
    return ImportanceScores("mutual-information", normalize_scores(raw), list(data.feature_names))


# ---------------------------------------------------------------------------
# 递归特征消除
# ---------------------------------------------------------------------------

def make_logistic_regression(m: int) -> LogisticRegression:
    """多项逻辑回归，L2惩罚lambda对应sklearn的 C = 1/(lambda·m)"""
    return LogisticRegression(C=1.0 / (SELECTION_CONFIG["rfe_l2"] * max(m, 1)),
                              max_iter=SELECTION_CONFIG["rfe_max_iter"],
                              tol=SELECTION_CONFIG["rfe_tol"])


def rfe_rank(data: AggregatedDataset) -> ImportanceScores:
    """
    递归特征消除：每轮拟合逻辑回归，去掉类别系数列L2范数最小的一个特征

    Returns:
        ImportanceScores: 排名（1为最后保留的特征，d为最先被去掉的特征）
    """
    m, d = data.X.shape
    if m <= d:
        raise BridgingInputError(f"RFE需要样本数大于特征数（m={m}, d={d}）")
    X = StandardScaler().fit_transform(data.X)
    selector = RFE(make_logistic_regression(m), n_features_to_select=1, step=1)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        selector.fit(X, data.y)
    not_converged = sum(1 for w in caught if issubclass(w.category, ConvergenceWarning))
    if not_converged:
        count_warning("rfe_not_converged", not_converged)
        logger.warning(f"⚠️ RFE中有 {not_converged} 次逻辑回归未在 {SELECTION_CONFIG['rfe_max_iter']} 次迭代内收敛，"
                       f"沿用当前系数")
    return ImportanceScores("rfe", selector.ranking_.astype(float), list(data.feature_names), normalized=False)


# ---------------------------------------------------------------------------
# 随机森林
# ---------------------------------------------------------------------------

def rf_importance(data: AggregatedDataset, trees: Optional[int] = None, seed: int = 0,
                  jobs: int = 1) -> ImportanceScores:
    """
    随机森林Gini重要性：每棵树的Gini不纯度下降总量，按树平均并归一化

    Args:
        data: 聚合数据
        trees: 树的数量（>=1）
        seed: 随机种子，固定种子得到完全相同的森林
        jobs: 并行拟合树的进程数
    """
    trees = SELECTION_CONFIG["rf_trees"] if trees is None else trees
    if trees < 1:
        raise BridgingInputError(f"树的数量必须>=1，当前 {trees}")
    forest = RandomForestClassifier(
        n_estimators=trees,
        criterion="gini",
        max_features=math.ceil(math.sqrt(data.d)),
        max_depth=SELECTION_CONFIG["rf_max_depth"],
        min_samples_leaf=SELECTION_CONFIG["rf_min_leaf"],
        bootstrap=True,
        random_state=seed,
        n_jobs=jobs,
    )
    forest.fit(data.X, data.y)
    return ImportanceScores("random-forest", normalize_scores(forest.feature_importances_),
                            list(data.feature_names))


# ---------------------------------------------------------------------------
# top-k
# ---------------------------------------------------------------------------

def top_k(scores: ImportanceScores, k: int) -> List[int]:
    """
    取最重要的k个特征（得分最高，或rfe排名最小），并列时schema靠前者优先

    Returns:
        特征下标列表（按重要性排序）
    """
    d = len(scores.scores)
    if not 1 <= k <= d:
        raise BridgingInputError(f"k={k} 超出范围 1..{d}")
    key = scores.scores if scores.is_rank else -np.asarray(scores.scores, dtype=float)
    order = np.argsort(key, kind="stable")
    return [int(i) for i in order[:k]]


def scores_to_frame(all_scores: Sequence[ImportanceScores]) -> pd.DataFrame:
    """多个方法的得分合并为长表：method, task, signal_type, feature, score_or_rank"""
    rows = []
    for s in all_scores:
        for name, value in zip(s.feature_names, s.scores):
            rows.append({"method": s.method, "task": s.task, "signal_type": s.signal_type,
                         "feature": name, "score_or_rank": float(value)})
    return pd.DataFrame(rows, columns=["method", "task", "signal_type", "feature", "score_or_rank"])


def linear_classifier(m: int):
    """特征选择比较用的线性分类器：标准化 + 多项逻辑回归"""
    return make_pipeline(StandardScaler(), make_logistic_regression(m))


def dataset_to_aggregated(dataset, feature_names: Sequence[str], how: Optional[str] = None) -> AggregatedDataset:
    """
    整个数据集的句子级聚合特征与标签id
    分箱任务在全部样本上拟合三分箱；序列任务退化为逐词样本

    Args:
        dataset: LabeledDataset
        feature_names: 特征名（schema顺序）
        how: mean / max
    """
    items = dataset.items
    if dataset.task.kind == "sequence":
        vocabulary = build_pos_vocabulary(it.tags for it in items)
        index = {tag: i for i, tag in enumerate(vocabulary)}
        X = np.vstack([it.matrix.H[:it.matrix.n] for it in items])
        y = [index[tag] for it in items for tag in it.tags]
        return AggregatedDataset(X, np.asarray(y, dtype=int), list(feature_names))
    if dataset.binned:
        labels = bin3([it.raw_value for it in items]).assign_all(it.raw_value for it in items)
    else:
        index = {name: i for i, name in enumerate(dataset.vocabulary)}
        labels = [index[it.label] for it in items]
    return aggregate([it.matrix for it in items], labels, feature_names, how,
                     [it.sentence_id for it in items])


def selection_scores(method: str, data: AggregatedDataset, seed: int = 0, jobs: int = 1,
                     task: str = "", signal_type: str = "") -> ImportanceScores:
    """按方法名（mi / rfe / rf 或全名）计算特征重要性"""
    name = METHOD_ALIASES.get(method)
    if name is None or name == "attention":
        raise BridgingInputError(f"未知的特征选择方法: {method}（可选: mi, rfe, rf）")
    if name == "mutual-information":
        scores = mutual_information(data)
    elif name == "rfe":
        scores = rfe_rank(data)
    else:
        scores = rf_importance(data, seed=seed, jobs=jobs)
    scores.task, scores.signal_type = task, signal_type
    logger.info(f"{name} 特征重要性计算完成（{task}/{signal_type}）")
    return scores
