"""
交叉验证实验编排模块
每一折：用训练折拟合归一化 → 训练桥接模型（早停） → 在测试折上评估，
并把测试句子的注意力向量汇总为任务级的特征重要性。
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.metrics import precision_recall_fscore_support
from tqdm import tqdm

from autograd_utils import AdamState, CompGraph, adam_step, clip_grad_norm, mean_of
from Bridging_Model import BridgingModel, ModelConfig, inverse_frequency_weights
from config import HARNESS_CONFIG, OPTIMIZER_CONFIG, TRAINING_CONFIG
from data_utils import Corpus, NormalizationStats, SignalSchema, assert_no_leakage, fit_stats
from Feature_Selection import ImportanceScores, normalize_scores
from Task_Labels import Example, FoldSplit, LabeledDataset
from utils import BridgingInputError, collect_warnings, count_warning, derive_seed, merge_warnings

logger = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    """一次交叉验证实验的配置"""
    task: str
    signal_type: str
    seed: int
    k_folds: int = HARNESS_CONFIG["k_folds"]
    model: Optional[ModelConfig] = None
    masking: bool = HARNESS_CONFIG["masking"]
    mask_retrain: bool = HARNESS_CONFIG["mask_retrain"]
    featsel_methods: List[str] = field(default_factory=lambda: list(HARNESS_CONFIG["featsel_methods"]))
    k_sweep: List[int] = field(default_factory=list)
    max_epochs: int = TRAINING_CONFIG["max_epochs"]
    patience: int = TRAINING_CONFIG["patience"]
    batch_size: int = TRAINING_CONFIG["batch_size"]
    validation_fraction: float = TRAINING_CONFIG["validation_fraction"]
    jobs: int = HARNESS_CONFIG["jobs"]
    progress: bool = True

    def __post_init__(self):
        if self.k_folds < 2:
            raise BridgingInputError(f"折数必须>=2，当前 {self.k_folds}")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise BridgingInputError("max_epochs、patience、batch_size 必须为正数")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise BridgingInputError(f"验证集比例必须在[0, 1)内，当前 {self.validation_fraction}")
        if self.jobs < 1:
            raise BridgingInputError(f"并行进程数必须>=1，当前 {self.jobs}")
        if self.model is None:
            self.model = ModelConfig.for_task(self.task, self.signal_type, self.seed)


@dataclass
class FoldResult:
    """单折结果"""
    fold: int
    macro_f1: float
    per_class: Dict[str, Dict[str, float]]
    mean_alpha: Optional[np.ndarray]
    best_epoch: int
    n_test: int
    flagged: bool = False
    model_state: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    stats: Optional[NormalizationStats] = field(default=None, repr=False)
    vocabulary: Tuple[str, ...] = ()
    n_labels: int = 0
    class_weights: Optional[List[float]] = None


@dataclass
class TrainingHistory:
    best_epoch: int = 0
    best_f1: float = -1.0
    epochs_run: int = 0
    losses: List[float] = field(default_factory=list)
    valid_f1: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# 指标
# ---------------------------------------------------------------------------

def _flatten(values) -> List[int]:
    flat = []
    for v in values:
        if isinstance(v, (list, tuple)):
            flat.extend(int(x) for x in v)
        else:
            flat.append(int(v))
    return flat


def per_class_scores(predictions, golds, vocabulary: Sequence[str]) -> Dict[str, Dict[str, float]]:
    """
    各类别的precision / recall / F1，只包含在预测或金标准中出现过的类别

    Args:
        predictions: 预测id（序列任务为id序列，按词展开）
        golds: 金标准id
        vocabulary: 标签表

    Returns:
        {标签: {"precision", "recall", "f1", "support"}}
    """
    pred, gold = _flatten(predictions), _flatten(golds)
    if not gold:
        raise BridgingInputError("评估样本为空")
    if len(pred) != len(gold):
        raise BridgingInputError(f"预测数量 {len(pred)} 与金标准数量 {len(gold)} 不一致")
    present = sorted(set(pred) | set(gold))
    precision, recall, f1, support = precision_recall_fscore_support(
        gold, pred, labels=present, average=None, zero_division=0)
    return {
        vocabulary[c]: {"precision": float(p), "recall": float(r), "f1": float(f), "support": int(s)}
        for c, p, r, f, s in zip(present, precision, recall, f1, support)
    }


def macro_f1(predictions, golds, vocabulary: Sequence[str]) -> float:
    """各类别F1的算术平均（预测和金标准中都没有出现的类别不计入）"""
    scores = per_class_scores(predictions, golds, vocabulary)
    return float(np.mean([s["f1"] for s in scores.values()]))


# ---------------------------------------------------------------------------
# 训练与评估
# ---------------------------------------------------------------------------

def validation_split(train: List[Example], fraction: float, seed: int) -> Tuple[List[Example], List[Example]]:
    """按句子id划出验证集（BShift同一句子的两个样本不拆开）"""
    if fraction <= 0:
        return train, []
    ids = sorted({e.sentence_id for e in train})
    if len(ids) < 2:
        return train, []
    rng = np.random.default_rng(seed)
    n_valid = max(1, math.ceil(fraction * len(ids)))
    chosen = {ids[int(i)] for i in rng.permutation(len(ids))[:n_valid]}
    return [e for e in train if e.sentence_id not in chosen], [e for e in train if e.sentence_id in chosen]


def evaluate(model: BridgingModel, examples: Sequence[Example], vocabulary: Sequence[str]):
    """
    在样本集上评估模型

    Returns:
        (macro_f1, per_class, predictions)
    """
    predictions = [model.predict(e.matrix) for e in examples]
    golds = [e.target for e in examples]
    per_class = per_class_scores(predictions, golds, vocabulary)
    return float(np.mean([s["f1"] for s in per_class.values()])), per_class, predictions


def train_model(model: BridgingModel, train: Sequence[Example], valid: Sequence[Example],
                vocabulary: Sequence[str], seed: int, max_epochs: int = TRAINING_CONFIG["max_epochs"],
                patience: int = TRAINING_CONFIG["patience"], batch_size: int = TRAINING_CONFIG["batch_size"],
                progress: bool = True, desc: str = "训练") -> TrainingHistory:
    """
    小批量训练：批内loss取平均，按全局范数裁剪后Adam更新；
    以验证集macro-F1早停并恢复最优参数

    Args:
        model: 待训练模型（原地更新）
        train: 训练样本
        valid: 验证样本，为空时训练满max_epochs
        vocabulary: 标签表
        seed: 打乱顺序的种子
        max_epochs: 最大轮数
        patience: 验证F1连续不提升的容忍轮数
        batch_size: 批大小
        progress: 是否显示进度条

    Returns:
        TrainingHistory
    """
    if not train:
        raise BridgingInputError("训练集为空")
    params = model.parameters()
    state = AdamState(lr=OPTIMIZER_CONFIG["lr"])
    history = TrainingHistory()
    best_state = model.state_dict()
    stale = 0

    bar = tqdm(range(1, max_epochs + 1), desc=desc, leave=False, disable=None if progress else True)
    for epoch in bar:
        order = np.random.default_rng(derive_seed(seed, "epoch", epoch)).permutation(len(train))
        epoch_loss = 0.0
        for start in range(0, len(order), batch_size):
            batch = [train[int(i)] for i in order[start:start + batch_size]]
            model.zero_grad()
            graph = CompGraph("batch")
            loss = graph.forward(lambda: mean_of([model.loss(e.matrix, e.target) for e in batch]))
            grads = graph.backward(loss, params.values())
            grads, _ = clip_grad_norm(grads, OPTIMIZER_CONFIG["clip_norm"])
            adam_step(params, grads, state)
            epoch_loss += loss.item() * len(batch)
        history.losses.append(epoch_loss / len(train))
        history.epochs_run = epoch

        if not valid:
            history.best_epoch = epoch
            best_state = model.state_dict()
            continue
        f1, _, _ = evaluate(model, valid, vocabulary)
        history.valid_f1.append(f1)
        bar.set_postfix(loss=f"{history.losses[-1]:.4f}", f1=f"{f1:.4f}")
        if f1 > history.best_f1:
            history.best_f1, history.best_epoch = f1, epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                logger.debug(f"第 {epoch} 轮早停，最优轮次 {history.best_epoch}")
                break

    model.load_state_dict(best_state)
    return history


# ---------------------------------------------------------------------------
# 交叉验证
# ---------------------------------------------------------------------------

def _missing_class(split: FoldSplit, kind: str) -> bool:
    if kind == "sequence":
        return False
    wanted = set(range(len(split.vocabulary)))
    return wanted != {e.target for e in split.train} or wanted != {e.target for e in split.test}


def build_fold_model(config: ExperimentConfig, dataset: LabeledDataset, fold: int, split: FoldSplit,
                     use_attention: Optional[bool] = None) -> BridgingModel:
    model_config = replace(config.model, seed=derive_seed(config.seed, "fold", fold))
    if use_attention is not None:
        model_config = replace(model_config, use_attention=use_attention)
    class_weights = None
    if model_config.loss == "focal" and dataset.task.kind != "sequence":
        class_weights = inverse_frequency_weights([e.target for e in split.train], len(split.vocabulary))
    return BridgingModel(model_config, dataset.d, dataset.n_max, dataset.task.kind, len(split.vocabulary),
                         class_weights)


def normalized_for_fold(dataset: LabeledDataset, corpus: Corpus, fold: int) -> Tuple[LabeledDataset, NormalizationStats]:
    """用训练折拟合归一化统计量并作用于整个数据集，断言测试折没有参与拟合"""
    raw = dataset.split(fold)
    stats = fit_stats(corpus, raw.train_ids)
    assert_no_leakage(stats, raw.test_ids)
    return dataset.apply_stats(stats), stats


def run_fold(config: ExperimentConfig, dataset: LabeledDataset, corpus: Corpus, fold: int,
             use_attention: Optional[bool] = None, progress: bool = True,
             masked: Sequence[int] = (), features: Optional[Sequence[int]] = None) -> FoldResult:
    """
    运行单折：归一化、训练、评估、汇总测试句子的注意力

    Args:
        config: 实验配置
        dataset: 未归一化的数据集
        corpus: 原始语料（用于拟合归一化）
        fold: 测试折编号
        use_attention: 覆盖模型配置中的注意力开关
        progress: 是否显示训练进度条
        masked: 归一化后在所有样本上置0的特征列（遮蔽后重新训练）
        features: 只保留的特征列（特征选择比较）

    Returns:
        FoldResult
    """
    normalized, stats = normalized_for_fold(dataset, corpus, fold)
    for j in masked:
        normalized = normalized.mask_feature(j)
    if features is not None:
        normalized = normalized.select_features(features)
    split = normalized.split(fold)
    model = build_fold_model(config, normalized, fold, split, use_attention)
    model.fingerprint = stats.fingerprint

    train, valid = validation_split(split.train, config.validation_fraction,
                                    derive_seed(config.seed, "valid", fold))
    history = train_model(model, train, valid, split.vocabulary, derive_seed(config.seed, "order", fold),
                          config.max_epochs, config.patience, config.batch_size,
                          progress=progress, desc=f"{config.task}/{config.signal_type} 第{fold}折")
    f1, per_class, _ = evaluate(model, split.test, split.vocabulary)

    mean_alpha = None
    if model.attention_params is not None:
        mean_alpha = np.mean([model.attention(e.matrix) for e in split.test], axis=0)

    flagged = _missing_class(split, dataset.task.kind)
    logger.info(f"{config.task}/{config.signal_type} 第 {fold} 折: macro-F1={f1:.4f}，最优轮次 {history.best_epoch}"
                + ("（缺少类别，已标记）" if flagged else ""))
    return FoldResult(fold=fold, macro_f1=f1, per_class=per_class, mean_alpha=mean_alpha,
                      best_epoch=history.best_epoch, n_test=len(split.test), flagged=flagged,
                      model_state=model.state_dict(), stats=stats, vocabulary=split.vocabulary,
                      n_labels=len(split.vocabulary), class_weights=model.class_weights)


def run_fold_collecting(*args) -> Tuple[FoldResult, Dict[str, int]]:
    """在工作进程中运行单折，并返回该折新增的告警计数"""
    with collect_warnings() as added:
        result = run_fold(*args)
    return result, dict(added)


def run_folds(config: ExperimentConfig, dataset: LabeledDataset, corpus: Corpus,
              use_attention: Optional[bool] = None, masked: Sequence[int] = (),
              features: Optional[Sequence[int]] = None) -> List[FoldResult]:
    """按配置串行或多进程运行全部折，结果按折编号排序"""
    folds = sorted(set(it.fold for it in dataset.items))
    if len(folds) != config.k_folds:
        raise BridgingInputError(f"数据集有 {len(folds)} 折，与配置的 k={config.k_folds} 不一致")
    disable = None if config.progress else True
    results: List[FoldResult] = []
    if config.jobs <= 1:
        for fold in tqdm(folds, desc="折", disable=disable):
            results.append(run_fold(config, dataset, corpus, fold, use_attention, config.progress,
                                    masked, features))
    else:
        with ProcessPoolExecutor(max_workers=min(config.jobs, len(folds))) as executor:
            futures = [executor.submit(run_fold_collecting, config, dataset, corpus, fold, use_attention, False,
                                       masked, features)
                       for fold in folds]
            for future in tqdm(as_completed(futures), total=len(futures), desc="折", disable=disable):
                result, added = future.result()
                merge_warnings(added)
                results.append(result)
    return sorted(results, key=lambda r: r.fold)


def summarize_f1(results: Sequence[FoldResult]) -> float:
    """未被标记折的平均macro-F1；全部被标记时退回所有折的平均"""
    kept = [r.macro_f1 for r in results if not r.flagged]
    if len(kept) < len(results):
        count_warning("flagged_folds", len(results) - len(kept))
        logger.warning(f"⚠️ {len(results) - len(kept)} 个折缺少类别，不计入平均F1")
    if not kept:
        kept = [r.macro_f1 for r in results]
    return float(np.mean(kept))


def run_cv(config: ExperimentConfig, dataset: LabeledDataset,
           corpus: Corpus) -> Tuple[List[FoldResult], Optional[ImportanceScores]]:
    """
    k折交叉验证

    Args:
        config: 实验配置
        dataset: 已分折的数据集（未归一化）
        corpus: 原始语料

    Returns:
        (各折结果, 注意力特征重要性)；注意力为未标记折中所有测试句子alpha的平均，归一化到和为1
    """
    results = run_folds(config, dataset, corpus)
    logger.info(f"✅ {config.task}/{config.signal_type} 平均macro-F1={summarize_f1(results):.4f}")

    scores = aggregate_attention(results, dataset_feature_names(dataset, corpus), config.task, config.signal_type)
    return results, scores


def aggregate_attention(results: Sequence[FoldResult], feature_names: Sequence[str], task: str = "",
                        signal_type: str = "") -> Optional[ImportanceScores]:
    """
    按测试句子数加权平均各折的alpha并归一化；被标记的折不参与，全部被标记时退回所有折

    Returns:
        ImportanceScores，模型没有注意力层时为None
    """
    with_alpha = [r for r in results if r.mean_alpha is not None]
    kept = [r for r in with_alpha if not r.flagged] or with_alpha
    if not kept:
        return None
    total = sum(r.mean_alpha * r.n_test for r in kept)
    alpha = normalize_scores(total / sum(r.n_test for r in kept))
    return ImportanceScores("attention", alpha, list(feature_names), task=task, signal_type=signal_type)


def dataset_feature_names(dataset: LabeledDataset, corpus: Corpus) -> Tuple[str, ...]:
    return corpus.schema(dataset.signal_type).feature_names


def restore_fold_model(config: ExperimentConfig, dataset: LabeledDataset, result: FoldResult) -> BridgingModel:
    """由折结果中保存的参数重建训练好的模型"""
    model_config = replace(config.model, seed=derive_seed(config.seed, "fold", result.fold))
    model = BridgingModel(model_config, dataset.d, dataset.n_max, dataset.task.kind, result.n_labels,
                          result.class_weights)
    model.load_state_dict(result.model_state)
    model.fingerprint = result.stats.fingerprint if result.stats is not None else None
    return model


# ---------------------------------------------------------------------------
# 报告视图
# ---------------------------------------------------------------------------

def attention_grid(results: Dict[str, ImportanceScores]) -> pd.DataFrame:
    """
    特征 × 任务的注意力表，每列和为1

    Args:
        results: {任务名: 注意力得分}，同一种信号

    Returns:
        DataFrame: 行为特征（schema顺序），列为任务
    """
    if not results:
        raise BridgingInputError("没有可汇总的注意力结果")
    names = None
    columns = {}
    for task, scores in results.items():
        if names is not None and list(scores.feature_names) != names:
            raise BridgingInputError(f"任务 {task} 的特征顺序与其他任务不一致")
        names = list(scores.feature_names)
        columns[task] = normalize_scores(scores.scores)
    frame = pd.DataFrame(columns, index=names)
    frame.index.name = "feature"
    return frame


EEG_FAMILIES = {"t": "theta", "a": "alpha", "b": "beta", "g": "gamma"}


def stage_summary(scores: ImportanceScores, schema: SignalSchema) -> Dict[str, float]:
    """按眼动阅读阶段（EEG按频段族）汇总注意力"""
    summary: Dict[str, float] = {}
    for name, value in zip(scores.feature_names, scores.scores):
        if schema.signal_type == "eye":
            group = schema.stage_of(name) or "OTHER"
        else:
            group = EEG_FAMILIES.get(name[:1], name)
        summary[group] = summary.get(group, 0.0) + float(value)
    return summary
