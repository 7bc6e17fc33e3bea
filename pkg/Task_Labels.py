"""
桥接任务标签构建模块
根据语料标注和资源词表，为12个桥接任务构建标签：
三分类任务使用训练集等频分箱，BShift构造相邻行交换的负样本，
Tense/SubjNum/ObjNum由POS标签推断。
"""

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from config import TASK_CONFIG
from data_utils import Corpus, NormalizationStats, SentenceRecord, SignalMatrix, pad
from utils import BridgingInputError, count_warning, write_atomic

logger = logging.getLogger(__name__)

BIN_LABELS = ("low", "mid", "high")
NUMBER_LABELS = ("singular", "plural")
TENSE_LABELS = ("present", "past", "future")
BSHIFT_LABELS = ("original", "shifted")
OTHER_TAG = "OTHER"


@dataclass(frozen=True)
class TaskSpec:
    """桥接任务定义"""
    name: str
    kind: str  # three-class / binary / sequence
    required: Tuple[str, ...] = ()
    group: str = ""


TASKS: Dict[str, TaskSpec] = {
    "LD": TaskSpec("LD", "three-class", ("pos",), "lexical"),
    "WordLen": TaskSpec("WordLen", "three-class", (), "lexical"),
    "DP": TaskSpec("DP", "three-class", ("sense_counts",), "lexical"),
    "OOV": TaskSpec("OOV", "three-class", ("common_words",), "lexical"),
    "CNC": TaskSpec("CNC", "three-class", ("complex_nominals", "clauses"), "syntactic"),
    "SenLen": TaskSpec("SenLen", "three-class", (), "syntactic"),
    "POS": TaskSpec("POS", "sequence", ("pos",), "syntactic"),
    "BShift": TaskSpec("BShift", "binary", (), "syntactic"),
    "Tense": TaskSpec("Tense", "three-class", ("tense|pos",), "semantic"),
    "SubjNum": TaskSpec("SubjNum", "binary", ("subject_index", "pos"), "semantic"),
    "ObjNum": TaskSpec("ObjNum", "binary", ("object_index", "pos"), "semantic"),
    "DCC": TaskSpec("DCC", "three-class", ("connectors",), "semantic"),
}
TASK_NAMES = list(TASKS)
TASK_GROUPS = {
    group: [name for name, spec in TASKS.items() if spec.group == group]
    for group in ("lexical", "syntactic", "semantic")
}
BINNED_TASKS = ("LD", "WordLen", "DP", "OOV", "CNC", "SenLen", "DCC")


def get_task(name: str) -> TaskSpec:
    if name not in TASKS:
        raise BridgingInputError(f"未知任务: {name}（可选: {', '.join(TASK_NAMES)}）")
    return TASKS[name]


def planted_task(kind: str) -> TaskSpec:
    """合成语料使用的任务（标签直接由合成器给出）"""
    return TaskSpec("Planted", kind, (), "synthetic")


@dataclass
class Resources:
    """资源词表"""
    common_words: Optional[Set[str]] = None
    connectors: Optional[Set[str]] = None


# ---------------------------------------------------------------------------
# 句子级原始值
# ---------------------------------------------------------------------------

_PUNCT = re.compile(r"^\W+|\W+$")


def _clean_token(token: str) -> str:
    return _PUNCT.sub("", token.lower())


def count_connectors(tokens: Sequence[str], connectors: Iterable[str]) -> int:
    """篇章连接词计数：大小写不敏感，多词连接词最长优先匹配，匹配过的词不再复用"""
    words = [_clean_token(t) for t in tokens]
    patterns = sorted({tuple(c.lower().split()) for c in connectors if c.strip()}, key=lambda p: (-len(p), p))
    count, i = 0, 0
    while i < len(words):
        for pattern in patterns:
            if tuple(words[i:i + len(pattern)]) == pattern:
                count += 1
                i += len(pattern)
                break
        else:
            i += 1
    return count


def is_content_tag(tag: str) -> bool:
    return any(tag.startswith(prefix) for prefix in TASK_CONFIG["content_pos_prefixes"])


def raw_value(task: TaskSpec, record: SentenceRecord, resources: Resources) -> Optional[float]:
    """
    计算句子在分箱任务上的原始数值

    Args:
        task: 任务（LD/WordLen/DP/OOV/CNC/SenLen/DCC）
        record: 句子
        resources: 资源词表

    Returns:
        float: 原始数值；所需标注缺失时返回None并计入告警
    """
    n = record.n
    name = task.name
    per_length = TASK_CONFIG["length_normalize_counts"]
    value: Optional[float] = None

    if name == "WordLen":
        mean_len = sum(len(t) for t in record.tokens) / n
        value = mean_len / n
    elif name == "LD":
        if record.pos is not None:
            value = sum(1 for tag in record.pos if is_content_tag(tag)) / n
    elif name == "DP":
        if record.sense_counts is not None:
            value = float(sum(record.sense_counts))
            value = value / n if per_length else value
    elif name == "OOV":
        if resources.common_words is None:
            raise BridgingInputError("OOV任务需要常用词表（--common-words）")
        value = float(sum(1 for t in record.tokens if _clean_token(t) not in resources.common_words))
        value = value / n if per_length else value
    elif name == "CNC":
        if record.complex_nominals is not None and record.clauses:
            value = record.complex_nominals / record.clauses
    elif name == "SenLen":
        value = float(n)
    elif name == "DCC":
        if resources.connectors is None:
            raise BridgingInputError("DCC任务需要篇章连接词表（--connectors）")
        value = float(count_connectors(record.tokens, resources.connectors))
        value = value / n if per_length else value
    else:
        raise BridgingInputError(f"任务 {name} 不是分箱任务")

    if value is None:
        count_warning(f"skipped:{name}")
    return value


# ---------------------------------------------------------------------------
# 等频三分箱
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Binner:
    """三分箱阈值：v<=t1 -> low, t1<v<=t2 -> mid, 其余 -> high"""
    t1: float
    t2: float

    def assign(self, value: float) -> int:
        if value <= self.t1:
            return 0
        if value <= self.t2:
            return 1
        return 2

    def assign_all(self, values: Iterable[float]) -> List[int]:
        return [self.assign(v) for v in values]


def bin3(values: Sequence[float]) -> Binner:
    """
    在训练集上拟合1/3与2/3经验分位数阈值

    阈值取排序后第 ceil(m/3) 与 ceil(2m/3) 个值（下经验分位数），
    与阈值相等的值归入较低的箱。
    """
    arr = np.sort(np.asarray(list(values), dtype=float))
    if len(arr) < 3 or len(np.unique(arr)) < 3:
        raise BridgingInputError(f"分箱至少需要3个不同的取值，当前 {len(np.unique(arr))} 个")
    m = len(arr)
    t1 = float(arr[math.ceil(m / 3) - 1])
    t2 = float(arr[math.ceil(2 * m / 3) - 1])
    return Binner(t1, t2)


# ---------------------------------------------------------------------------
# 序列、时态、单复数
# ---------------------------------------------------------------------------

def build_pos_vocabulary(tag_sequences: Iterable[Sequence[str]]) -> Tuple[str, ...]:
    """训练集出现过的标签（排序）加保留的OTHER"""
    tags = sorted({tag for seq in tag_sequences for tag in seq if tag != OTHER_TAG})
    return tuple(tags) + (OTHER_TAG,)


def pos_labels(record: SentenceRecord, vocabulary: Optional[Sequence[str]] = None) -> List[Union[str, int]]:
    """
    句子的逐词POS标签

    Args:
        record: 句子（需有POS标注）
        vocabulary: 训练集词表；给出时返回标签id，未见过的标签映射为OTHER

    Returns:
        标签名列表或标签id列表
    """
    if record.pos is None:
        raise BridgingInputError(f"句子 {record.sentence_id} 没有POS标注")
    if vocabulary is None:
        return list(record.pos)
    index = {tag: i for i, tag in enumerate(vocabulary)}
    other = index[OTHER_TAG]
    return [index.get(tag, other) for tag in record.pos]


def tense_label(record: SentenceRecord) -> Optional[str]:
    """
    句子时态：优先使用标注；否则按POS启发式：
    will/shall(MD)后接VB为将来时，其次首个VBP/VBZ/VBG为现在时，再次首个VBD/VBN为过去时
    """
    if record.tense is not None:
        return record.tense
    if record.pos is None:
        count_warning("skipped:Tense")
        return None

    modals = set(TASK_CONFIG["future_modals"])
    tags, words = record.pos, [t.lower() for t in record.tokens]
    for i, tag in enumerate(tags):
        if tag == "MD" and words[i] in modals and "VB" in tags[i + 1:]:
            return "future"
    for tag in tags:
        if tag in ("VBP", "VBZ", "VBG"):
            return "present"
    for tag in tags:
        if tag in ("VBD", "VBN"):
            return "past"
    count_warning("skipped:Tense")
    return None


def number_label(record: SentenceRecord, target: str) -> Optional[str]:
    """主语/宾语单复数：NN/NNP为单数，NNS/NNPS为复数"""
    if target not in ("subject", "object"):
        raise BridgingInputError(f"未知的目标成分: {target}")
    task_name = "SubjNum" if target == "subject" else "ObjNum"
    index = record.subject_index if target == "subject" else record.object_index
    if index is None or record.pos is None:
        count_warning(f"skipped:{task_name}")
        return None
    tag = record.pos[index]
    if tag in ("NN", "NNP"):
        return "singular"
    if tag in ("NNS", "NNPS"):
        return "plural"
    count_warning(f"skipped:{task_name}")
    return None


# ---------------------------------------------------------------------------
# 数据集
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetItem:
    sentence_id: str
    matrix: SignalMatrix
    fold: int
    label: Optional[str] = None  # 固定标签（分箱任务为None，按折计算）
    tags: Optional[Tuple[str, ...]] = None  # 序列任务的逐词标签
    raw_value: Optional[float] = None  # 分箱任务的原始值
    swap_index: Optional[int] = None  # BShift负样本交换的行


@dataclass(frozen=True)
class Example:
    """某一折中带标签id的样本"""
    sentence_id: str
    matrix: SignalMatrix
    target: Union[int, Tuple[int, ...]]


@dataclass(frozen=True)
class FoldSplit:
    test_fold: int
    train: List[Example]
    test: List[Example]
    vocabulary: Tuple[str, ...]
    binner: Optional[Binner] = None

    @property
    def train_ids(self) -> List[str]:
        return sorted({e.sentence_id for e in self.train})

    @property
    def test_ids(self) -> List[str]:
        return sorted({e.sentence_id for e in self.test})


@dataclass(frozen=True)
class LabeledDataset:
    """一个任务、一种信号的数据集"""
    task: TaskSpec
    signal_type: str
    items: Tuple[DatasetItem, ...]
    folds: Dict[str, int]
    vocabulary: Tuple[str, ...] = ()  # 固定标签任务的标签表

    def __len__(self) -> int:
        return len(self.items)

    @property
    def k(self) -> int:
        return max(self.folds.values()) + 1

    @property
    def d(self) -> int:
        return self.items[0].matrix.d

    @property
    def n_max(self) -> int:
        return self.items[0].matrix.n_max

    @property
    def binned(self) -> bool:
        return bool(self.items) and self.items[0].raw_value is not None and self.items[0].label is None

    def split(self, test_fold: int) -> FoldSplit:
        """
        划分某一折：分箱阈值与POS词表只用训练部分拟合

        Args:
            test_fold: 测试折编号

        Returns:
            FoldSplit
        """
        train_items = [it for it in self.items if it.fold != test_fold]
        test_items = [it for it in self.items if it.fold == test_fold]
        if not train_items or not test_items:
            raise BridgingInputError(f"第 {test_fold} 折的训练集或测试集为空")

        binner = None
        if self.task.kind == "sequence":
            vocabulary = build_pos_vocabulary(it.tags for it in train_items)
            index = {tag: i for i, tag in enumerate(vocabulary)}
            other = index[OTHER_TAG]

            def target_of(it):
                return tuple(index.get(tag, other) for tag in it.tags)
        elif self.binned:
            binner = bin3([it.raw_value for it in train_items])
            vocabulary = BIN_LABELS

            def target_of(it):
                return binner.assign(it.raw_value)
        else:
            vocabulary = self.vocabulary
            index = {name: i for i, name in enumerate(vocabulary)}

            def target_of(it):
                return index[it.label]

        train = [Example(it.sentence_id, it.matrix, target_of(it)) for it in train_items]
        test = [Example(it.sentence_id, it.matrix, target_of(it)) for it in test_items]
        return FoldSplit(test_fold, train, test, tuple(vocabulary), binner)

    def apply_stats(self, stats: NormalizationStats) -> "LabeledDataset":
        """用拟合好的统计量归一化每个矩阵的有效行，补齐行保持为0"""
        center, scale = stats.center[self.signal_type], stats.scale[self.signal_type]
        items = []
        for it in self.items:
            H = np.zeros_like(it.matrix.H)
            n = it.matrix.n
            H[:n] = (it.matrix.H[:n] - center) / scale
            H.setflags(write=False)
            items.append(replace(it, matrix=SignalMatrix(H, n, it.matrix.signal_type)))
        return replace(self, items=tuple(items))

    def mask_feature(self, feature: int, folds: Optional[Iterable[int]] = None) -> "LabeledDataset":
        """把某个特征列置0（归一化空间中即训练均值），默认作用于全部样本"""
        wanted = set(folds) if folds is not None else None
        items = []
        for it in self.items:
            if wanted is not None and it.fold not in wanted:
                items.append(it)
                continue
            H = it.matrix.H.copy()
            H[:, feature] = 0.0
            H.setflags(write=False)
            items.append(replace(it, matrix=SignalMatrix(H, it.matrix.n, it.matrix.signal_type)))
        return replace(self, items=tuple(items))

    def select_features(self, features: Sequence[int]) -> "LabeledDataset":
        """只保留给定特征列（按给定顺序）"""
        cols = list(features)
        items = []
        for it in self.items:
            H = it.matrix.H[:, cols].copy()
            H.setflags(write=False)
            items.append(replace(it, matrix=SignalMatrix(H, it.matrix.n, it.matrix.signal_type)))
        return replace(self, items=tuple(items))


def _swap_rows(matrix: SignalMatrix, i: int) -> SignalMatrix:
    H = matrix.H.copy()
    H[[i, i + 1]] = H[[i + 1, i]]
    H.setflags(write=False)
    return SignalMatrix(H, matrix.n, matrix.signal_type)


def bshift_pairs(corpus: Corpus, seed: int, signal_type: str = "eye",
                 folds: Optional[Dict[str, int]] = None, n_max: Optional[int] = None) -> LabeledDataset:
    """
    BShift数据集：每个句子一个原序正样本、一个相邻两行信号交换的负样本

    Args:
        corpus: 语料
        seed: 交换位置的随机种子
        signal_type: eye / eeg
        folds: 折分配（同一句子的正负样本在同一折）
        n_max: 补齐长度，默认取语料最长句

    Returns:
        LabeledDataset: 正负样本数量完全相等
    """
    rng = np.random.default_rng(seed)
    n_max = n_max or corpus.n_max
    folds = folds if folds is not None else {sid: 0 for sid in corpus.ids}
    items = []
    for record in corpus.records:
        if record.n < 2:
            count_warning("skipped:BShift")
            continue
        base = pad(record, n_max, signal_type)
        i = int(rng.integers(0, record.n - 1))
        fold = folds[record.sentence_id]
        items.append(DatasetItem(record.sentence_id, base, fold, label="original"))
        items.append(DatasetItem(record.sentence_id, _swap_rows(base, i), fold, label="shifted", swap_index=i))
    kept = {it.sentence_id for it in items}
    return LabeledDataset(TASKS["BShift"], signal_type, tuple(items),
                          {sid: f for sid, f in folds.items() if sid in kept}, BSHIFT_LABELS)


def build_dataset(task_name: str, corpus: Corpus, signal_type: str, folds: Dict[str, int],
                  resources: Optional[Resources] = None, seed: int = 0,
                  n_max: Optional[int] = None) -> LabeledDataset:
    """
    为任意一个桥接任务构建数据集

    Args:
        task_name: 12个任务之一
        corpus: 语料（未归一化，归一化在每折内进行）
        signal_type: eye / eeg
        folds: sentence_id -> 折编号
        resources: 资源词表
        seed: BShift的随机种子
        n_max: 补齐长度

    Returns:
        LabeledDataset
    """
    task = get_task(task_name)
    resources = resources or Resources()
    n_max = n_max or corpus.n_max

    if task.name == "BShift":
        return bshift_pairs(corpus, seed, signal_type, folds, n_max)

    items = []
    for record in corpus.records:
        fold = folds[record.sentence_id]
        if task.name in BINNED_TASKS:
            value = raw_value(task, record, resources)
            if value is None:
                continue
            items.append(DatasetItem(record.sentence_id, pad(record, n_max, signal_type), fold, raw_value=value))
        elif task.name == "POS":
            if record.pos is None:
                count_warning("skipped:POS")
                continue
            items.append(DatasetItem(record.sentence_id, pad(record, n_max, signal_type), fold,
                                     tags=tuple(pos_labels(record))))
        else:
            if task.name == "Tense":
                label = tense_label(record)
            else:
                label = number_label(record, "subject" if task.name == "SubjNum" else "object")
            if label is None:
                continue
            items.append(DatasetItem(record.sentence_id, pad(record, n_max, signal_type), fold, label=label))

    if not items:
        raise BridgingInputError(f"任务 {task.name} 缺少所需标注，没有可用的句子（需要: {', '.join(task.required)}）")

    vocabulary: Tuple[str, ...] = ()
    if task.name == "Tense":
        present = {it.label for it in items}
        vocabulary = tuple(t for t in TENSE_LABELS if t in present)
        if "future" not in present:
            logger.info("Tense任务没有将来时样本，退化为二分类")
    elif task.name in ("SubjNum", "ObjNum"):
        vocabulary = NUMBER_LABELS

    skipped = len(corpus) - len(items)
    if skipped:
        logger.warning(f"⚠️ 任务 {task.name} 跳过 {skipped} 个缺少标注的句子")
    kept = {it.sentence_id for it in items}
    return LabeledDataset(task, signal_type, tuple(items),
                          {sid: f for sid, f in folds.items() if sid in kept}, vocabulary)


# ---------------------------------------------------------------------------
# 序列化
# ---------------------------------------------------------------------------

def save_dataset(dataset: LabeledDataset, path: str) -> None:
    """
    JSON-lines序列化：每个样本一行
    分箱任务的label为该样本所在测试折阈值下的标签，并附带raw_value以便无损还原
    """
    labels_by_fold: Dict[int, Binner] = {}
    if dataset.binned:
        for f in sorted(set(dataset.folds.values())):
            labels_by_fold[f] = dataset.split(f).binner
    lines = []
    for it in dataset.items:
        obj = {"sentence_id": it.sentence_id, "task": dataset.task.name, "kind": dataset.task.kind,
               "signal_type": dataset.signal_type, "fold": it.fold}
        if it.tags is not None:
            obj["label_sequence"] = list(it.tags)
        elif it.raw_value is not None and it.label is None:
            obj["label"] = BIN_LABELS[labels_by_fold[it.fold].assign(it.raw_value)]
            obj["raw_value"] = it.raw_value
        else:
            obj["label"] = it.label
        if it.swap_index is not None:
            obj["bshift_swap_index"] = it.swap_index
        lines.append(json.dumps(obj, ensure_ascii=False, sort_keys=True))
    write_atomic(path, "\n".join(lines) + "\n")


def load_dataset(path: str, corpus: Corpus, n_max: Optional[int] = None) -> LabeledDataset:
    """读取序列化数据集，信号矩阵从语料重建"""
    n_max = n_max or corpus.n_max
    items, folds = [], {}
    task, signal_type = None, None
    labels_seen: List[str] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            obj = json.loads(line)
            name = obj["task"]
            task = TASKS.get(name) or planted_task(obj.get("kind", "three-class"))
            signal_type = obj["signal_type"]
            try:
                record = corpus.get(obj["sentence_id"])
            except KeyError:
                raise BridgingInputError(f"数据集第 {line_no} 行的句子 {obj['sentence_id']} 不在语料中")
            matrix = pad(record, n_max, signal_type)
            swap = obj.get("bshift_swap_index")
            if swap is not None:
                matrix = _swap_rows(matrix, swap)
            folds[record.sentence_id] = obj["fold"]
            if "label_sequence" in obj:
                items.append(DatasetItem(record.sentence_id, matrix, obj["fold"], tags=tuple(obj["label_sequence"])))
            elif "raw_value" in obj:
                items.append(DatasetItem(record.sentence_id, matrix, obj["fold"], raw_value=obj["raw_value"]))
            else:
                items.append(DatasetItem(record.sentence_id, matrix, obj["fold"], label=obj["label"],
                                         swap_index=swap))
                if obj["label"] not in labels_seen:
                    labels_seen.append(obj["label"])
    if task is None:
        raise BridgingInputError(f"数据集文件 {path} 为空")

    if task.name == "BShift":
        vocabulary = BSHIFT_LABELS
    elif task.name == "Tense":
        vocabulary = tuple(t for t in TENSE_LABELS if t in labels_seen)
    elif task.name in ("SubjNum", "ObjNum"):
        vocabulary = NUMBER_LABELS
    else:
        vocabulary = tuple(sorted(labels_seen, key=_label_sort_key))
    return LabeledDataset(task, signal_type, tuple(items), folds, vocabulary)


def _label_sort_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)
