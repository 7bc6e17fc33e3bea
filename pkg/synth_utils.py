"""
合成语料生成工具
在一个指定特征上植入与标签相关的均值偏移，其余特征为纯噪声，
为注意力、特征选择和遮蔽验证提供已知的真实答案。
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Any, Dict, Optional, Tuple

import numpy as np
from tqdm import tqdm

from config import HARNESS_CONFIG, SYNTH_CONFIG
from Experiment_Runner import ExperimentConfig, run_cv
from Feature_Selection import dataset_to_aggregated, selection_scores, top_k
from data_utils import EEG_SCHEMA, EYE_SCHEMA, Corpus, SentenceRecord, make_folds, pad, write_corpus_files
from Task_Labels import DatasetItem, LabeledDataset, planted_task, save_dataset
from utils import BridgingInputError, collect_warnings, derive_seed, dump_json, merge_warnings, write_atomic

logger = logging.getLogger(__name__)

SYNTH_TAGS = ("DT", "NN", "NNS", "VBD", "VBZ", "JJ", "RB", "IN", "MD", "VB")
SEQUENCE_TAGS = ("LOW", "HIGH")
LETTERS = np.array(list("abcdefghijklmnopqrstuvwxyz"))


@dataclass
class PlantSpec:
    """植入式合成语料参数"""
    d: int = SYNTH_CONFIG["d"]
    planted: int = SYNTH_CONFIG["planted"]
    effect: float = SYNTH_CONFIG["effect"]
    noise: float = SYNTH_CONFIG["noise"]
    m: int = SYNTH_CONFIG["m"]
    min_len: int = SYNTH_CONFIG["min_len"]
    max_len: int = SYNTH_CONFIG["max_len"]
    kind: str = SYNTH_CONFIG["kind"]
    seed: int = 0
    shared_noise: float = SYNTH_CONFIG["shared_noise"]
    k_folds: int = HARNESS_CONFIG["k_folds"]

    def __post_init__(self):
        if self.d not in (EYE_SCHEMA.d, EEG_SCHEMA.d):
            raise BridgingInputError(f"d必须为 {EYE_SCHEMA.d}（眼动）或 {EEG_SCHEMA.d}（EEG），当前 {self.d}")
        if not 0 <= self.planted < self.d:
            raise BridgingInputError(f"植入特征下标 {self.planted} 超出范围 0..{self.d - 1}")
        if self.effect < 0:
            raise BridgingInputError(f"效应量不能为负: {self.effect}")
        if self.noise <= 0 or self.shared_noise < 0:
            raise BridgingInputError("噪声标准差必须为正，共享噪声不能为负")
        if self.m < 30:
            raise BridgingInputError(f"句子数至少为30，当前 {self.m}")
        if not 2 <= self.min_len <= self.max_len:
            raise BridgingInputError(f"句长范围非法: [{self.min_len}, {self.max_len}]")
        if self.kind not in ("three-class", "binary", "sequence"):
            raise BridgingInputError(f"未知的任务类型: {self.kind}")

    @property
    def signal_type(self) -> str:
        return "eye" if self.d == EYE_SCHEMA.d else "eeg"

    @property
    def n_classes(self) -> int:
        return {"three-class": 3, "binary": 2, "sequence": 2}[self.kind]


def _words(rng: np.random.Generator, n: int) -> Tuple[str, ...]:
    lengths = rng.integers(1, 11, size=n)
    return tuple("".join(rng.choice(LETTERS, size=int(length))) for length in lengths)


def _annotations(rng: np.random.Generator, n: int) -> Dict[str, Any]:
    """随机但合法的语言学标注，使12个任务都能在合成语料上运行"""
    pos = [str(t) for t in rng.choice(SYNTH_TAGS, size=n)]
    pos[0] = str(rng.choice(["NN", "NNS"]))
    nouns = [i for i, t in enumerate(pos) if t in ("NN", "NNS")]
    return {
        "pos": tuple(pos),
        "sense_counts": tuple(int(c) for c in rng.integers(1, 7, size=n)),
        "complex_nominals": int(rng.integers(0, 4)),
        "clauses": int(rng.integers(1, 4)),
        "subject_index": nouns[0],
        "object_index": nouns[-1] if len(nouns) > 1 else None,
        "tense": str(rng.choice(["present", "past", "future"])),
    }


def generate(spec: PlantSpec) -> Tuple[Corpus, LabeledDataset]:
    """
    生成植入式合成语料

    分类任务：标签在各类之间均匀分配，植入特征的每个词在句内加上 (类别-1)·effect·noise 的偏移；
    序列任务：每个词的标签由该词植入特征的符号决定（正为HIGH），再按 ±effect·noise/2 同号偏移，
    effect越大，两类在0附近的间隔越宽。

    Args:
        spec: 合成参数

    Returns:
        (Corpus, LabeledDataset)：语料另一种信号为纯噪声
    """
    rng = np.random.default_rng(spec.seed)
    C = spec.n_classes
    classes = rng.permutation(np.arange(spec.m) % C)
    other_d = EEG_SCHEMA.d if spec.signal_type == "eye" else EYE_SCHEMA.d

    records, targets = [], []
    for i in range(spec.m):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        signals = rng.normal(0.0, spec.noise, size=(n, spec.d))
        if spec.shared_noise > 0:
            signals += rng.normal(0.0, spec.shared_noise, size=(n, 1))
        if spec.kind == "sequence":
            token_classes = (signals[:, spec.planted] > 0).astype(int)
            signals[:, spec.planted] += (token_classes - 0.5) * spec.effect * spec.noise
            targets.append(tuple(SEQUENCE_TAGS[int(c)] for c in token_classes))
        else:
            signals[:, spec.planted] += (int(classes[i]) - 1) * spec.effect * spec.noise
            targets.append(str(int(classes[i])))
        other = rng.normal(0.0, spec.noise, size=(n, other_d))
        eye, eeg = (signals, other) if spec.signal_type == "eye" else (other, signals)
        records.append(SentenceRecord(sentence_id=f"syn{i:04d}", tokens=_words(rng, n), eye=eye, eeg=eeg,
                                      **_annotations(rng, n)))

    corpus = Corpus(records=tuple(records))
    folds = make_folds(corpus, spec.k_folds, derive_seed(spec.seed, "folds"))
    n_max = corpus.n_max
    items = []
    for record, target in zip(corpus.records, targets):
        matrix = pad(record, n_max, spec.signal_type)
        fold = folds[record.sentence_id]
        if spec.kind == "sequence":
            items.append(DatasetItem(record.sentence_id, matrix, fold, tags=target))
        else:
            items.append(DatasetItem(record.sentence_id, matrix, fold, label=target))
    vocabulary = () if spec.kind == "sequence" else tuple(str(c) for c in range(C))
    dataset = LabeledDataset(planted_task(spec.kind), spec.signal_type, tuple(items), folds, vocabulary)
    logger.info(f"生成合成语料: {spec.m} 句, {spec.signal_type} d={spec.d}, 植入特征 "
                f"{corpus.schema(spec.signal_type).feature_names[spec.planted]}, effect={spec.effect}")
    return corpus, dataset


def write_synth_files(spec: PlantSpec, out_dir: str) -> Dict[str, str]:
    """
    生成合成语料并写出信号TSV、标注JSONL、数据集JSONL与参数文件

    Returns:
        {"signals", "annotations", "dataset", "plant_spec"} -> 文件路径
    """
    corpus, dataset = generate(spec)
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "signals": os.path.join(out_dir, "signals.tsv"),
        "annotations": os.path.join(out_dir, "annotations.jsonl"),
        "dataset": os.path.join(out_dir, "dataset.jsonl"),
        "plant_spec": os.path.join(out_dir, "plant_spec.json"),
    }
    write_corpus_files(corpus, paths["signals"], paths["annotations"])
    save_dataset(dataset, paths["dataset"])
    write_atomic(paths["plant_spec"], dump_json(asdict(spec)))
    return paths


def _recovered(method: str, spec: PlantSpec, repetition: int, overrides: Dict[str, Any]) -> bool:
    rep_spec = replace(spec, seed=derive_seed(spec.seed, "repetition", repetition))
    corpus, dataset = generate(rep_spec)
    names = corpus.schema(rep_spec.signal_type).feature_names
    if method == "attention":
        config = ExperimentConfig(task="Planted", signal_type=rep_spec.signal_type, seed=rep_spec.seed,
                                  k_folds=rep_spec.k_folds, progress=False, **overrides)
        _, scores = run_cv(config, dataset, corpus)
    else:
        scores = selection_scores(method, dataset_to_aggregated(dataset, names), seed=rep_spec.seed)
    return top_k(scores, 1)[0] == rep_spec.planted


def _recovered_collecting(method: str, spec: PlantSpec, repetition: int,
                         overrides: Dict[str, Any]) -> Tuple[bool, Dict[str, int]]:
    with collect_warnings() as added:
        hit = _recovered(method, spec, repetition, overrides)
    return hit, dict(added)


def recovery_rate(method: str, spec: PlantSpec, repetitions: int, jobs: int = 1,
                  experiment_overrides: Optional[Dict[str, Any]] = None) -> float:
    """
    方法把植入特征排在第一位的重复实验比例

    Args:
        method: attention / mi / rfe / rf
        spec: 合成参数（每次重复从spec.seed派生新种子）
        repetitions: 重复次数（>=1）
        jobs: 并行进程数
        experiment_overrides: 注意力方法的ExperimentConfig覆盖项（如max_epochs）

    Returns:
        float: 命中比例
    """
    if repetitions < 1:
        raise BridgingInputError(f"重复次数必须>=1，当前 {repetitions}")
    overrides = dict(experiment_overrides or {})
    if jobs <= 1:
        hits = [_recovered(method, spec, r, overrides) for r in tqdm(range(repetitions), desc=f"{method} 复现")]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            outcomes = list(executor.map(_recovered_collecting, [method] * repetitions, [spec] * repetitions,
                                         range(repetitions), [overrides] * repetitions))
        for _, added in outcomes:
            merge_warnings(added)
        hits = [hit for hit, _ in outcomes]
    rate = sum(hits) / repetitions
    logger.info(f"{method} 植入特征复现率: {rate:.2f}（{sum(hits)}/{repetitions}）")
    return rate
