"""
语料数据模块
定义认知信号语料的数据结构，读取信号/标注文件，信号归一化、句子补齐与交叉验证分折
"""

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from config import DATA_CONFIG, EEG_BANDS, EEG_FEATURES, EYE_FEATURES, EYE_STAGES
from utils import BridgingInputError, count_warning, dump_json, ids_fingerprint, write_atomic

logger = logging.getLogger(__name__)

SIGNAL_TYPES = ("eye", "eeg")
TENSES = ("present", "past", "future")
ANNOTATION_KEYS = (
    "sentence_id", "pos", "sense_counts", "complex_nominals", "clauses",
    "subject_index", "object_index", "tense",
)


@dataclass(frozen=True)
class SignalSchema:
    """一种认知信号的特征定义"""
    signal_type: str
    feature_names: Tuple[str, ...]
    groups: Dict[str, Tuple] = field(default_factory=dict)  # 眼动: 阅读阶段; EEG: 频段范围

    @property
    def d(self) -> int:
        return len(self.feature_names)

    def stage_of(self, feature: str) -> Optional[str]:
        if self.signal_type != "eye":
            return None
        for stage, names in self.groups.items():
            if feature in names:
                return stage
        return None


EYE_SCHEMA = SignalSchema("eye", tuple(EYE_FEATURES), {k: tuple(v) for k, v in EYE_STAGES.items()})
EEG_SCHEMA = SignalSchema("eeg", tuple(EEG_FEATURES), dict(EEG_BANDS))


def get_schema(signal_type: str) -> SignalSchema:
    if signal_type == "eye":
        return EYE_SCHEMA
    if signal_type == "eeg":
        return EEG_SCHEMA
    raise BridgingInputError(f"未知的信号类型: {signal_type}（可选 eye / eeg）")


@dataclass(frozen=True)
class SentenceRecord:
    """一个句子：词序列、逐词信号与语言学标注"""
    sentence_id: str
    tokens: Tuple[str, ...]
    eye: np.ndarray
    eeg: np.ndarray
    pos: Optional[Tuple[str, ...]] = None
    sense_counts: Optional[Tuple[int, ...]] = None
    complex_nominals: Optional[int] = None
    clauses: Optional[int] = None
    subject_index: Optional[int] = None
    object_index: Optional[int] = None
    tense: Optional[str] = None

    def __post_init__(self):
        n = len(self.tokens)
        if n < 1:
            raise BridgingInputError(f"句子 {self.sentence_id} 没有词")
        if self.eye.shape != (n, EYE_SCHEMA.d) or self.eeg.shape != (n, EEG_SCHEMA.d):
            raise BridgingInputError(
                f"句子 {self.sentence_id} 信号形状 {self.eye.shape}/{self.eeg.shape} 与词数 {n} 不一致")
        if not (np.all(np.isfinite(self.eye)) and np.all(np.isfinite(self.eeg))):
            raise BridgingInputError(f"句子 {self.sentence_id} 信号包含NaN或Inf")
        if self.pos is not None and len(self.pos) != n:
            raise BridgingInputError(f"句子 {self.sentence_id} 的POS标注有 {len(self.pos)} 个，词数为 {n}")
        if self.sense_counts is not None and len(self.sense_counts) != n:
            raise BridgingInputError(
                f"句子 {self.sentence_id} 的词义数标注有 {len(self.sense_counts)} 个，词数为 {n}")
        for key in ("subject_index", "object_index"):
            idx = getattr(self, key)
            if idx is not None and not 0 <= idx < n:
                raise BridgingInputError(f"句子 {self.sentence_id} 的 {key}={idx} 超出范围 0..{n - 1}")
        if self.tense is not None and self.tense not in TENSES:
            raise BridgingInputError(f"句子 {self.sentence_id} 的时态 {self.tense} 不在 {TENSES} 中")
        self.eye.setflags(write=False)
        self.eeg.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.tokens)

    def signals(self, signal_type: str) -> np.ndarray:
        if signal_type == "eye":
            return self.eye
        if signal_type == "eeg":
            return self.eeg
        raise BridgingInputError(f"未知的信号类型: {signal_type}")


@dataclass(frozen=True)
class NormalizationStats:
    """归一化统计量，带拟合集指纹"""
    method: str
    center: Dict[str, np.ndarray]  # zscore: 均值; minmax: 最小值
    scale: Dict[str, np.ndarray]  # zscore: 标准差; minmax: 极差（常数列截断为1）
    fit_ids: frozenset
    fingerprint: str


@dataclass(frozen=True)
class Corpus:
    """不可变语料"""
    records: Tuple[SentenceRecord, ...]
    eye_schema: SignalSchema = EYE_SCHEMA
    eeg_schema: SignalSchema = EEG_SCHEMA
    stats: Optional[NormalizationStats] = None

    def __post_init__(self):
        ids = [r.sentence_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise BridgingInputError("语料中存在重复的sentence_id")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def ids(self) -> List[str]:
        return [r.sentence_id for r in self.records]

    @property
    def n_max(self) -> int:
        return max(r.n for r in self.records)

    def get(self, sentence_id: str) -> SentenceRecord:
        for r in self.records:
            if r.sentence_id == sentence_id:
                return r
        raise KeyError(sentence_id)

    def schema(self, signal_type: str) -> SignalSchema:
        if signal_type == "eye":
            return self.eye_schema
        if signal_type == "eeg":
            return self.eeg_schema
        raise BridgingInputError(f"未知的信号类型: {signal_type}")

    def subset(self, ids: Iterable[str]) -> "Corpus":
        wanted = set(ids)
        return replace(self, records=tuple(r for r in self.records if r.sentence_id in wanted))


@dataclass(frozen=True)
class SignalMatrix:
    """补齐到N_max行的句子信号矩阵H"""
    H: np.ndarray
    n: int
    signal_type: str

    @property
    def d(self) -> int:
        return self.H.shape[1]

    @property
    def n_max(self) -> int:
        return self.H.shape[0]


# ---------------------------------------------------------------------------
# 文件读取
# ---------------------------------------------------------------------------

def load_word_list(path: str) -> Set[str]:
    """读取资源词表（常用词/篇章连接词），统一小写，忽略空行和#注释"""
    words = set()
    with open(path, "r", encoding=DATA_CONFIG["encoding"]) as f:
        for line in f:
            word = line.strip().lower()
            if word and not word.startswith("#"):
                words.add(" ".join(word.split()))
    logger.debug(f"读取词表 {path}: {len(words)} 项")
    return words


def _read_signals(signals_path: str) -> Dict[str, Tuple[List[str], np.ndarray, np.ndarray]]:
    try:
        frame = pd.read_csv(signals_path, sep="\t", encoding=DATA_CONFIG["encoding"],
                            dtype={"sentence_id": str, "token": str}, keep_default_na=False,
                            na_values={name: [""] for name in EYE_FEATURES + EEG_FEATURES})
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise BridgingInputError(f"信号文件 {signals_path} 解析失败: {e}")

    expected = ["sentence_id", "token_index", "token"]
    if list(frame.columns[:3]) != expected:
        raise BridgingInputError(f"信号文件表头前三列必须是 {expected}，实际为 {list(frame.columns[:3])}")
    feature_columns = list(frame.columns[3:])
    unknown = [c for c in feature_columns if c not in EYE_FEATURES and c not in EEG_FEATURES]
    if unknown:
        raise BridgingInputError(f"信号文件包含未知特征列: {unknown}")
    missing = [c for c in EYE_FEATURES + EEG_FEATURES if c not in feature_columns]
    if missing:
        raise BridgingInputError(f"信号文件缺少特征列: {missing}")

    values = frame[EYE_FEATURES + EEG_FEATURES]
    try:
        values = values.apply(pd.to_numeric, errors="raise")
    except (ValueError, TypeError) as e:
        raise BridgingInputError(f"信号文件包含非数值: {e}")
    skipped = values.isna().to_numpy()
    if skipped.any():
        # 未注视的词记为0
        count_warning("empty_signal_cells", int(skipped.sum()))
        values = values.fillna(0.0)
    matrix = values.to_numpy(dtype=np.float64)
    bad_rows = np.where(~np.all(np.isfinite(matrix), axis=1))[0]
    if len(bad_rows):
        line = int(bad_rows[0]) + 2
        raise BridgingInputError(f"信号文件第 {line} 行包含Inf")

    sentences: Dict[str, List[Tuple[int, int]]] = {}
    for row, (sid, tok_idx) in enumerate(zip(frame["sentence_id"], frame["token_index"])):
        try:
            tok_idx = int(tok_idx)
        except (TypeError, ValueError):
            raise BridgingInputError(f"信号文件第 {row + 2} 行 token_index 不是整数: {tok_idx}")
        sentences.setdefault(sid, []).append((tok_idx, row))

    parsed = {}
    n_eye = len(EYE_FEATURES)
    for sid, rows in sentences.items():
        rows.sort()
        indices = [t for t, _ in rows]
        if indices != list(range(len(indices))):
            raise BridgingInputError(f"句子 {sid} 的 token_index 不连续（应为 0..{len(indices) - 1}），"
                                     f"信号文件第 {rows[0][1] + 2} 行起")
        order = [r for _, r in rows]
        tokens = [str(frame["token"].iat[r]) for r in order]
        block = matrix[order]
        parsed[sid] = (tokens, block[:, :n_eye].copy(), block[:, n_eye:].copy())
    return parsed


def _read_annotations(annotations_path: str) -> Dict[str, Tuple[int, dict]]:
    annotations = {}
    with open(annotations_path, "r", encoding=DATA_CONFIG["encoding"]) as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise BridgingInputError(f"标注文件第 {line_no} 行不是合法JSON: {e}")
            if not isinstance(obj, dict) or "sentence_id" not in obj:
                raise BridgingInputError(f"标注文件第 {line_no} 行缺少 sentence_id")
            unknown = [k for k in obj if k not in ANNOTATION_KEYS]
            if unknown:
                raise BridgingInputError(f"标注文件第 {line_no} 行包含未知字段: {unknown}")
            sid = str(obj["sentence_id"])
            if sid in annotations:
                raise BridgingInputError(f"标注文件第 {line_no} 行重复的句子 {sid}")
            annotations[sid] = (line_no, obj)
    return annotations


def load_corpus(signals_path: str, annotations_path: str) -> Corpus:
    """
    读取信号文件与标注文件，构建语料

    Args:
        signals_path: 制表符分隔的逐词信号文件
        annotations_path: JSON-lines 句子标注文件

    Returns:
        Corpus: 每个sentence_id一个SentenceRecord（按信号文件中首次出现的顺序）
    """
    signals = _read_signals(signals_path)
    annotations = _read_annotations(annotations_path)

    orphans = sorted(set(annotations) - set(signals))
    if orphans:
        line_no = annotations[orphans[0]][0]
        raise BridgingInputError(f"标注文件第 {line_no} 行的句子 {orphans[0]} 在信号文件中不存在")

    records = []
    for sid, (tokens, eye, eeg) in signals.items():
        line_no, ann = annotations.get(sid, (None, {}))
        n = len(tokens)
        pos = ann.get("pos")
        if pos is not None and len(pos) != n:
            raise BridgingInputError(
                f"句子 {sid}: 标注文件第 {line_no} 行有 {len(pos)} 个POS标签，信号文件有 {n} 个词")
        senses = ann.get("sense_counts")
        if senses is not None and len(senses) != n:
            raise BridgingInputError(
                f"句子 {sid}: 标注文件第 {line_no} 行有 {len(senses)} 个词义数，信号文件有 {n} 个词")
        try:
            record = SentenceRecord(
                sentence_id=sid,
                tokens=tuple(tokens),
                eye=eye,
                eeg=eeg,
                pos=tuple(pos) if pos is not None else None,
                sense_counts=tuple(int(s) for s in senses) if senses is not None else None,
                complex_nominals=ann.get("complex_nominals"),
                clauses=ann.get("clauses"),
                subject_index=ann.get("subject_index"),
                object_index=ann.get("object_index"),
                tense=ann.get("tense"),
            )
        except BridgingInputError as e:
            where = f"（标注文件第 {line_no} 行）" if line_no else ""
            raise BridgingInputError(f"{e}{where}")
        records.append(record)

    if not records:
        raise BridgingInputError(f"信号文件 {signals_path} 中没有任何句子")
    logger.info(f"读取语料完成: {len(records)} 个句子, 最长 {max(r.n for r in records)} 词")
    return Corpus(records=tuple(records))


# ---------------------------------------------------------------------------
# 归一化、补齐、分折
# ---------------------------------------------------------------------------

def fit_stats(corpus: Corpus, fit_ids: Iterable[str], method: Optional[str] = None) -> NormalizationStats:
    method = method or DATA_CONFIG["normalization"]
    fit_ids = frozenset(fit_ids)
    if not fit_ids:
        raise BridgingInputError("归一化的拟合集不能为空")
    fit_records = [r for r in corpus.records if r.sentence_id in fit_ids]
    if len(fit_records) != len(fit_ids):
        raise BridgingInputError("拟合集中包含语料里不存在的句子")

    center, scale = {}, {}
    for signal_type in SIGNAL_TYPES:
        stacked = np.vstack([r.signals(signal_type) for r in fit_records])
        if method == "zscore":
            mu = stacked.mean(axis=0)
            sd = stacked.std(axis=0)
            sd[sd <= 1e-12] = 1.0
            center[signal_type], scale[signal_type] = mu, sd
        elif method == "minmax":
            lo = stacked.min(axis=0)
            rng = stacked.max(axis=0) - lo
            rng[rng <= 1e-12] = 1.0
            center[signal_type], scale[signal_type] = lo, rng
        else:
            raise BridgingInputError(f"未知的归一化方法: {method}")
    return NormalizationStats(method=method, center=center, scale=scale,
                              fit_ids=fit_ids, fingerprint=ids_fingerprint(fit_ids))


def apply_stats(corpus: Corpus, stats: NormalizationStats) -> Corpus:
    records = []
    for r in corpus.records:
        eye = (r.eye - stats.center["eye"]) / stats.scale["eye"]
        eeg = (r.eeg - stats.center["eeg"]) / stats.scale["eeg"]
        records.append(replace(r, eye=eye, eeg=eeg))
    return replace(corpus, records=tuple(records), stats=stats)


def normalize(corpus: Corpus, fit_split: Iterable[str], method: Optional[str] = None) -> Corpus:
    """
    逐特征归一化，统计量只在拟合集上计算

    Args:
        corpus: 原始语料
        fit_split: 拟合集sentence_id
        method: zscore（总体标准差）或 minmax，默认取配置

    Returns:
        Corpus: 归一化后的新语料，stats带拟合集指纹
    """
    if corpus.stats is not None:
        raise BridgingInputError("语料已经归一化过，不能重复归一化")
    stats = fit_stats(corpus, fit_split, method)
    return apply_stats(corpus, stats)


def assert_no_leakage(stats: NormalizationStats, test_ids: Iterable[str]) -> None:
    """断言测试集句子没有参与归一化拟合"""
    leaked = stats.fit_ids.intersection(test_ids)
    if leaked:
        raise AssertionError(f"测试集句子参与了归一化拟合: {sorted(leaked)[:5]}")


def pad(record: SentenceRecord, n_max: int, signal_type: str) -> SignalMatrix:
    """把句子信号补齐到n_max行，补齐行全为0"""
    rows = record.signals(signal_type)
    n = rows.shape[0]
    if n > n_max:
        raise BridgingInputError(f"句子 {record.sentence_id} 长度 {n} 超过 N_max={n_max}")
    H = np.zeros((n_max, rows.shape[1]))
    H[:n] = rows
    H.setflags(write=False)
    return SignalMatrix(H=H, n=n, signal_type=signal_type)


def make_folds(corpus: Corpus, k: int, seed: int) -> Dict[str, int]:
    """
    按种子打乱后轮流分配到k折，各折大小相差不超过1

    Returns:
        Dict[str, int]: sentence_id -> 折编号(0..k-1)
    """
    m = len(corpus)
    if k < 2 or k > m:
        raise BridgingInputError(f"折数k={k}非法，需满足 2 <= k <= 句子数 {m}")
    order = np.random.default_rng(seed).permutation(m)
    ids = corpus.ids
    return {ids[int(idx)]: pos % k for pos, idx in enumerate(order)}


# ---------------------------------------------------------------------------
# 写出
# ---------------------------------------------------------------------------

def write_corpus_files(corpus: Corpus, signals_path: str, annotations_path: str) -> None:
    """把语料写成信号TSV与标注JSONL（与load_corpus格式一致）"""
    rows = []
    for r in corpus.records:
        for i, token in enumerate(r.tokens):
            row = {"sentence_id": r.sentence_id, "token_index": i, "token": token}
            row.update(zip(EYE_FEATURES, r.eye[i].tolist()))
            row.update(zip(EEG_FEATURES, r.eeg[i].tolist()))
            rows.append(row)
    frame = pd.DataFrame(rows, columns=["sentence_id", "token_index", "token"] + EYE_FEATURES + EEG_FEATURES)
    write_atomic(signals_path, frame.to_csv(sep="\t", index=False, float_format=DATA_CONFIG["float_format"],
                                            lineterminator="\n"))

    lines = []
    for r in corpus.records:
        lines.append(json.dumps({
            "sentence_id": r.sentence_id,
            "pos": list(r.pos) if r.pos is not None else None,
            "sense_counts": list(r.sense_counts) if r.sense_counts is not None else None,
            "complex_nominals": r.complex_nominals,
            "clauses": r.clauses,
            "subject_index": r.subject_index,
            "object_index": r.object_index,
            "tense": r.tense,
        }, ensure_ascii=False, sort_keys=True))
    write_atomic(annotations_path, "\n".join(lines) + "\n")


def save_corpus_archive(corpus: Corpus, path: str) -> None:
    """把校验过的语料保存为确定性的JSON归档"""
    payload = {
        "format_version": 1,
        "records": [
            {
                "sentence_id": r.sentence_id,
                "tokens": list(r.tokens),
                "eye": r.eye.tolist(),
                "eeg": r.eeg.tolist(),
                "pos": list(r.pos) if r.pos is not None else None,
                "sense_counts": list(r.sense_counts) if r.sense_counts is not None else None,
                "complex_nominals": r.complex_nominals,
                "clauses": r.clauses,
                "subject_index": r.subject_index,
                "object_index": r.object_index,
                "tense": r.tense,
            }
            for r in corpus.records
        ],
    }
    write_atomic(path, dump_json(payload))


def load_corpus_archive(path: str) -> Corpus:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    records = []
    for item in payload["records"]:
        records.append(SentenceRecord(
            sentence_id=item["sentence_id"],
            tokens=tuple(item["tokens"]),
            eye=np.array(item["eye"], dtype=np.float64).reshape(len(item["tokens"]), EYE_SCHEMA.d),
            eeg=np.array(item["eeg"], dtype=np.float64).reshape(len(item["tokens"]), EEG_SCHEMA.d),
            pos=tuple(item["pos"]) if item["pos"] is not None else None,
            sense_counts=tuple(item["sense_counts"]) if item["sense_counts"] is not None else None,
            complex_nominals=item["complex_nominals"],
            clauses=item["clauses"],
            subject_index=item["subject_index"],
            object_index=item["object_index"],
            tense=item["tense"],
        ))
    return Corpus(records=tuple(records))
