import hashlib
import json
import logging
import os
import tempfile
from collections import Counter
from contextlib import contextmanager
from typing import Any, Dict, Iterable, Iterator, List

import numpy as np

logger = logging.getLogger(__name__)


class BridgingInputError(ValueError):
    """用户输入或数据文件不合法（命令行返回码2）"""


# 跳过记录、未收敛等告警计数，最终写入运行清单
WARNING_COUNTS: Counter = Counter()


def count_warning(key: str, amount: int = 1) -> None:
    WARNING_COUNTS[key] += amount


@contextmanager
def collect_warnings() -> Iterator[Counter]:
    """记录代码块内新增的告警计数，子进程用它把计数随结果带回主进程"""
    before = Counter(WARNING_COUNTS)
    added: Counter = Counter()
    try:
        yield added
    finally:
        added.update(WARNING_COUNTS - before)


def merge_warnings(counts: Dict[str, int]) -> None:
    WARNING_COUNTS.update(counts)


def derive_seed(master_seed: int, *keys: Any) -> int:
    """
    从主种子派生子种子（折、树、重复实验等）

    Args:
        master_seed: 主种子
        keys: 区分用途的键，如 ("fold", 3)

    Returns:
        int: 31位非负整数种子
    """
    material = json.dumps([int(master_seed), *[str(k) for k in keys]])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") & 0x7FFFFFFF


def file_digest(path: str) -> str:
    """计算文件的SHA-256摘要"""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def ids_fingerprint(ids: Iterable[str]) -> str:
    """句子id集合的指纹（排序后求SHA-256），用于断言无测试集泄漏"""
    material = "\n".join(sorted(ids))
    return hashlib.sha256(material.encode("utf-8")).hexdigest()


def write_atomic(path: str, content: str) -> None:
    """先写临时文件再替换，保证输出文件要么完整要么不存在"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp_")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(content)
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def dump_json(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2, default=_json_default)


def _json_default(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"无法序列化类型 {type(obj).__name__}")


def stable_argsort_desc(values: Iterable[float]) -> List[int]:
    """降序排序下标，相等时保留schema顺序"""
    arr = np.asarray(list(values), dtype=float)
    return [int(i) for i in np.argsort(-arr, kind="stable")]
