import os
import copy
from typing import Dict, Any, Optional

import yaml

try:
    from dotenv import load_dotenv
    load_dotenv()  # 加载.env文件中的环境变量
except ImportError:
    pass  # 如果没有安装python-dotenv，跳过

# 日志配置
LOGGING_CONFIG = {
    "level": os.getenv("BRIDGE_LOG_LEVEL", "INFO"),
    "format": "%(asctime)s %(levelname)s %(name)s: %(message)s"
}

# 优化器配置
OPTIMIZER_CONFIG = {
    "lr": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1e-8,
    "clip_norm": 5.0,  # 每次Adam更新前按全局范数裁剪
}

# 语料与信号配置
DATA_CONFIG = {
    "normalization": "zscore",  # zscore 或 minmax
    "encoding": "utf-8",
    "float_format": "%.6f",
}

# 眼动特征（顺序即schema顺序）及阅读阶段
EYE_FEATURES = [
    "FFD", "FPD",
    "NFIX", "FP", "MFD", "TFD", "NR", "RRP",
    "TRD", "w-2FP", "w-1FP", "w+1FP", "w+2FP", "w-2FD", "w-1FD", "w+1FD", "w+2FD",
]
EYE_STAGES = {
    "EARLY": ["FFD", "FPD"],
    "LATE": ["NFIX", "FP", "MFD", "TFD", "NR", "RRP"],
    "CONTEXT": ["TRD", "w-2FP", "w-1FP", "w+1FP", "w+2FP", "w-2FD", "w-1FD", "w+1FD", "w+2FD"],
}

# EEG频段（Hz）
EEG_FEATURES = ["t1", "t2", "a1", "a2", "b1", "b2", "g1", "g2"]
EEG_BANDS = {
    "t1": (4.0, 6.0),
    "t2": (6.5, 8.0),
    "a1": (8.5, 10.0),
    "a2": (10.5, 13.0),
    "b1": (13.5, 18.0),
    "b2": (18.5, 30.0),
    "g1": (30.5, 40.0),
    "g2": (40.0, 49.5),
}

# 模型配置
MODEL_CONFIG = {
    "hidden": 20,  # Bi-LSTM隐藏层维度
    "use_encoder": True,
    "focal_gamma": 2.0,
    "focal_tasks": ["Tense", "SubjNum", "ObjNum"],  # 这些任务默认使用focal loss
}

# 训练配置
TRAINING_CONFIG = {
    "max_epochs": 50,
    "patience": 10,  # 验证集macro-F1连续不提升的轮数
    "batch_size": 32,  # 梯度累加的句子数
    "validation_fraction": 0.1,
}

# 任务构建配置
TASK_CONFIG = {
    "content_pos_prefixes": ["NN", "VB", "JJ", "RB"],
    "length_normalize_counts": False,  # DP/OOV/DCC是否按句长归一化
    "future_modals": ["will", "shall"],
}

# 传统特征选择方法配置
SELECTION_CONFIG = {
    "aggregation": "mean",  # mean 或 max
    "mi_bins": 10,
    "rfe_l2": 1e-3,
    "rfe_max_iter": 500,
    "rfe_tol": 1e-6,
    "rf_trees": 100,
    "rf_min_leaf": 2,
    "rf_max_depth": None,  # None表示不限深度
}

# 实验编排配置
HARNESS_CONFIG = {
    "k_folds": 5,
    "jobs": int(os.getenv("BRIDGE_JOBS", "1")),
    "masking": True,
    "mask_retrain": False,  # True: 遮蔽后重新训练；False: 冻结模型直接评估
    "featsel_methods": ["attention", "mi", "rfe", "rf"],
    "classifiers": ["linear", "recurrent"],
}

# 合成语料默认参数
SYNTH_CONFIG = {
    "d": 17,
    "planted": 4,
    "effect": 2.0,
    "noise": 1.0,
    "m": 600,
    "min_len": 5,
    "max_len": 12,
    "kind": "three-class",
    "shared_noise": 0.0,
}

ARTIFACT_VERSION = "1.0.0"


def get_model_defaults(task: str) -> Dict[str, Any]:
    """按任务返回模型默认配置（focal loss只对语义不平衡任务默认开启）"""
    defaults = dict(MODEL_CONFIG)
    defaults["loss"] = "focal" if task in MODEL_CONFIG["focal_tasks"] else "cross-entropy"
    return defaults


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    """
    读取YAML键值配置文件

    Args:
        path: 配置文件路径，None则返回空字典

    Returns:
        Dict: 配置内容
    """
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        content = yaml.safe_load(f) or {}
    if not isinstance(content, dict):
        raise ValueError(f"配置文件 {path} 顶层必须是键值映射")
    return content


def merge_config(file_config: Dict[str, Any], flags: Dict[str, Any]) -> Dict[str, Any]:
    """合并配置文件与命令行参数，命令行参数优先（值为None的参数视为未指定）"""
    merged = copy.deepcopy(file_config)
    for key, value in flags.items():
        if value is not None:
            merged[key] = value
    return merged
