"""
统一注意力桥接网络
输入层（补齐后的信号矩阵H）→ 特征级注意力层 → Bi-LSTM编码层 → 预测层（CRF或max-pooling+softmax）
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

import autograd_utils as ag
from autograd_utils import GradientError, Tensor2, init_params, zeros_param
from config import ARTIFACT_VERSION, MODEL_CONFIG, get_model_defaults
from data_utils import SignalMatrix
from utils import BridgingInputError, derive_seed, dump_json, write_atomic

logger = logging.getLogger(__name__)

LOG_EPS = 1e-12


@dataclass
class ModelConfig:
    """单个桥接模型的配置"""
    signal_type: str
    task: str
    hidden: int = MODEL_CONFIG["hidden"]
    use_encoder: bool = MODEL_CONFIG["use_encoder"]
    loss: str = "cross-entropy"
    focal_gamma: float = MODEL_CONFIG["focal_gamma"]
    seed: int = 0
    use_attention: bool = True  # False时为无注意力的Bi-LSTM+softmax分类器

    def __post_init__(self):
        if self.signal_type not in ("eye", "eeg"):
            raise BridgingInputError(f"未知的信号类型: {self.signal_type}")
        if self.hidden < 1:
            raise BridgingInputError(f"隐藏层维度必须为正数: {self.hidden}")
        if self.loss not in ("cross-entropy", "focal"):
            raise BridgingInputError(f"未知的损失函数: {self.loss}")
        if self.focal_gamma < 0:
            raise BridgingInputError(f"focal gamma 不能为负: {self.focal_gamma}")

    @classmethod
    def for_task(cls, task: str, signal_type: str, seed: int, **overrides) -> "ModelConfig":
        defaults = get_model_defaults(task)
        kwargs = {
            "hidden": defaults["hidden"],
            "use_encoder": defaults["use_encoder"],
            "loss": defaults["loss"],
            "focal_gamma": defaults["focal_gamma"],
        }
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(signal_type=signal_type, task=task, seed=seed, **kwargs)


@dataclass
class AttentionParams:
    W_att: Tensor2  # d × N_max
    b_att: Tensor2  # d × 1
    v: Tensor2  # d × 1


@dataclass
class LstmParams:
    """单向LSTM，四个门(i, f, g, o)的权重按列拼接"""
    W: Tensor2  # input × 4h
    U: Tensor2  # h × 4h
    b: Tensor2  # 1 × 4h

    @property
    def hidden(self) -> int:
        return self.U.rows


@dataclass
class EncoderParams:
    forward: LstmParams
    backward: LstmParams


@dataclass
class CrfParams:
    W_s: Tensor2  # in × K
    b_s: Tensor2  # 1 × K
    T: Tensor2  # (K+1) × K，最后一行为START

    @property
    def n_tags(self) -> int:
        return self.W_s.cols


@dataclass
class SoftmaxHeadParams:
    W_p: Tensor2  # in × C
    b_p: Tensor2  # 1 × C


# ---------------------------------------------------------------------------
# 各层计算
# ---------------------------------------------------------------------------

def feature_attention(H: Union[SignalMatrix, np.ndarray], params: AttentionParams) -> Tuple[Tensor2, Tensor2]:
    """
    特征级注意力：alpha = softmax(tanh(W_att·H + b_att)·v)，H_att = H ⊗ alpha

    Args:
        H: 补齐到N_max行的信号矩阵
        params: 注意力参数

    Returns:
        (alpha: 1×d, H_att: n×d，只保留有效行)
    """
    if isinstance(H, SignalMatrix):
        data, n = H.H, H.n
    else:
        data, n = np.asarray(H, dtype=float), np.asarray(H).shape[0]
    d = params.v.rows
    if data.shape != (params.W_att.cols, d):
        raise GradientError(f"feature_attention: H形状 {data.shape} 与参数 (N_max={params.W_att.cols}, d={d}) 不一致")
    Hm = ag.constant(data)
    scores = ag.tanh(ag.add(ag.matmul(params.W_att, Hm), params.b_att))
    alpha = ag.softmax(ag.transpose(ag.matmul(scores, params.v)), axis=1)
    H_att = ag.mul(ag.constant(data[:n]), alpha)
    return alpha, H_att


def _lstm_pass(XW: Tensor2, params: LstmParams, reverse: bool) -> List[Tensor2]:
    """在有效长度上运行单向LSTM，返回按原时间顺序排列的隐藏状态"""
    n = XW.rows
    h_size = params.hidden
    h = ag.constant(np.zeros((1, h_size)))
    c = ag.constant(np.zeros((1, h_size)))
    states: List[Optional[Tensor2]] = [None] * n
    steps = range(n - 1, -1, -1) if reverse else range(n)
    for t in steps:
        z = ag.add(ag.add(ag.slice_rows(XW, t, t + 1), ag.matmul(h, params.U)), params.b)
        i = ag.sigmoid(ag.slice_cols(z, 0, h_size))
        f = ag.sigmoid(ag.slice_cols(z, h_size, 2 * h_size))
        g = ag.tanh(ag.slice_cols(z, 2 * h_size, 3 * h_size))
        o = ag.sigmoid(ag.slice_cols(z, 3 * h_size, 4 * h_size))
        c = ag.add(ag.mul(f, c), ag.mul(i, g))
        h = ag.mul(o, ag.tanh(c))
        states[t] = h
    return states


def encode(H_att: Tensor2, n: int, params: Optional[EncoderParams], use_encoder: bool = True) -> Tensor2:
    """
    Bi-LSTM编码：每个时刻拼接前向与后向隐藏状态；补齐行不参与递归

    Args:
        H_att: 注意力加权后的信号（至少n行）
        n: 句子真实长度
        params: 编码器参数
        use_encoder: False时直接返回H_att前n行（消融变体）

    Returns:
        H_prime: n × (2·hidden)，或不使用编码器时 n × d
    """
    rows = H_att if H_att.rows == n else ag.slice_rows(H_att, 0, n)
    if not use_encoder:
        return rows
    fwd = _lstm_pass(ag.matmul(rows, params.forward.W), params.forward, reverse=False)
    bwd = _lstm_pass(ag.matmul(rows, params.backward.W), params.backward, reverse=True)
    steps = [ag.concat([fwd[t], bwd[t]], axis=1) for t in range(n)]
    return steps[0] if n == 1 else ag.concat(steps, axis=0)


def crf_emissions(H_prime: Tensor2, params: CrfParams) -> Tensor2:
    return ag.add(ag.matmul(H_prime, params.W_s), params.b_s)


def crf_log_partition(emissions: Tensor2, params: CrfParams) -> Tensor2:
    """前向算法计算log配分函数（y0=START，无STOP转移）"""
    k = params.n_tags
    trans = ag.slice_rows(params.T, 0, k)
    alpha = ag.add(ag.slice_rows(params.T, k, k + 1), ag.slice_rows(emissions, 0, 1))
    for i in range(1, emissions.rows):
        alpha = ag.add(ag.logsumexp(ag.add(ag.transpose(alpha), trans), axis=0), ag.slice_rows(emissions, i, i + 1))
    return ag.logsumexp(alpha, axis=1)


def crf_score(emissions: Tensor2, tags: Sequence[int], params: CrfParams) -> Tensor2:
    """整条标签序列的得分：sum_i T[y_{i-1}, y_i] + o_{i, y_i}"""
    k = params.n_tags
    n = len(tags)
    emit = ag.sum_all(ag.gather(emissions, list(range(n)), list(tags)))
    prev = [k] + list(tags[:-1])
    trans = ag.sum_all(ag.gather(params.T, prev, list(tags)))
    return ag.add(emit, trans)


def crf_nll(H_prime: Tensor2, gold: Sequence[int], params: CrfParams) -> Tensor2:
    """
    CRF负对数似然：logZ - score(gold)

    Args:
        H_prime: 编码输出 n × in
        gold: 金标准标签id序列（长度n）
        params: CRF参数

    Returns:
        标量loss
    """
    k = params.n_tags
    gold = [int(t) for t in gold]
    if len(gold) != H_prime.rows:
        raise BridgingInputError(f"crf_nll: 标签长度 {len(gold)} 与句长 {H_prime.rows} 不一致")
    bad = [t for t in gold if not 0 <= t < k]
    if bad:
        raise BridgingInputError(f"crf_nll: 未知的标签id {bad[0]}（共 {k} 个标签）")
    emissions = crf_emissions(H_prime, params)
    return ag.sub(crf_log_partition(emissions, params), crf_score(emissions, gold, params))


def viterbi(H_prime: Union[Tensor2, np.ndarray], params: CrfParams) -> List[int]:
    """
    Viterbi解码得分最高的标签序列；回溯时并列取最小标签id

    Args:
        H_prime: 编码输出 n × in
        params: CRF参数

    Returns:
        标签id列表
    """
    X = H_prime.data if isinstance(H_prime, Tensor2) else np.asarray(H_prime, dtype=float)
    emissions = X @ params.W_s.data + params.b_s.data
    return viterbi_decode(emissions, params.T.data)


def viterbi_decode(emissions: np.ndarray, T: np.ndarray) -> List[int]:
    n, k = emissions.shape
    delta = T[k] + emissions[0]
    back = np.zeros((n, k), dtype=int)
    for i in range(1, n):
        scores = delta[:, None] + T[:k]
        back[i] = scores.argmax(axis=0)
        delta = scores.max(axis=0) + emissions[i]
    best = [int(delta.argmax())]
    for i in range(n - 1, 0, -1):
        best.append(int(back[i, best[-1]]))
    return best[::-1]


def classify(H_prime: Tensor2, n: int, params: SoftmaxHeadParams) -> Tensor2:
    """对n个编码行做列最大池化，再经softmax得到类别分布（1×C）"""
    if n < 1:
        raise BridgingInputError("classify: 句长必须至少为1")
    rows = H_prime if H_prime.rows == n else ag.slice_rows(H_prime, 0, n)
    h = ag.max_rows(rows)
    return ag.softmax(ag.add(ag.matmul(h, params.W_p), params.b_p), axis=1)


def cross_entropy(distribution: Tensor2, gold: int, class_weights: Optional[Sequence[float]] = None) -> Tensor2:
    p = ag.gather(distribution, [0], [int(gold)])
    w = 1.0 if class_weights is None else float(class_weights[int(gold)])
    return ag.mul(ag.log(p, eps=LOG_EPS), -w)


def focal_loss(distribution: Tensor2, gold: int, gamma: float,
               class_weights: Optional[Sequence[float]] = None) -> Tensor2:
    """
    focal loss：-w(gold)·(1-p_gold)^gamma·log(p_gold)，log内加1e-12防止p=0

    Args:
        distribution: 1×C类别分布
        gold: 金标准类别
        gamma: 聚焦参数（>=0）
        class_weights: 类别权重（正数）
    """
    if gamma < 0:
        raise BridgingInputError(f"focal gamma 不能为负: {gamma}")
    if class_weights is not None and min(class_weights) <= 0:
        raise BridgingInputError("类别权重必须为正数")
    p = ag.gather(distribution, [0], [int(gold)])
    w = 1.0 if class_weights is None else float(class_weights[int(gold)])
    modulating = ag.power(ag.sub(1.0, p), gamma)
    return ag.mul(ag.mul(modulating, ag.log(p, eps=LOG_EPS)), -w)


def inverse_frequency_weights(targets: Sequence[int], n_classes: int) -> List[float]:
    """训练折上的逆类别频率，归一化到均值为1"""
    counts = np.bincount(np.asarray(targets, dtype=int), minlength=n_classes).astype(float)
    counts[counts == 0] = 1.0
    weights = 1.0 / counts
    weights = weights * n_classes / weights.sum()
    return weights.tolist()


# ---------------------------------------------------------------------------
# 完整模型
# ---------------------------------------------------------------------------

class BridgingModel:
    """桥接网络：注意力 + (可选)Bi-LSTM + CRF/softmax头"""

    def __init__(self, config: ModelConfig, d: int, n_max: int, kind: str, n_labels: int,
                 class_weights: Optional[Sequence[float]] = None):
        """
        Args:
            config: 模型配置
            d: 信号维度
            n_max: 补齐长度
            kind: three-class / binary / sequence
            n_labels: 标签数
            class_weights: focal loss类别权重
        """
        if n_labels < 1:
            raise BridgingInputError("标签数必须至少为1")
        self.config = config
        self.d = d
        self.n_max = n_max
        self.kind = kind
        self.n_labels = n_labels
        self.class_weights = list(class_weights) if class_weights is not None else None
        self.fingerprint: Optional[str] = None

        seed = config.seed
        h = config.hidden

        def init(name, shape):
            return init_params(shape, derive_seed(seed, "param", name), name=name)

        self.attention_params: Optional[AttentionParams] = None
        if config.use_attention:
            self.attention_params = AttentionParams(
                W_att=init("W_att", (d, n_max)),
                b_att=zeros_param((d, 1), "b_att"),
                v=init("v", (d, 1)),
            )

        self.encoder_params: Optional[EncoderParams] = None
        out_dim = d
        if config.use_encoder:
            self.encoder_params = EncoderParams(
                forward=LstmParams(init("lstm_f_W", (d, 4 * h)), init("lstm_f_U", (h, 4 * h)),
                                   zeros_param((1, 4 * h), "lstm_f_b")),
                backward=LstmParams(init("lstm_b_W", (d, 4 * h)), init("lstm_b_U", (h, 4 * h)),
                                    zeros_param((1, 4 * h), "lstm_b_b")),
            )
            out_dim = 2 * h

        self.crf_params: Optional[CrfParams] = None
        self.head_params: Optional[SoftmaxHeadParams] = None
        if kind == "sequence":
            self.crf_params = CrfParams(init("W_s", (out_dim, n_labels)), zeros_param((1, n_labels), "b_s"),
                                        zeros_param((n_labels + 1, n_labels), "T"))
        else:
            self.head_params = SoftmaxHeadParams(init("W_p", (out_dim, n_labels)), zeros_param((1, n_labels), "b_p"))

    def parameters(self) -> Dict[str, Tensor2]:
        groups = [self.attention_params, self.crf_params, self.head_params]
        if self.encoder_params is not None:
            groups += [self.encoder_params.forward, self.encoder_params.backward]
        params = {}
        for group in groups:
            if group is None:
                continue
            for value in vars(group).values():
                params[value.name] = value
        return params

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def _encoded(self, matrix: SignalMatrix) -> Tuple[Optional[Tensor2], Tensor2]:
        if matrix.d != self.d or matrix.n_max != self.n_max:
            raise GradientError(f"输入矩阵形状 {matrix.H.shape} 与模型 (N_max={self.n_max}, d={self.d}) 不一致")
        if self.attention_params is not None:
            alpha, H_att = feature_attention(matrix, self.attention_params)
        else:
            alpha, H_att = None, ag.constant(matrix.H[:matrix.n])
        return alpha, encode(H_att, matrix.n, self.encoder_params, self.config.use_encoder)

    def loss(self, matrix: SignalMatrix, target: Union[int, Sequence[int]]) -> Tensor2:
        _, H_prime = self._encoded(matrix)
        if self.kind == "sequence":
            return crf_nll(H_prime, target, self.crf_params)
        dist = classify(H_prime, matrix.n, self.head_params)
        if self.config.loss == "focal":
            return focal_loss(dist, int(target), self.config.focal_gamma, self.class_weights)
        return cross_entropy(dist, int(target))

    def predict(self, matrix: SignalMatrix) -> Union[int, List[int]]:
        _, H_prime = self._encoded(matrix)
        if self.kind == "sequence":
            return viterbi(H_prime, self.crf_params)
        return int(classify(H_prime, matrix.n, self.head_params).data.argmax())

    def attention(self, matrix: SignalMatrix) -> np.ndarray:
        """句子的特征注意力向量alpha（长度d）"""
        if self.attention_params is None:
            raise BridgingInputError("该模型没有注意力层")
        alpha, _ = feature_attention(matrix, self.attention_params)
        return alpha.data[0].copy()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, value in state.items():
            if name not in params:
                raise BridgingInputError(f"检查点包含未知参数 {name}")
            if params[name].shape != np.shape(value):
                raise BridgingInputError(f"参数 {name} 形状 {np.shape(value)} 与模型 {params[name].shape} 不一致")
            params[name].data = np.array(value, dtype=np.float64)


# ---------------------------------------------------------------------------
# 检查点
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(model: BridgingModel, path: str) -> None:
    """保存为JSON容器：配置、归一化指纹与所有命名参数"""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "artifact_version": ARTIFACT_VERSION,
        "config": asdict(model.config),
        "structure": {"d": model.d, "n_max": model.n_max, "kind": model.kind, "n_labels": model.n_labels,
                      "class_weights": model.class_weights},
        "fingerprint": model.fingerprint,
        "params": {name: {"shape": list(value.shape), "data": value.ravel().tolist()}
                   for name, value in sorted(model.state_dict().items())},
    }
    write_atomic(path, dump_json(payload))


def load_checkpoint(path: str) -> BridgingModel:
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise BridgingInputError(f"检查点 {path} 版本 {payload.get('format_version')} 不受支持")
    s = payload["structure"]
    model = BridgingModel(ModelConfig(**payload["config"]), s["d"], s["n_max"], s["kind"], s["n_labels"],
                          s["class_weights"])
    model.load_state_dict({name: np.array(item["data"]).reshape(item["shape"])
                           for name, item in payload["params"].items()})
    model.fingerprint = payload.get("fingerprint")
    return model
