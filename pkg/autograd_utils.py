"""
数值计算核心模块
提供二维张量的反向模式自动微分、参数初始化、梯度裁剪和Adam优化器，
是桥接网络所有可训练层的基础。

所有张量都是双精度二维矩阵（标量为1×1，向量为1×n行向量）。
"""

import logging
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import OPTIMIZER_CONFIG

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]


class GradientError(ArithmeticError):
    """计算图、梯度或优化器出现形状/数值错误"""


class Tensor2:
    """带梯度的二维张量（计算图中的一个节点或叶子）"""

    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise GradientError(f"Tensor2只支持二维数据，收到 {arr.ndim} 维")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor2", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise GradientError(f"item() 只能用于1×1张量，当前形状 {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor2({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    # 运算符重载
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor2":
        return transpose(self)


class CompGraph:
    """
    计算图（录制式）

    在 `with graph:` 作用域内创建的所有节点按创建顺序记录，
    创建顺序即拓扑顺序；反向传播按逆序逐个访问一次。
    单个实例只能在一个线程里使用。
    """

    _local = threading.local()

    def __init__(self, name: str = "graph"):
        self.name = name
        self.nodes: List[Tensor2] = []
        self._forward_done = False

    def __enter__(self) -> "CompGraph":
        stack = getattr(CompGraph._local, "stack", None)
        if stack is None:
            stack = []
            CompGraph._local.stack = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        CompGraph._local.stack.pop()

    @classmethod
    def current(cls) -> Optional["CompGraph"]:
        stack = getattr(cls._local, "stack", None)
        return stack[-1] if stack else None

    @property
    def order(self) -> List[int]:
        return list(range(len(self.nodes)))

    def reset(self) -> None:
        for node in self.nodes:
            node.grad = None
        self.nodes = []
        self._forward_done = False

    def forward(self, builder: Callable[..., Any], inputs: Optional[Dict[str, Any]] = None) -> Any:
        """
        在本图上执行一次前向计算

        Args:
            builder: 接收inputs作为关键字参数并返回输出节点的函数
            inputs: 输入张量字典

        Returns:
            builder的返回值
        """
        self.reset()
        with self:
            outputs = builder(**(inputs or {}))
        self._forward_done = True
        return outputs

    def backward(self, loss: Tensor2, params: Optional[Iterable[Tensor2]] = None) -> Dict[str, np.ndarray]:
        """
        从标量loss反向传播，梯度累加到叶子参数的grad上

        Args:
            loss: 标量loss节点
            params: 需要返回梯度的参数；与loss无连接的参数返回全零梯度

        Returns:
            {参数名: 梯度}，只包含requires_grad的命名叶子
        """
        if not self._forward_done:
            raise GradientError(f"计算图 {self.name} 尚未执行前向计算，不能反向传播")
        if loss.shape != (1, 1):
            raise GradientError(f"loss必须是标量，当前形状 {loss.shape}")
        if loss.op != "leaf" and loss not in self.nodes:
            raise GradientError(f"loss节点不属于计算图 {self.name}")

        leaves: Dict[int, Tensor2] = {}
        loss.grad = np.ones((1, 1))
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
            for parent in node._parents:
                if parent.requires_grad and parent.op == "leaf":
                    leaves[id(parent)] = parent
        if loss.op == "leaf" and loss.requires_grad:
            leaves[id(loss)] = loss

        grads = {}
        for leaf in leaves.values():
            if leaf.name is not None and leaf.grad is not None:
                grads[leaf.name] = leaf.grad
        for p in params or ():
            if p.requires_grad and p.name not in grads:
                grads[p.name] = np.zeros_like(p.data)
        return grads


def forward(graph: CompGraph, builder: Callable[..., Any], inputs: Optional[Dict[str, Any]] = None) -> Any:
    return graph.forward(builder, inputs)


def backward(graph: CompGraph, loss: Tensor2, params: Optional[Iterable[Tensor2]] = None) -> Dict[str, np.ndarray]:
    return graph.backward(loss, params)


# ---------------------------------------------------------------------------
# 基本算子
# ---------------------------------------------------------------------------

def as_tensor(x: Union[Tensor2, ArrayLike]) -> Tensor2:
    return x if isinstance(x, Tensor2) else Tensor2(x)


def constant(x: ArrayLike, name: Optional[str] = None) -> Tensor2:
    return Tensor2(x, requires_grad=False, name=name)


def _make(data: np.ndarray, parents: Tuple[Tensor2, ...], op: str,
          backward_fn: Callable[[np.ndarray], None]) -> Tensor2:
    if not np.all(np.isfinite(data)):
        graph = CompGraph.current()
        index = len(graph.nodes) if graph is not None else -1
        raise GradientError(f"节点 #{index} ({op}) 输出包含NaN或Inf")
    out = Tensor2(data)
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
        graph = CompGraph.current()
        if graph is not None:
            graph.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """把广播后的梯度按原形状求和还原"""
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor2, b: Tensor2) -> Tuple[int, int]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise GradientError(f"{op}: 形状不兼容 {a.shape} 与 {b.shape}")


def add(a, b) -> Tensor2:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), "add", _backward)


def sub(a, b) -> Tensor2:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), "sub", _backward)


def mul(a, b) -> Tensor2:
    """逐元素乘法（Hadamard积），支持广播"""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def _backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), "mul", _backward)


def matmul(a, b) -> Tensor2:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise GradientError(f"matmul: 形状不兼容 {a.shape} @ {b.shape}")

    def _backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), "matmul", _backward)


def transpose(a: Tensor2) -> Tensor2:
    def _backward(g):
        a._accumulate(g.T)

    return _make(a.data.T.copy(), (a,), "transpose", _backward)


def tanh(a: Tensor2) -> Tensor2:
    y = np.tanh(a.data)

    def _backward(g):
        a._accumulate(g * (1.0 - y * y))

    return _make(y, (a,), "tanh", _backward)


def sigmoid(a: Tensor2) -> Tensor2:
    # 分段计算避免exp溢出
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def _backward(g):
        a._accumulate(g * y * (1.0 - y))

    return _make(y, (a,), "sigmoid", _backward)


def exp(a: Tensor2) -> Tensor2:
    y = np.exp(a.data)

    def _backward(g):
        a._accumulate(g * y)

    return _make(y, (a,), "exp", _backward)


def log(a: Tensor2, eps: float = 0.0) -> Tensor2:
    x = a.data + eps

    def _backward(g):
        a._accumulate(g / x)

    with np.errstate(divide="ignore"):
        y = np.log(x)
    return _make(y, (a,), "log", _backward)


def power(a: Tensor2, exponent: float) -> Tensor2:
    """逐元素幂，底数需非负（用于focal loss的(1-p)^gamma）"""
    x = a.data
    y = np.power(x, exponent)

    def _backward(g):
        if exponent == 0.0:
            return
        with np.errstate(divide="ignore", invalid="ignore"):
            local = exponent * np.power(x, exponent - 1.0)
        local = np.where(np.isfinite(local), local, 0.0)
        a._accumulate(g * local)

    return _make(y, (a,), "power", _backward)


def softmax(a: Tensor2, axis: int = 1) -> Tensor2:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        a._accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), "softmax", _backward)


def logsumexp(a: Tensor2, axis: int = 1) -> Tensor2:
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    y = np.log(s) + m
    weights = np.exp(a.data - y)

    def _backward(g):
        a._accumulate(g * weights)

    return _make(y, (a,), "logsumexp", _backward)


def concat(parts: Sequence[Tensor2], axis: int = 1) -> Tensor2:
    parts = [as_tensor(p) for p in parts]
    other = 1 - axis
    sizes = {p.shape[other] for p in parts}
    if len(sizes) != 1:
        raise GradientError(f"concat(axis={axis}): 形状不兼容 {[p.shape for p in parts]}")
    y = np.concatenate([p.data for p in parts], axis=axis)
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def _backward(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p._accumulate(g[lo:hi, :] if axis == 0 else g[:, lo:hi])

    return _make(y, tuple(parts), "concat", _backward)


def max_rows(a: Tensor2) -> Tensor2:
    """按列取各行最大值，得到1×cols；并列时梯度给最靠前的行"""
    idx = a.data.argmax(axis=0)
    cols = np.arange(a.cols)
    y = a.data[idx, cols].reshape(1, -1)

    def _backward(g):
        local = np.zeros_like(a.data)
        local[idx, cols] = g[0]
        a._accumulate(local)

    return _make(y, (a,), "max_rows", _backward)


def sum_all(a: Tensor2) -> Tensor2:
    def _backward(g):
        a._accumulate(np.full(a.shape, g[0, 0]))

    return _make(np.array([[a.data.sum()]]), (a,), "sum", _backward)


def mean_of(parts: Sequence[Tensor2]) -> Tensor2:
    """若干标量节点的平均（批内loss）"""
    if not parts:
        raise GradientError("mean_of: 至少需要一个节点")
    total = parts[0] if len(parts) == 1 else sum_all(concat(parts, axis=0))
    return mul(total, 1.0 / len(parts))


def slice_rows(a: Tensor2, start: int, stop: int) -> Tensor2:
    if not 0 <= start < stop <= a.rows:
        raise GradientError(f"slice_rows: 区间 [{start}, {stop}) 超出 {a.rows} 行")

    def _backward(g):
        local = np.zeros_like(a.data)
        local[start:stop, :] = g
        a._accumulate(local)

    return _make(a.data[start:stop, :].copy(), (a,), "slice_rows", _backward)


def slice_cols(a: Tensor2, start: int, stop: int) -> Tensor2:
    if not 0 <= start < stop <= a.cols:
        raise GradientError(f"slice_cols: 区间 [{start}, {stop}) 超出 {a.cols} 列")

    def _backward(g):
        local = np.zeros_like(a.data)
        local[:, start:stop] = g
        a._accumulate(local)

    return _make(a.data[:, start:stop].copy(), (a,), "slice_cols", _backward)


def gather(a: Tensor2, row_idx: Sequence[int], col_idx: Sequence[int]) -> Tensor2:
    """取出若干 (row, col) 元素，得到1×k行向量"""
    r = np.asarray(row_idx, dtype=int)
    c = np.asarray(col_idx, dtype=int)
    if r.shape != c.shape:
        raise GradientError("gather: 行列索引长度不一致")
    if r.size and (r.min() < 0 or r.max() >= a.rows or c.min() < 0 or c.max() >= a.cols):
        raise GradientError(f"gather: 索引超出形状 {a.shape}")

    def _backward(g):
        local = np.zeros_like(a.data)
        np.add.at(local, (r, c), g[0])
        a._accumulate(local)

    return _make(a.data[r, c].reshape(1, -1), (a,), "gather", _backward)


# ---------------------------------------------------------------------------
# 参数初始化与优化
# ---------------------------------------------------------------------------

def init_params(shape: Tuple[int, int], seed: int, name: Optional[str] = None) -> Tensor2:
    """
    均匀分布初始化：U(-sqrt(6/(rows+cols)), +sqrt(6/(rows+cols)))

    Args:
        shape: (rows, cols)
        seed: 随机种子，同一种子得到完全相同的张量
        name: 参数名

    Returns:
        Tensor2: requires_grad=True 的参数
    """
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise GradientError(f"参数 {name} 形状非法: {shape}")
    limit = np.sqrt(6.0 / (rows + cols))
    rng = np.random.default_rng(seed)
    data = rng.uniform(-limit, limit, size=(rows, cols))
    return Tensor2(data, requires_grad=True, name=name)


def zeros_param(shape: Tuple[int, int], name: Optional[str] = None) -> Tensor2:
    return Tensor2(np.zeros(shape), requires_grad=True, name=name)


@dataclass
class AdamState:
    """Adam优化器状态，一阶/二阶矩按参数名保存"""
    lr: float = OPTIMIZER_CONFIG["lr"]
    beta1: float = OPTIMIZER_CONFIG["beta1"]
    beta2: float = OPTIMIZER_CONFIG["beta2"]
    epsilon: float = OPTIMIZER_CONFIG["epsilon"]
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def clip_grad_norm(grads: Dict[str, np.ndarray], max_norm: float) -> Tuple[Dict[str, np.ndarray], float]:
    """按全局范数裁剪梯度，返回 (裁剪后的梯度, 裁剪前的范数)"""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is None or total <= max_norm or total == 0.0:
        return grads, total
    scale = max_norm / total
    return {name: g * scale for name, g in grads.items()}, total


def adam_step(params: Dict[str, Tensor2], grads: Dict[str, np.ndarray], state: AdamState) -> Dict[str, Tensor2]:
    """
    带偏差修正的标准Adam更新（原地修改参数数据）

    Args:
        params: {参数名: 参数张量}
        grads: {参数名: 梯度}，缺失的参数视为零梯度
        state: 优化器状态，step_count 自增1

    Returns:
        更新后的参数字典（同一批对象）
    """
    if state.lr <= 0:
        raise GradientError(f"学习率必须为正数，当前 {state.lr}")
    for name, g in grads.items():
        if name not in params:
            raise GradientError(f"梯度 {name} 没有对应的参数")
        if g.shape != params[name].shape:
            raise GradientError(f"参数 {name} 梯度形状 {g.shape} 与参数形状 {params[name].shape} 不一致")
        if not np.all(np.isfinite(g)):
            raise GradientError(f"参数 {name} 的梯度包含NaN或Inf")

    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(param.data)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / bias1
        v_hat = v / bias2
        param.data = param.data - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params


# ---------------------------------------------------------------------------
# 有限差分梯度检验
# ---------------------------------------------------------------------------

def finite_difference_check(loss_fn: Callable[[], Tensor2], params: Iterable[Tensor2],
                            h: float = 1e-5) -> Dict[str, float]:
    """
    用中心差分校验解析梯度

    Args:
        loss_fn: 无参函数，每次调用都重新构建计算并返回标量loss
        params: 待检验的参数（需带name）
        h: 差分步长

    Returns:
        {参数名: 相对误差}，相对误差 = ||a-n|| / max(||a||+||n||, 1e-12)
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    graph = CompGraph("gradcheck")
    loss = graph.forward(loss_fn)
    analytic = graph.backward(loss)

    errors = {}
    for p in params:
        a = analytic.get(p.name, np.zeros_like(p.data))
        n = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            original = p.data[idx]
            p.data[idx] = original + h
            plus = loss_fn().item()
            p.data[idx] = original - h
            minus = loss_fn().item()
            p.data[idx] = original
            n[idx] = (plus - minus) / (2.0 * h)
        denom = max(float(np.linalg.norm(a) + np.linalg.norm(n)), 1e-12)
        errors[p.name] = float(np.linalg.norm(a - n)) / denom
    for p in params:
        p.zero_grad()
    return errors
