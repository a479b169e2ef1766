#!/usr/bin/env python3
"""
数值计算模块
基于numpy的稠密张量、逐次前向构建的操作带(tape)反向求导、Adam优化器、因果一维卷积，
以及参数检查点的二进制读写

所有数值均为64位浮点。没有激活的操作带时，运算只做前向求值（推理模式）。
"""
import hashlib
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import QAlignError


class ShapeError(QAlignError):
    """组合运算时形状不匹配"""

    def __init__(self, op: str, message: str):
        super().__init__(f"[{op}] {message}")
        self.op = op


class NonFiniteError(QAlignError):
    """中间结果出现 NaN/Inf"""

    def __init__(self, op: str):
        super().__init__(f"[{op}] 出现非有限数值")
        self.op = op


class GradientSlotError(QAlignError):
    """参数缺少梯度槽"""


class CheckpointError(QAlignError):
    """检查点文件损坏或版本不符"""


ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]


class Tensor:
    """带梯度的稠密张量（行优先存储）"""

    __slots__ = ('value', 'grad', 'requires_grad', 'op', '_parents', '_backward')

    def __init__(self, value, requires_grad: bool = False, op: str = 'leaf'):
        self.value = np.array(value, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[Callable] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """行优先展平后的数据"""
        return self.value.reshape(-1)

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError('item', f"只有标量可以转为float，当前形状 {self.shape}")
        return float(self.value.reshape(-1)[0])

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"


class Tape:
    """一次前向计算的操作带，反向时按记录逆序回放"""

    _local = threading.local()

    def __init__(self):
        self.nodes: List[Tensor] = []

    def __enter__(self) -> 'Tape':
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        self._stack().pop()
        return False

    @classmethod
    def _stack(cls) -> List['Tape']:
        if not hasattr(cls._local, 'stack'):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def active(cls) -> Optional['Tape']:
        stack = cls._stack()
        return stack[-1] if stack else None

    def record(self, node: Tensor):
        self.nodes.append(node)

    def backward(self, output: Tensor):
        """从标量输出反向传播，梯度累积到各叶子张量的 grad"""
        if output.value.size != 1:
            raise ShapeError('backward', f"输出必须是标量，当前形状 {output.shape}")
        output.grad = np.ones_like(output.value)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = _unbroadcast(np.asarray(g, dtype=np.float64), parent.shape)
                if parent.grad is None:
                    parent.grad = g.copy()
                else:
                    parent.grad = parent.grad + g


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """把广播后的梯度按原形状求和还原"""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _make(value: np.ndarray, parents: Tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.requires_grad = False
    out.op = op
    out._parents = ()
    out._backward = None
    tape = Tape.active()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.record(out)
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"无法广播 {a.shape} 与 {b.shape}")


# ---------------------------------------------------------------- 基本运算

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('add', a, b)
    return _make(a.value + b.value, (a, b), lambda g: (g, g), 'add')


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('sub', a, b)
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), 'sub')


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape('mul', a, b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), 'mul')


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g: (-g,), 'neg')


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _make(a.value * factor, (a,), lambda g: (g * factor,), 'scale')


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(av * av, (a,), lambda g: (2.0 * av * g,), 'square')


def abs_(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return _make(np.abs(av), (a,), lambda g: (np.sign(av) * g,), 'abs')


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """矩阵乘，支持前导批维（numpy.matmul 语义，不支持一维）"""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError('matmul', f"需要至少二维输入: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError('matmul', f"内维不匹配: {a.shape} @ {b.shape}")
    try:
        value = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError('matmul', f"批维无法广播: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return (np.matmul(g, np.swapaxes(bv, -1, -2)),
                np.matmul(np.swapaxes(av, -1, -2), g))

    return _make(value, (a, b), backward, 'matmul')


def sum_(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), backward, 'sum')


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mse(pred: ArrayLike, target: ArrayLike) -> Tensor:
    """均方误差（对所有元素取平均）"""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError('mse', f"预测 {pred.shape} 与目标 {target.shape} 形状不同")
    return mean(square(sub(pred, target)))


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError('reshape', f"无法把 {original} 变形为 {shape}")
    return _make(value, (a,), lambda g: (g.reshape(original),), 'reshape')


def swap_last(a: ArrayLike) -> Tensor:
    """交换最后两个轴"""
    a = as_tensor(a)
    if a.value.ndim < 2:
        raise ShapeError('swap_last', f"需要至少二维: {a.shape}")
    return _make(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), 'swap_last')


def take_cols(a: ArrayLike, start: int, stop: int) -> Tensor:
    """取最后一轴的 [start, stop) 切片"""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _make(a.value[..., start:stop].copy(), (a,), backward, 'take_cols')


def select_rows(a: ArrayLike, index: np.ndarray) -> Tensor:
    """沿倒数第二轴按索引取行"""
    a = as_tensor(a)
    shape = a.shape
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        full = np.zeros(shape)
        np.add.at(np.moveaxis(full, -2, 0), index, np.moveaxis(g, -2, 0))
        return (full,)

    return _make(a.value[..., index, :].copy(), (a,), backward, 'select_rows')


def concat(parts: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    tensors = tuple(as_tensor(p) for p in parts)
    try:
        value = np.concatenate([t.value for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError('concat', f"形状无法拼接: {[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(value, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)), 'concat')


def gather(table: ArrayLike, indices: np.ndarray) -> Tensor:
    """嵌入表查找：table[indices]"""
    table = as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError('gather', f"索引越界: 表大小 {table.shape[0]}")
    shape = table.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, indices, g)
        return (full,)

    return _make(table.value[indices], (table,), backward, 'gather')


def stop_gradient(a: ArrayLike) -> Tensor:
    """梯度屏障：数值原样输出，反向贡献恒为零"""
    a = as_tensor(a)
    return Tensor(a.value.copy(), requires_grad=False, op='stop_gradient')


# ---------------------------------------------------------------- 非线性

_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: ArrayLike) -> Tensor:
    """GELU（tanh近似）"""
    a = as_tensor(a)
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    value = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _make(value, (a,), backward, 'gelu')


def softmax(a: ArrayLike) -> Tensor:
    """最后一轴softmax，先减最大值保证数值稳定"""
    a = as_tensor(a)
    shifted = a.value - np.max(a.value, axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make(s, (a,), backward, 'softmax')


def layer_norm(a: ArrayLike, gamma: ArrayLike, beta: ArrayLike, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeError('layer_norm', f"仿射参数形状 {gamma.shape}/{beta.shape} 与特征维 {a.shape[-1]} 不符")
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gv = gamma.value
    n = x.shape[-1]

    def backward(g):
        dxhat = g * gv
        dx = inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return (dx, g * xhat, g)

    return _make(xhat * gv + beta.value, (a, gamma, beta), backward, 'layer_norm')


def dropout(a: ArrayLike, rate: float, rng: Optional[np.random.Generator]) -> Tensor:
    """反向缩放的dropout；rate为0或没有rng时为恒等"""
    a = as_tensor(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.value * keep, (a,), lambda g: (g * keep,), 'dropout')


def causal_conv1d(sequence: ArrayLike, kernel: ArrayLike) -> Tensor:
    """
    因果一维卷积

    Args:
        sequence: [..., time, channels_in]
        kernel: [window, channels_in, channels_out]

    Returns:
        Tensor: [..., time, channels_out]，左侧补 window-1 帧零，
        输出第t帧只依赖输入中 <= t 的帧
    """
    sequence, kernel = as_tensor(sequence), as_tensor(kernel)
    if kernel.value.ndim != 3 or kernel.shape[0] < 1:
        raise ShapeError('causal_conv1d', f"卷积核必须是 [window, cin, cout]: {kernel.shape}")
    if sequence.value.ndim < 2 or sequence.shape[-2] < 1:
        raise ShapeError('causal_conv1d', f"序列必须是 [..., time, channels] 且长度 >= 1: {sequence.shape}")
    if sequence.shape[-1] != kernel.shape[1]:
        raise ShapeError('causal_conv1d', f"通道数不匹配: 序列 {sequence.shape[-1]} vs 卷积核 {kernel.shape[1]}")

    window = kernel.shape[0]
    steps = sequence.shape[-2]
    x = sequence.value
    pad_width = [(0, 0)] * (x.ndim - 2) + [(window - 1, 0), (0, 0)]
    padded = np.pad(x, pad_width)
    kv = kernel.value
    out = np.zeros(x.shape[:-1] + (kv.shape[2],))
    for j in range(window):
        out = out + np.matmul(padded[..., j:j + steps, :], kv[j])

    def backward(g):
        d_padded = np.zeros_like(padded)
        d_kernel = np.zeros_like(kv)
        flat_g = g.reshape(-1, g.shape[-1])
        for j in range(window):
            frames = padded[..., j:j + steps, :]
            d_kernel[j] = frames.reshape(-1, frames.shape[-1]).T @ flat_g
            d_padded[..., j:j + steps, :] += np.matmul(g, kv[j].T)
        return (d_padded[..., window - 1:, :], d_kernel)

    return _make(out, (sequence, kernel), backward, 'causal_conv1d')


# ---------------------------------------------------------------- 参数与求导

class ParamStore:
    """命名参数集合，每个参数恰好对应一个同形状的梯度槽"""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"参数名重复: {name}")
        tensor = Tensor(value, op=f'param:{name}')
        self._params[name] = tensor
        self.grads[name] = np.zeros_like(tensor.value)
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def items(self) -> Iterator[Tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self):
        for name, tensor in self._params.items():
            self.grads[name] = np.zeros_like(tensor.value)

    def flat_values(self) -> np.ndarray:
        """所有参数按注册顺序展平拼接（用于逐位比较快照）"""
        if not self._params:
            return np.zeros(0)
        return np.concatenate([t.value.reshape(-1) for t in self._params.values()])

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self.grads.values())))

    def copy(self) -> 'ParamStore':
        clone = ParamStore()
        for name, tensor in self._params.items():
            clone.add(name, tensor.value.copy())
        return clone

    def assign_from(self, other: 'ParamStore'):
        self._check_same_layout(other)
        for name, tensor in self._params.items():
            tensor.value = other[name].value.copy()

    def polyak_from(self, online: 'ParamStore', rate: float):
        """self <- rate * online + (1 - rate) * self"""
        self._check_same_layout(online)
        for name, tensor in self._params.items():
            tensor.value = rate * online[name].value + (1.0 - rate) * tensor.value

    def _check_same_layout(self, other: 'ParamStore'):
        if self.names() != other.names():
            raise ShapeError('param_store', "两个参数集合的名称不一致")
        for name, tensor in self._params.items():
            if tensor.shape != other[name].shape:
                raise ShapeError('param_store', f"参数 {name} 形状不一致: {tensor.shape} vs {other[name].shape}")


def grad(computation: Callable[..., Tensor], params: ParamStore, *args, **kwargs) -> float:
    """
    计算标量 computation 的值，并把对 params 的梯度写入梯度槽

    Args:
        computation: 读取 params 中张量、返回标量 Tensor 的函数
        params: 需要求导的参数集合（其它张量一律视为常量）

    Returns:
        float: 前向计算得到的标量值
    """
    leaves = [tensor for _, tensor in params.items()]
    for leaf in leaves:
        leaf.requires_grad = True
        leaf.grad = None
    try:
        with Tape() as tape:
            output = as_tensor(computation(*args, **kwargs))
            if output.value.size != 1:
                raise ShapeError('grad', f"计算结果必须是标量，当前形状 {output.shape}")
            tape.backward(output)
        for name, leaf in params.items():
            params.grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        return output.item()
    finally:
        for leaf in leaves:
            leaf.requires_grad = False
            leaf.grad = None


@dataclass
class OptimState:
    """Adam 优化器状态"""
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: ParamStore, state: OptimState):
    """带偏差修正的Adam更新；梯度槽保持不变，由调用方清零"""
    for name in params.names():
        if name not in params.grads:
            raise GradientSlotError(f"参数 {name} 没有梯度槽")
        if params.grads[name].shape != params[name].shape:
            raise GradientSlotError(f"参数 {name} 的梯度槽形状不匹配")

    state.step += 1
    t = state.step
    for name, tensor in params.items():
        g = params.grads[name]
        m = state.first_moment.get(name, np.zeros_like(g))
        v = state.second_moment.get(name, np.zeros_like(g))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        tensor.value = tensor.value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------- 检查点

CHECKPOINT_MAGIC = b'QALNCKPT'
CHECKPOINT_VERSION = 1
_DIGEST_SIZE = 32


def save_checkpoint(params: ParamStore, path: Union[str, Path]):
    """
    保存参数检查点

    布局: magic(8) | version u16 | count u32 | 每个参数 [name_len u32, name, rank u32,
    extents u64*rank, <f8 数据] | sha256(32)
    """
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack('<HI', CHECKPOINT_VERSION, len(params))
    for name, tensor in params.items():
        encoded = name.encode('utf-8')
        body += struct.pack('<I', len(encoded)) + encoded
        body += struct.pack('<I', tensor.value.ndim)
        body += struct.pack(f'<{tensor.value.ndim}Q', *tensor.shape)
        body += tensor.value.astype('<f8').tobytes(order='C')
    body += hashlib.sha256(bytes(body)).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(body))


def load_checkpoint(path: Union[str, Path]) -> ParamStore:
    raw = Path(path).read_bytes()
    header_size = len(CHECKPOINT_MAGIC) + 6
    if len(raw) < header_size + _DIGEST_SIZE:
        raise CheckpointError(f"检查点被截断: {path}")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"不是检查点文件（magic不符）: {path}")
    version, count = struct.unpack_from('<HI', raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"检查点版本 {version} 不受支持（期望 {CHECKPOINT_VERSION}）")
    body, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"检查点校验和不符: {path}")

    store = ParamStore()
    offset = header_size
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from('<I', body, offset)
            offset += 4
            name = body[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (rank,) = struct.unpack_from('<I', body, offset)
            offset += 4
            shape = struct.unpack_from(f'<{rank}Q', body, offset)
            offset += 8 * rank
            size = int(np.prod(shape)) if rank else 1
            values = np.frombuffer(body, dtype='<f8', count=size, offset=offset)
            offset += 8 * size
            store.add(name, values.reshape(shape).astype(np.float64))
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"检查点记录解析失败: {e}")
    if offset != len(body):
        raise CheckpointError(f"检查点末尾有多余数据: {len(body) - offset} 字节")
    return store
