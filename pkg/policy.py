#!/usr/bin/env python3
"""
条件序列策略模块
把 (rtg, s, a) 三元组编码为token，经带因果卷积的自注意力块，输出逐步的状态与动作预测
"""
from dataclasses import dataclass, asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import yaml

import numkit as nk
from config import ModelConfig, QAlignError, setup_logger

# 被屏蔽位置的注意力偏置（有限值，softmax减最大值后精确为0）
MASK_BIAS = -1e30
HEAD_INIT_SCALE = 1e-3


class PolicyError(QAlignError):
    """策略输入不合法"""


@dataclass
class ContextWindow:
    """
    k步上下文窗口 τ_t，可带前导批维

    左侧填充的槽位 valid_mask 为 False 且各字段为零。
    rewards/dones 仅在训练评论家时需要。
    """
    rtgs: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    valid_mask: np.ndarray
    rewards: Optional[np.ndarray] = None
    dones: Optional[np.ndarray] = None

    @property
    def batched(self) -> bool:
        return self.rtgs.ndim == 2

    @property
    def k(self) -> int:
        return self.rtgs.shape[-1]

    @classmethod
    def stack(cls, windows: Sequence['ContextWindow']) -> 'ContextWindow':
        """把若干单窗口堆叠成一个批"""
        if not windows:
            raise PolicyError("不能堆叠空窗口列表")

        def _stack(name):
            values = [getattr(w, name) for w in windows]
            if any(v is None for v in values):
                return None
            return np.stack(values)

        return cls(
            rtgs=_stack('rtgs'),
            states=_stack('states'),
            actions=_stack('actions'),
            timesteps=_stack('timesteps'),
            valid_mask=_stack('valid_mask'),
            rewards=_stack('rewards'),
            dones=_stack('dones'),
        )

    def copy(self) -> 'ContextWindow':
        return ContextWindow(**{
            name: (None if value is None else value.copy())
            for name, value in self.__dict__.items()
        })

    def equals(self, other: 'ContextWindow') -> bool:
        for name, value in self.__dict__.items():
            theirs = getattr(other, name)
            if (value is None) != (theirs is None):
                return False
            if value is not None and not np.array_equal(value, theirs):
                return False
        return True


@dataclass
class PolicyOutput:
    """逐步预测：ŝ_i 与 â_i"""
    predicted_states: nk.Tensor
    predicted_actions: nk.Tensor


@dataclass
class PolicySpec:
    """网络结构描述，随检查点一起保存"""
    state_dim: int
    action_dim: int
    context_len: int = 8
    embed_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    conv_window: int = 6
    use_conv: bool = True
    dropout: float = 0.0
    max_timestep: int = 256
    n_actions: Optional[int] = None

    @classmethod
    def from_config(cls, model: ModelConfig, state_dim: int, action_dim: int,
                    context_len: int, n_actions: Optional[int] = None) -> 'PolicySpec':
        return cls(
            state_dim=state_dim,
            action_dim=action_dim,
            context_len=context_len,
            embed_dim=model.embed_dim,
            n_blocks=model.n_blocks,
            n_heads=model.n_heads,
            conv_window=model.conv_window,
            use_conv=model.use_conv,
            dropout=model.dropout,
            max_timestep=model.max_timestep,
            n_actions=n_actions,
        )

    def to_dict(self) -> Dict:
        return asdict(self)


def shift_rtg(window: ContextWindow, g: Union[float, np.ndarray]) -> ContextWindow:
    """
    修改后的RTG序列：所有有效槽位的rtg加上 g

    Args:
        window: 单窗口或窗口批
        g: 标量，或批模式下每个窗口一个偏移（序列级噪声）

    Returns:
        ContextWindow: 新副本，其余字段不变
    """
    shifted = window.copy()
    offset = np.asarray(g, dtype=np.float64)
    if offset.ndim == 1:
        if not window.batched or offset.shape[0] != window.rtgs.shape[0]:
            raise PolicyError(f"逐窗口偏移长度 {offset.shape} 与批大小不符")
        offset = offset[:, None]
    shifted.rtgs = np.where(window.valid_mask, window.rtgs + offset, window.rtgs)
    return shifted


class PolicyModel:
    """带卷积增强注意力的RTG条件序列策略 π_θ"""

    def __init__(self, spec: PolicySpec, seed: Optional[int] = 0, params: Optional[nk.ParamStore] = None):
        if spec.embed_dim % spec.n_heads != 0:
            raise PolicyError(f"embed_dim={spec.embed_dim} 不能被 n_heads={spec.n_heads} 整除")
        self.spec = spec
        self._clamp_warned = False
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = params

    # ------------------------------------------------------------ 初始化

    def _init_params(self, rng: np.random.Generator) -> nk.ParamStore:
        s = self.spec
        d = s.embed_dim
        store = nk.ParamStore()

        def linear(name, fan_in, fan_out, gain=1.0):
            bound = 1.0 / np.sqrt(fan_in)
            store.add(f'{name}.w', gain * rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            store.add(f'{name}.b', np.zeros(fan_out))

        def norm(name):
            store.add(f'{name}.g', np.ones(d))
            store.add(f'{name}.b', np.zeros(d))

        linear('embed.rtg', 1, d)
        linear('embed.state', s.state_dim, d)
        linear('embed.action', s.action_dim, d)
        bound = 1.0 / np.sqrt(d)
        store.add('embed.time', rng.uniform(-bound, bound, size=(s.max_timestep, d)))
        norm('embed.ln')

        for layer in range(s.n_blocks):
            prefix = f'blocks.{layer}'
            norm(f'{prefix}.ln1')
            for proj in ('q', 'k', 'v'):
                linear(f'{prefix}.attn.{proj}', d, d)
                if s.use_conv:
                    conv_bound = 1.0 / np.sqrt(s.conv_window * d)
                    store.add(f'{prefix}.attn.conv_{proj}.w',
                              rng.uniform(-conv_bound, conv_bound, size=(s.conv_window, d, d)))
                    store.add(f'{prefix}.attn.conv_{proj}.b', np.zeros(d))
            linear(f'{prefix}.attn.out', d, d)
            norm(f'{prefix}.ln2')
            linear(f'{prefix}.mlp.fc', d, 4 * d)
            linear(f'{prefix}.mlp.proj', 4 * d, d)

        if s.n_blocks > 0:
            norm('ln_f')
        linear('head.state', d, s.state_dim, gain=HEAD_INIT_SCALE)
        linear('head.action', d, s.action_dim, gain=HEAD_INIT_SCALE)
        return store

    # ------------------------------------------------------------ 前向

    def _linear(self, x, name):
        return nk.add(nk.matmul(x, self.params[f'{name}.w']), self.params[f'{name}.b'])

    def _norm(self, x, name):
        return nk.layer_norm(x, self.params[f'{name}.g'], self.params[f'{name}.b'])

    def _check(self, window: ContextWindow):
        s = self.spec
        if window.k != s.context_len:
            raise nk.ShapeError('predict', f"窗口长度 {window.k} 与配置 k={s.context_len} 不符")
        if window.states.shape[-1] != s.state_dim:
            raise nk.ShapeError('predict', f"状态维 {window.states.shape[-1]} 与模型 {s.state_dim} 不符")
        if window.actions.shape[-1] != s.action_dim:
            raise nk.ShapeError('predict', f"动作维 {window.actions.shape[-1]} 与模型 {s.action_dim} 不符")

    def embed(self, window: ContextWindow) -> nk.Tensor:
        """
        token嵌入，顺序为 (rtg_i, s_i, a_i)，形状 [B, 3k, d]

        Args:
            window: 批窗口

        Returns:
            nk.Tensor: 经嵌入层归一化后的token表示
        """
        s = self.spec
        batch, k = window.rtgs.shape
        raw_time = window.timesteps.astype(np.int64)
        if not self._clamp_warned and np.any(raw_time[window.valid_mask] >= s.max_timestep):
            self._clamp_warned = True
            setup_logger(self.__class__.__name__).warning(
                f"时间步 {int(raw_time.max())} 超出 max_timestep={s.max_timestep}，按 {s.max_timestep - 1} 的时间嵌入处理")
        time_index = np.clip(raw_time, 0, s.max_timestep - 1)
        time_emb = nk.gather(self.params['embed.time'], time_index)

        rtg_tok = nk.add(self._linear(window.rtgs[..., None], 'embed.rtg'), time_emb)
        state_tok = nk.add(self._linear(window.states, 'embed.state'), time_emb)
        action_tok = nk.add(self._linear(window.actions, 'embed.action'), time_emb)

        shape4 = (batch, k, 1, s.embed_dim)
        tokens = nk.concat([nk.reshape(rtg_tok, shape4),
                            nk.reshape(state_tok, shape4),
                            nk.reshape(action_tok, shape4)], axis=-2)
        tokens = nk.reshape(tokens, (batch, 3 * k, s.embed_dim))
        tokens = nk.mul(tokens, self._token_mask(window)[..., None])
        return self._norm(tokens, 'embed.ln')

    @staticmethod
    def _token_mask(window: ContextWindow) -> np.ndarray:
        return np.repeat(window.valid_mask.astype(np.float64), 3, axis=-1)

    def _attention_bias(self, window: ContextWindow) -> np.ndarray:
        token_valid = np.repeat(window.valid_mask, 3, axis=-1)
        n = token_valid.shape[-1]
        causal = np.tril(np.ones((n, n), dtype=bool))
        allowed = causal & (token_valid[:, None, :] | np.eye(n, dtype=bool))
        return np.where(allowed, 0.0, MASK_BIAS)

    def _block(self, x, layer: int, bias: np.ndarray, token_mask: np.ndarray, rng):
        s = self.spec
        prefix = f'blocks.{layer}'
        head_dim = s.embed_dim // s.n_heads
        h = self._norm(x, f'{prefix}.ln1')

        projected = {}
        for proj in ('q', 'k', 'v'):
            p = self._linear(h, f'{prefix}.attn.{proj}')
            if s.use_conv:
                # 填充槽位清零后再卷积，避免其数值泄漏到有效位置
                p = nk.mul(p, token_mask[..., None])
                p = nk.causal_conv1d(p, self.params[f'{prefix}.attn.conv_{proj}.w'])
                p = nk.add(p, self.params[f'{prefix}.attn.conv_{proj}.b'])
            projected[proj] = p

        heads = []
        for head in range(s.n_heads):
            lo, hi = head * head_dim, (head + 1) * head_dim
            q = nk.take_cols(projected['q'], lo, hi)
            k = nk.take_cols(projected['k'], lo, hi)
            v = nk.take_cols(projected['v'], lo, hi)
            scores = nk.scale(nk.matmul(q, nk.swap_last(k)), 1.0 / np.sqrt(head_dim))
            weights = nk.softmax(nk.add(scores, bias))
            heads.append(nk.matmul(weights, v))
        attended = self._linear(nk.concat(heads, axis=-1), f'{prefix}.attn.out')
        x = nk.add(x, nk.dropout(attended, s.dropout, rng))

        h = self._norm(x, f'{prefix}.ln2')
        h = nk.gelu(self._linear(h, f'{prefix}.mlp.fc'))
        h = self._linear(h, f'{prefix}.mlp.proj')
        return nk.add(x, nk.dropout(h, s.dropout, rng))

    def predict(self, window: ContextWindow, rng: Optional[np.random.Generator] = None) -> PolicyOutput:
        """
        逐步预测状态与动作

        ŝ_i 由第i步rtg token的隐状态解码，â_i 由第i步状态token的隐状态解码。

        Args:
            window: 单窗口或窗口批
            rng: 提供时启用dropout（训练），否则确定性前向

        Returns:
            PolicyOutput: 与输入同样带/不带批维
        """
        self._check(window)
        single = not window.batched
        if single:
            window = ContextWindow.stack([window])

        k = window.k
        x = self.embed(window)
        bias = self._attention_bias(window)
        token_mask = self._token_mask(window)
        for layer in range(self.spec.n_blocks):
            x = self._block(x, layer, bias, token_mask, rng)
        if self.spec.n_blocks > 0:
            x = self._norm(x, 'ln_f')

        rtg_hidden = nk.select_rows(x, 3 * np.arange(k))
        state_hidden = nk.select_rows(x, 3 * np.arange(k) + 1)
        states = self._linear(rtg_hidden, 'head.state')
        actions = self._linear(state_hidden, 'head.action')
        if single:
            states = nk.reshape(states, states.shape[1:])
            actions = nk.reshape(actions, actions.shape[1:])
        return PolicyOutput(predicted_states=states, predicted_actions=actions)

    # ------------------------------------------------------------ 复制与持久化

    def clone(self) -> 'PolicyModel':
        return PolicyModel(self.spec, params=self.params.copy())

    def save(self, path: Union[str, Path]):
        """保存检查点，并在旁边写结构描述 <path>.yaml"""
        path = Path(path)
        nk.save_checkpoint(self.params, path)
        descriptor = {'kind': 'policy', 'spec': self.spec.to_dict()}
        descriptor_path(path).write_text(yaml.safe_dump(descriptor, sort_keys=True), encoding='utf-8')

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'PolicyModel':
        path = Path(path)
        descriptor = yaml.safe_load(descriptor_path(path).read_text(encoding='utf-8'))
        if descriptor.get('kind') != 'policy':
            raise PolicyError(f"{path} 不是策略检查点")
        spec = PolicySpec(**descriptor['spec'])
        params = nk.load_checkpoint(path)
        expected = cls(spec, seed=0).params
        if params.names() != expected.names():
            raise PolicyError(f"检查点参数与结构描述不一致: {path}")
        return cls(spec, params=params)


def descriptor_path(path: Path) -> Path:
    return path.with_name(path.name + '.yaml')


def predict(model: PolicyModel, window: ContextWindow) -> PolicyOutput:
    return model.predict(window)


def act(model: PolicyModel, window: ContextWindow) -> np.ndarray:
    """
    取最新有效步的动作预测

    离散动作环境下按最近码字（one-hot）选择，平局取最小动作编号。

    Args:
        model: 策略
        window: 单窗口，至少一个有效槽位

    Returns:
        np.ndarray: 动作向量
    """
    if window.batched:
        raise PolicyError("act 只接受单窗口")
    valid = np.flatnonzero(window.valid_mask)
    if valid.size == 0:
        raise PolicyError("窗口没有有效槽位，无法给出动作")
    output = model.predict(window)
    action = output.predicted_actions.value[valid[-1]].copy()
    if model.spec.n_actions is not None:
        return nearest_codeword(action, model.spec.n_actions)
    return action


def nearest_codeword(action: np.ndarray, n_actions: int) -> np.ndarray:
    """one-hot码本中离 action 最近的码字（距离相同取编号小者）"""
    codebook = np.eye(n_actions)
    distances = np.sum((codebook - action[None, :]) ** 2, axis=1)
    return codebook[int(np.argmin(distances))]
