#!/usr/bin/env python3
"""
配置管理模块
管理训练、数据生成、评估的全部超参数，支持YAML预设与环境变量覆盖
"""
import os
import logging
from dataclasses import dataclass, field, fields, asdict, is_dataclass
from pathlib import Path
from typing import Dict, Any, Optional, Tuple

from dotenv import load_dotenv

# 加载环境变量
load_dotenv()


class QAlignError(Exception):
    """项目内所有异常的基类"""


class ConfigError(QAlignError):
    """配置不合法（未知键、取值越界等）"""


NOISE_MODES = ('gaussian', 'half_normal')
INDICATOR_MODES = ('asymmetric', 'symmetric')
PENALTY_MODES = ('absolute', 'squared')
PRETRAIN_METHODS = ('double_q', 'iql')


_LOGGER_NAMES = set()
_LEVEL_OVERRIDE: Optional[str] = None


def setup_logger(name: str, level: Optional[str] = None) -> logging.Logger:
    """
    获取带统一格式的命名日志器（输出到标准错误）

    Args:
        name: 日志器名称，一般是类名
        level: 日志级别，默认读取 LOG_LEVEL

    Returns:
        logging.Logger
    """
    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, (level or _LEVEL_OVERRIDE or log_level()).upper(), logging.INFO))
    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter('%(levelname)s: %(message)s')
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    _LOGGER_NAMES.add(name)
    return logger


def apply_log_level(level: Optional[str]):
    """修改全局日志级别（已创建的日志器一并更新）；None 表示回到 LOG_LEVEL"""
    global _LEVEL_OVERRIDE
    _LEVEL_OVERRIDE = level
    resolved = getattr(logging, (level or log_level()).upper(), logging.INFO)
    for name in _LOGGER_NAMES:
        logging.getLogger(name).setLevel(resolved)


def log_level() -> str:
    return os.getenv('LOG_LEVEL', 'INFO')


def worker_threads() -> int:
    """并行工作线程上限（RCSL_ALIGN_THREADS）"""
    raw = os.getenv('RCSL_ALIGN_THREADS', '4')
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"RCSL_ALIGN_THREADS 必须是正整数: {raw!r}")


def presets_dir() -> Path:
    return Path(os.getenv('RCSL_ALIGN_PRESETS_DIR', Path(__file__).parent / 'configs'))


@dataclass
class ModelConfig:
    """序列策略网络结构（桌面规模默认值）"""
    embed_dim: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    conv_window: int = 6
    use_conv: bool = True
    dropout: float = 0.0
    max_timestep: int = 256


@dataclass
class CriticConfig:
    """双Q网络结构与预训练预算"""
    hidden_width: int = 64
    hidden_layers: int = 3
    pretrain_method: str = 'double_q'
    pretrain_steps: int = 2000
    pretrain_batch: int = 64
    learning_rate: float = 3e-4


@dataclass
class DataConfig:
    """行为数据生成配置"""
    env_id: str = 'pointmass'
    episodes: int = 2000
    epsilon: float = 0.2


@dataclass
class EvalConfig:
    """对齐评估扫描配置"""
    n_targets: int = 12
    grid_step: Optional[float] = None
    rollouts: int = 20
    n_seeds: int = 1


@dataclass
class AlignConfig:
    """Q引导RTG对齐训练的全部超参数"""
    sigma_e: float = 1.0
    lambda_e: float = 1.0
    delta_rtg: float = 1.0
    gamma: float = 0.99
    alpha: float = 0.005
    context_len: int = 8
    batch_size: int = 64
    epochs: int = 10
    steps_per_epoch: int = 1000
    rtg_scale: Optional[float] = None
    noise_mode: str = 'gaussian'
    indicator_mode: str = 'asymmetric'
    penalty_mode: str = 'absolute'
    freeze_critic: bool = False
    align_with_min_q: bool = False
    target_noise_std: float = 0.0
    learning_rate: float = 3e-4
    critic_learning_rate: float = 3e-4
    checkpoint_every: int = 0
    seed: int = 0
    description: str = ''
    documentation_only: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> 'AlignConfig':
        """
        从字典构建配置，未知键直接拒绝

        Args:
            raw: YAML解析得到的映射

        Returns:
            AlignConfig
        """
        return _build(cls, raw or {}, prefix='')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> Tuple[bool, str]:
        """验证配置有效性"""
        checks = [
            (self.sigma_e >= 0, f"sigma_e 必须 >= 0: {self.sigma_e}"),
            (self.lambda_e >= 0, f"lambda_e 必须 >= 0: {self.lambda_e}"),
            (self.delta_rtg >= 0, f"delta_rtg 必须 >= 0: {self.delta_rtg}"),
            (0 < self.gamma <= 1, f"gamma 必须在 (0, 1] 内: {self.gamma}"),
            (0 < self.alpha <= 1, f"alpha 必须在 (0, 1] 内: {self.alpha}"),
            (self.context_len >= 1, f"context_len 必须 >= 1: {self.context_len}"),
            (self.batch_size >= 1, f"batch_size 必须 >= 1: {self.batch_size}"),
            (self.epochs >= 0, f"epochs 必须 >= 0: {self.epochs}"),
            (self.steps_per_epoch >= 1, f"steps_per_epoch 必须 >= 1: {self.steps_per_epoch}"),
            (self.rtg_scale is None or self.rtg_scale > 0, f"rtg_scale 必须 > 0: {self.rtg_scale}"),
            (self.noise_mode in NOISE_MODES, f"noise_mode 取值非法: {self.noise_mode}"),
            (self.indicator_mode in INDICATOR_MODES, f"indicator_mode 取值非法: {self.indicator_mode}"),
            (self.penalty_mode in PENALTY_MODES, f"penalty_mode 取值非法: {self.penalty_mode}"),
            (self.target_noise_std >= 0, f"target_noise_std 必须 >= 0: {self.target_noise_std}"),
            (self.learning_rate > 0 and self.critic_learning_rate > 0, "学习率必须 > 0"),
            (self.checkpoint_every >= 0, "checkpoint_every 必须 >= 0"),
            (self.model.embed_dim % max(self.model.n_heads, 1) == 0,
             f"embed_dim={self.model.embed_dim} 不能被 n_heads={self.model.n_heads} 整除"),
            (self.model.n_blocks >= 0 and self.model.n_heads >= 1, "n_blocks >= 0 且 n_heads >= 1"),
            (self.model.conv_window >= 1, f"conv_window 必须 >= 1: {self.model.conv_window}"),
            (0 <= self.model.dropout < 1, f"dropout 必须在 [0, 1) 内: {self.model.dropout}"),
            (self.model.max_timestep >= 1, "max_timestep 必须 >= 1"),
            (self.critic.hidden_width >= 1 and self.critic.hidden_layers >= 1, "critic 宽度/层数必须 >= 1"),
            (self.critic.pretrain_method in PRETRAIN_METHODS,
             f"critic.pretrain_method 取值非法: {self.critic.pretrain_method}"),
            (self.critic.pretrain_steps >= 0 and self.critic.pretrain_batch >= 1, "critic 预训练预算非法"),
            (self.data.episodes >= 1, f"data.episodes 必须 >= 1: {self.data.episodes}"),
            (0 <= self.data.epsilon <= 1, f"data.epsilon 必须在 [0, 1] 内: {self.data.epsilon}"),
            (self.eval.n_targets >= 1 and self.eval.rollouts >= 1 and self.eval.n_seeds >= 1,
             "eval 目标数、rollout数、种子数必须 >= 1"),
            (self.eval.grid_step is None or self.eval.grid_step > 0, "eval.grid_step 必须 > 0"),
        ]
        for ok, message in checks:
            if not ok:
                return False, message

        if self.critic.pretrain_method == 'iql':
            return False, ("critic.pretrain_method=iql 不受支持: 稀疏奖励任务的期望分位(IQL)预训练"
                           "不在本工具范围内，请改用 double_q")
        return True, ""

    def ensure_valid(self):
        valid, message = self.validate()
        if not valid:
            raise ConfigError(message)

    def __repr__(self) -> str:
        return (
            f"AlignConfig("
            f"env={self.data.env_id}, "
            f"sigma_e={self.sigma_e}, lambda_e={self.lambda_e}, "
            f"delta_rtg={self.delta_rtg}, seed={self.seed})"
        )


def _build(cls, raw: Dict[str, Any], prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"配置段 {prefix or '<root>'} 必须是映射")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"未知配置键: {', '.join(prefix + k for k in unknown)}")

    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name) if name in ('model', 'critic', 'data', 'eval') else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value or {}, prefix=f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(cls, known[name], value, prefix + name)
    return cls(**kwargs)


def _coerce(cls, f, value, dotted: str):
    """按字段默认值的类型做宽松转换（YAML中 1 与 1.0 混用很常见）"""
    default = getattr(cls(), f.name)
    if value is None:
        return None
    if isinstance(default, bool):
        return _str_to_bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{dotted} 必须是整数: {value}")
        return int(value)
    if isinstance(default, float) or default is None:
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{dotted} 必须是数值: {value!r}")
    return value


def _str_to_bool(value) -> bool:
    """转换字符串为布尔值"""
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        return value.lower() in ('true', '1', 'yes', 'on')
    return bool(value)
