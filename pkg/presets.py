#!/usr/bin/env python3
"""
预设管理模块
按名称查找 configs/ 下的YAML预设，处理 extends 继承，生成 AlignConfig
"""
import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import yaml

from config import AlignConfig, ConfigError, presets_dir, setup_logger

DEFAULT_PRESET = 'desk-default'
EXTENDS_KEY = 'extends'


def deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """递归合并：override 中的映射逐键覆盖 base，其余值直接替换"""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class ResolvedConfig:
    """解析完成的配置及其原始字节（写入运行清单的快照）"""
    config: AlignConfig
    source: str
    snapshot: bytes


class PresetRegistry:
    """预设注册表"""

    def __init__(self, config_dir: Optional[Path] = None):
        """
        初始化预设注册表

        Args:
            config_dir: 预设目录，默认 RCSL_ALIGN_PRESETS_DIR 或 configs/
        """
        self.config_dir = Path(config_dir) if config_dir is not None else presets_dir()
        self.logger = setup_logger(self.__class__.__name__)

    def path(self, name: str) -> Path:
        return self.config_dir / f'{name}.yaml'

    def names(self) -> List[str]:
        return sorted(p.stem for p in self.config_dir.glob('*.yaml'))

    def _read(self, path: Path) -> Dict[str, Any]:
        try:
            raw = yaml.safe_load(path.read_text(encoding='utf-8'))
        except yaml.YAMLError as e:
            raise ConfigError(f"YAML解析失败 {path}: {e}")
        if raw is None:
            return {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} 顶层必须是映射")
        return raw

    def raw(self, name: str, _chain: Tuple[str, ...] = ()) -> Dict[str, Any]:
        """
        读取预设并展开 extends 链

        Args:
            name: 预设名（不带 .yaml）

        Returns:
            合并后的原始映射（不含 extends 键）
        """
        if name in _chain:
            raise ConfigError(f"预设继承出现循环: {' -> '.join(_chain + (name,))}")
        path = self.path(name)
        if not path.exists():
            raise ConfigError(f"未知预设: {name}（可用: {', '.join(self.names())}）")
        return self.expand(self._read(path), _chain + (name,))

    def expand(self, raw: Dict[str, Any], _chain: Tuple[str, ...] = ()) -> Dict[str, Any]:
        raw = dict(raw)
        parent = raw.pop(EXTENDS_KEY, None)
        if parent is None:
            return raw
        # 只继承参数，文档标记与说明不往下传
        base = self.raw(str(parent), _chain)
        base.pop('documentation_only', None)
        base.pop('description', None)
        return deep_merge(base, raw)

    def overrides(self, name: str) -> Dict[str, Any]:
        """预设文件自己声明的参数（不展开 extends，不含说明与文档标记），用于叠加到其他配置上"""
        path = self.path(name)
        if not path.exists():
            raise ConfigError(f"未知预设: {name}（可用: {', '.join(self.names())}）")
        raw = self._read(path)
        for key in (EXTENDS_KEY, 'description', 'documentation_only'):
            raw.pop(key, None)
        return raw

    def load(self, name: str) -> AlignConfig:
        return AlignConfig.from_dict(self.raw(name))

    def resolve(self, name: str) -> ResolvedConfig:
        path = self.path(name)
        config = self.load(name)
        return ResolvedConfig(config=config, source=f'preset:{name}', snapshot=path.read_bytes())

    def resolve_file(self, path: Path) -> ResolvedConfig:
        """
        读取用户配置文件（可以 extends 某个预设）

        Args:
            path: YAML配置文件路径

        Returns:
            ResolvedConfig: 快照为文件的原始字节
        """
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"配置文件不存在: {path}")
        snapshot = path.read_bytes()
        config = AlignConfig.from_dict(self.expand(self._read(path)))
        return ResolvedConfig(config=config, source=str(path), snapshot=snapshot)

    def list_presets(self) -> Dict[str, Dict[str, Any]]:
        """
        获取所有预设及其说明

        Returns:
            {预设名: {'description': 说明, 'documentation_only': bool}}，无法解析的预设跳过
        """
        presets = {}
        for name in self.names():
            try:
                raw = self._read(self.path(name))
            except ConfigError as e:
                self.logger.warning(f"跳过无法解析的预设 {name}: {e}")
                continue
            presets[name] = {
                'description': raw.get('description', ''),
                'documentation_only': bool(raw.get('documentation_only', False)),
            }
        return presets

    def describe(self, name: str) -> str:
        """展开继承后的完整配置（YAML文本）"""
        return yaml.safe_dump(self.load(name).to_dict(), sort_keys=True, allow_unicode=True)
