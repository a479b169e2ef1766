#!/usr/bin/env python3
"""
运行清单模块
记录每次命令产生的文件、配置快照、种子与时间戳，写为输出目录下的 manifest.yaml
"""
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml

from config import setup_logger

TOOL_VERSION = '0.4.0'
MANIFEST_NAME = 'manifest.yaml'
SNAPSHOT_NAME = 'config_snapshot.yaml'


def _now() -> str:
    return datetime.now().isoformat(timespec='seconds')


@dataclass
class RunManifest:
    """输出目录的运行清单；同一目录上的多个命令依次追加记录"""
    out_dir: str
    tool_version: str = TOOL_VERSION
    seed: Optional[int] = None
    env_id: str = ''
    config_source: str = ''
    config_snapshot: str = ''
    artifacts: Dict[str, str] = field(default_factory=dict)
    partial: List[str] = field(default_factory=list)
    commands: List[Dict[str, Any]] = field(default_factory=list)

    @classmethod
    def open(cls, out_dir: Union[str, Path]) -> 'RunManifest':
        """读取已有清单，不存在则新建（不写盘）"""
        out_dir = Path(out_dir)
        path = out_dir / MANIFEST_NAME
        if not path.exists():
            return cls(out_dir=str(out_dir))
        raw = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
        raw['out_dir'] = str(out_dir)
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in raw.items() if k in known})

    @property
    def path(self) -> Path:
        return Path(self.out_dir) / MANIFEST_NAME

    def begin(self, command: str, seed: int, env_id: str = ''):
        self.seed = int(seed)
        if env_id:
            self.env_id = env_id
        self.commands.append({'command': command, 'status': 'running', 'started_at': _now(), 'finished_at': None})

    def finish(self, status: str = 'ok'):
        if self.commands:
            self.commands[-1].update(status=status, finished_at=_now())
        self.write()

    def snapshot(self, source: str, data: bytes):
        """原样复制输入配置的字节"""
        target = Path(self.out_dir) / SNAPSHOT_NAME
        target.write_bytes(data)
        self.config_source = source
        self.config_snapshot = SNAPSHOT_NAME
        self.artifacts['config_snapshot'] = SNAPSHOT_NAME

    def add(self, name: str, path: Union[str, Path], partial: bool = False):
        """登记产物（路径相对输出目录保存）"""
        path = Path(path)
        try:
            rel = str(path.relative_to(self.out_dir))
        except ValueError:
            rel = str(path)
        self.artifacts[name] = rel
        if partial and rel not in self.partial:
            self.partial.append(rel)
        elif not partial and rel in self.partial:
            self.partial.remove(rel)

    def add_checkpoint(self, name: str, path: Union[str, Path], partial: bool = False):
        """检查点连同 .yaml 结构描述一起登记"""
        path = Path(path)
        self.add(name, path, partial)
        self.add(f'{name}_descriptor', path.with_name(path.name + '.yaml'), partial)

    def mark_partial(self, names: List[str]):
        for name in names:
            rel = self.artifacts.get(name)
            if rel is not None and rel not in self.partial:
                self.partial.append(rel)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop('out_dir')
        return data

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True, allow_unicode=True), encoding='utf-8')
        setup_logger(self.__class__.__name__).debug(f"清单已写入 {self.path}")
