#!/usr/bin/env python3
"""
CSV导出模块
训练指标日志与对齐报告的逗号分隔格式读写
"""
from pathlib import Path
from typing import Dict, Sequence, Union

import pandas as pd

from config import setup_logger

METRICS_HEADER = ('epoch', 'step', 'l_sl', 'l_align', 'l_q', 'indicator_rate',
                  'actor_grad_norm', 'critic_grad_norm')
REPORT_HEADER = ('target', 'mean', 'std', 'count')
FLOAT_FORMAT = '%.17g'


class MetricsLogger:
    """每个epoch追加一行的指标日志，表头固定"""

    def __init__(self, path: Union[str, Path], columns: Sequence[str] = METRICS_HEADER):
        self.path = Path(path)
        self.columns = list(columns)
        self.logger = setup_logger(self.__class__.__name__)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text(','.join(self.columns) + '\n', encoding='utf-8')
        self.rows = 0

    def append(self, row: Dict[str, float]):
        """
        追加一行

        Args:
            row: 必须恰好包含全部表头列
        """
        missing = set(self.columns) - set(row)
        if missing:
            raise KeyError(f"指标行缺少列: {sorted(missing)}")
        df = pd.DataFrame([row], columns=self.columns)
        df.to_csv(self.path, mode='a', header=False, index=False,
                  float_format=FLOAT_FORMAT, lineterminator='\n')
        self.rows += 1
        self.logger.debug(f"指标第 {self.rows} 行已写入 {self.path}")


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path, float_precision='round_trip')


def write_report_rows(report, path: Union[str, Path]):
    """每个目标一行: target,mean,std,count"""
    df = pd.DataFrame({
        'target': report.targets,
        'mean': report.means,
        'std': report.stds,
        'count': report.counts,
    }, columns=list(REPORT_HEADER))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')


def read_report_rows(path: Union[str, Path]) -> pd.DataFrame:
    df = pd.read_csv(path, float_precision='round_trip')
    if tuple(df.columns) != REPORT_HEADER:
        raise ValueError(f"报告表头不符: {list(df.columns)}（期望 {list(REPORT_HEADER)}）")
    return df


STUDY_HEADER = ('study', 'variant', 'seed', 'm', 'high_target', 'high_mean', 'band_low', 'band_middle', 'band_high')


def write_study_rows(rows: Sequence[Dict], path: Union[str, Path]):
    """对照实验每个 (变体, 种子) 一行"""
    df = pd.DataFrame(list(rows), columns=list(STUDY_HEADER))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator='\n')


def read_study_rows(path: Union[str, Path]) -> pd.DataFrame:
    df = pd.read_csv(path, float_precision='round_trip')
    if tuple(df.columns) != STUDY_HEADER:
        raise ValueError(f"对照表头不符: {list(df.columns)}（期望 {list(STUDY_HEADER)}）")
    return df
