#!/usr/bin/env python3
"""
对齐分析模块
把对齐报告按目标网格的低/中/高三段拆分偏差，生成可读的汇总表
"""
from typing import Dict, List

import numpy as np
import pandas as pd

from config import setup_logger

BAND_NAMES = ('low', 'middle', 'high')


class AlignmentAnalyzer:
    """对齐报告分析器"""

    def __init__(self, report):
        self.report = report
        self.logger = setup_logger(self.__class__.__name__)

    def _prepare_data(self) -> pd.DataFrame:
        r = self.report
        df = pd.DataFrame({
            'target': r.targets,
            'mean': r.means,
            'std': r.stds,
            'count': r.counts,
        })
        df['deviation'] = df['mean'] - df['target']
        return df

    def bands(self) -> Dict[str, float]:
        """
        各段的平均平方偏差

        目标网格按顺序三等分（np.array_split），目标数不足3时空段记为 NaN。

        Returns:
            Dict[str, float]: low/middle/high -> 平均平方偏差
        """
        df = self._prepare_data()
        squared = (df['deviation'] ** 2).to_numpy()
        result = {}
        for name, index in zip(BAND_NAMES, np.array_split(np.arange(len(df)), 3)):
            result[name] = float(squared[index].mean()) if index.size else float('nan')
        return result

    def excess_over(self, baseline: 'AlignmentAnalyzer') -> Dict[str, float]:
        """本报告相对基线在各段的平方偏差增量（两份报告须用同一目标网格）"""
        if not np.array_equal(self.report.targets, baseline.report.targets):
            raise ValueError("两份报告的目标网格不同，无法逐段比较")
        mine, theirs = self.bands(), baseline.bands()
        return {name: mine[name] - theirs[name] for name in BAND_NAMES}

    def concentrated_in(self, baseline: 'AlignmentAnalyzer') -> str:
        """增量最大的段"""
        excess = self.excess_over(baseline)
        finite = {k: v for k, v in excess.items() if np.isfinite(v)}
        return max(finite, key=finite.get)

    def render_table(self) -> str:
        """对齐的文本汇总：逐目标表 + 分段偏差 + M"""
        df = self._prepare_data()
        r = self.report
        lines: List[str] = [
            "=" * 70,
            "对齐评估报告",
            f"环境: {r.env_id or '-'}    种子: {', '.join(str(s) for s in r.seeds) or '-'}",
            "=" * 70,
            "",
            df.to_string(index=False, float_format=lambda v: f"{v:.6g}"),
            "",
            "【分段平均平方偏差】",
        ]
        for name, value in self.bands().items():
            lines.append(f"  {name:<7} {value:.6g}")
        lines += ["", f"M = {r.m:.17g}", ""]
        return "\n".join(lines)
