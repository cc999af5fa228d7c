"""
errors.py

项目内统一的异常层级。所有异常都继承 :class:`FedGaLAError`,
同时继承最贴近语义的内建异常, 方便调用方按内建类型捕获。
"""

from __future__ import annotations


class FedGaLAError(Exception):
    pass


class DimensionError(FedGaLAError, ValueError):
    """向量长度 / 矩阵形状 / 层结构不匹配。"""


class EmptyRequestError(FedGaLAError, ValueError):
    """请求了 0 个样本。"""


class DivergenceError(FedGaLAError, ArithmeticError):
    """互信息发散 (|cov| >= 1)。"""


class BatchTooSmallError(FedGaLAError, ValueError):
    """对比损失至少需要一个负样本。"""


class PreconditionError(FedGaLAError, ValueError):
    """理论检查的前置条件不成立。"""


class DegenerateSplitError(FedGaLAError, RuntimeError):
    """线性探针的有标签划分只含一个类别。"""


class NonFiniteError(FedGaLAError, FloatingPointError):
    """训练过程中出现 NaN / Inf。"""


class ConfigError(FedGaLAError, ValueError):
    """配置文件无法解析或含有未知键。"""
