from __future__ import annotations

from abc import ABC, abstractmethod
from typing import ClassVar

from fedgala.params import LayeredParams
from fedgala.typ import Matrix
from fedgala.utils.rng import RngStream


class AbstractEncoder(ABC):
    NAME: ClassVar[str] = "encoder"

    @abstractmethod
    def init_params(self, rng: RngStream) -> LayeredParams:
        """逐层 U(-1/sqrt(fan_in), +1/sqrt(fan_in)) 初始化。"""
        raise NotImplementedError

    @abstractmethod
    def embed(self, params: LayeredParams, x: Matrix) -> Matrix:
        """冻结参数下的表示, 供线性探针使用; shape (N, embedding_dim)。"""
        raise NotImplementedError

    @property
    @abstractmethod
    def feature_count(self) -> int:
        raise NotImplementedError
