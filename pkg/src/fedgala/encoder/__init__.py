from .abc import AbstractEncoder
from .mlp import MLPEncoder
from .one_layer import OneLayerEncoder

__all__ = ["AbstractEncoder", "MLPEncoder", "OneLayerEncoder"]
