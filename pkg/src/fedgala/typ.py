from __future__ import annotations

from typing import Annotated

import numpy as np
from numpy.typing import NDArray
from typing_extensions import TypeAlias

RealVec: TypeAlias = Annotated[NDArray[np.float64], "Shape[*,]"]
Matrix: TypeAlias = Annotated[NDArray[np.float64], "Shape[*, *]"]
IndexVec: TypeAlias = Annotated[NDArray[np.int64], "Shape[*,]"]
