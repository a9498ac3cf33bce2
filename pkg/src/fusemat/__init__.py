"""fusemat: lazy dense linear algebra with fused, generated element-wise kernels.

Arithmetic on matrices builds expression trees; assignment plans the work,
fuses all element-wise operations into one generated kernel per plan step,
and launches through a per-context kernel cache.
"""

from .errors import (
    BackendError,
    FusematError,
    GenerationError,
    KernelCompileError,
    OutOfBoundsError,
    PlanError,
    SchemaError,
    ShapeError,
)
from .expr import ElemType, MatShape
from .matrix import (
    Context,
    Mat,
    MatExpr,
    accu,
    conv_to,
    default_context,
    exp,
    fill,
    from_array,
    load_matrix,
    log,
    ones,
    pow_int,
    randi,
    randu,
    save_matrix,
    sqrt,
    sync,
    tanh,
    zeros,
)

__version__ = "0.1.0"

__all__ = [
    "BackendError",
    "Context",
    "ElemType",
    "FusematError",
    "GenerationError",
    "KernelCompileError",
    "Mat",
    "MatExpr",
    "MatShape",
    "OutOfBoundsError",
    "PlanError",
    "SchemaError",
    "ShapeError",
    "__version__",
    "accu",
    "conv_to",
    "default_context",
    "exp",
    "fill",
    "from_array",
    "load_matrix",
    "log",
    "ones",
    "pow_int",
    "randi",
    "randu",
    "save_matrix",
    "sqrt",
    "sync",
    "tanh",
    "zeros",
]
