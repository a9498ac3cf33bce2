import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fusemat.backend import RefBackend
from fusemat.expr import ElemType, ExprNode
from fusemat.plan import plan


@pytest.fixture
def backend():
    return RefBackend()


def upload_env(backend, env: dict[int, np.ndarray], etype: ElemType):
    """Allocate and fill backend buffers for a {mat_id: 2-D array} environment."""
    handles = {}
    for mat_id, arr in env.items():
        dtype_etype = _etype_of(arr.dtype)
        handle = backend.alloc(dtype_etype, arr.size)
        backend.upload(arr, handle)
        handles[mat_id] = handle
    return handles


def _etype_of(dtype) -> ElemType:
    return {
        np.dtype(np.float32): ElemType.f32,
        np.dtype(np.float64): ElemType.f64,
        np.dtype(np.uint32): ElemType.u32,
        np.dtype(np.int32): ElemType.i32,
    }[np.dtype(dtype)]


def run_fused_plan(backend, node: ExprNode, env: dict[int, np.ndarray]) -> np.ndarray:
    """Plan node into a fresh output and execute on the backend; returns 2-D."""
    out_id = max(env, default=0) + 1000
    pl = plan(out_id, node)
    handles = upload_env(backend, env, node.etype)
    handles[out_id] = backend.alloc(node.etype, node.shape.n_elem)
    for temp in pl.temps:
        handles[temp.temp_id] = backend.alloc(temp.etype, temp.shape.n_elem)
    backend.ref_execute(pl, handles)
    flat = backend.download(handles[pl.out_id])
    return flat.reshape((node.shape.n_rows, node.shape.n_cols), order="F")
