"""Compiled-kernel backend: generated C sources built with the system compiler.

This is the optional "device" backend.  Buffers live in host memory, but the
execution path is real: every fused kernel is the generated source compiled to
a shared object and launched over its 2-D index space.  `-fwrapv` keeps signed
integer overflow modular, matching the reference interpreter.
"""

from __future__ import annotations

import ctypes
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backend import BufferHandle, Capabilities, HostBufferBackend
from .codegen import ArgSpec, KernelSource
from .errors import BackendError, KernelCompileError, SchemaError
from .expr import ElemType

_C_SCALAR_TYPES = {
    "f32": ctypes.c_float,
    "f64": ctypes.c_double,
    "u32": ctypes.c_uint32,
    "i32": ctypes.c_int32,
}

_GEMM_TEMPLATE = """\
void {name}({ctype} *c,
            const long long m, const long long k, const long long n,
            const {ctype} *a, const {ctype} *b)
  {{
  for (long long j = 0; j < n; ++j)
    {{
    for (long long i = 0; i < m; ++i)
      {{
      double acc = 0.0;
      for (long long p = 0; p < k; ++p)
        {{
        acc += (double)a[i + p * m] * (double)b[p + j * k];
        }}
      c[i + j * m] = ({ctype})acc;
      }}
    }}
  }}
"""


def find_compiler() -> str | None:
    for name in ("cc", "gcc", "clang"):
        path = shutil.which(name)
        if path:
            return path
    return None


@dataclass
class CompiledKernel:
    entry_point: str
    schema: tuple[ArgSpec, ...]
    fn: object          # ctypes function
    library: object     # keep the CDLL alive


class CJitBackend(HostBufferBackend):
    """Backend that really compiles and runs generated kernel source."""

    def __init__(self, compiler: str | None = None):
        super().__init__()
        self.compiler = compiler or find_compiler()
        if self.compiler is None:
            raise BackendError("no C compiler found; the device backend is unavailable")
        self._workdir = Path(tempfile.mkdtemp(prefix="fusemat_cjit_"))
        self._gemms: dict[ElemType, CompiledKernel] = {}
        self._n_compiled = 0

    @classmethod
    def available(cls) -> bool:
        return find_compiler() is not None

    @property
    def capabilities(self) -> Capabilities:
        return Capabilities(name="cjit", compiles_source=True)

    def close(self) -> None:
        shutil.rmtree(self._workdir, ignore_errors=True)

    # -- compilation ------------------------------------------------------

    def _build(self, name: str, text: str) -> ctypes.CDLL:
        # Unique filenames: dlopen caches by path, so never reuse one.
        stem = f"{name}_{self._n_compiled}"
        self._n_compiled += 1
        src = self._workdir / f"{stem}.c"
        lib = self._workdir / f"{stem}.so"
        src.write_text(text)
        cmd = [self.compiler, "-O2", "-fPIC", "-fwrapv", "-shared",
               str(src), "-o", str(lib), "-lm"]
        result = subprocess.run(cmd, capture_output=True, text=True)
        if result.returncode != 0:
            excerpt = "\n".join(text.splitlines()[:12])
            raise KernelCompileError(
                f"kernel {name} failed to compile:\n{result.stderr.strip()}\n"
                f"--- source excerpt ---\n{excerpt}"
            )
        return ctypes.CDLL(str(lib))

    def compile(self, source: KernelSource) -> CompiledKernel:
        if source.dialect != "c":
            raise KernelCompileError(f"cjit backend cannot compile dialect {source.dialect!r}")
        library = self._build(source.entry_point, source.text)
        fn = getattr(library, source.entry_point)
        fn.restype = None
        fn.argtypes = [self._argtype(spec) for spec in source.schema]
        return CompiledKernel(source.entry_point, source.schema, fn, library)

    @staticmethod
    def _argtype(spec: ArgSpec):
        if spec.role in ("out", "in"):
            return ctypes.POINTER(_C_SCALAR_TYPES[spec.etype])
        if spec.role in ("dim", "off"):
            return ctypes.c_longlong
        return _C_SCALAR_TYPES[spec.etype]

    # -- launches -----------------------------------------------------------

    def launch(self, kernel: CompiledKernel, args: list, geometry: tuple[int, int]) -> None:
        schema = kernel.schema
        if len(args) != len(schema):
            raise SchemaError(f"expected {len(schema)} arguments, got {len(args)}")
        if tuple(geometry) != (int(args[1]), int(args[2])):
            raise SchemaError(f"geometry {geometry} != domain dims {(args[1], args[2])}")
        cargs = []
        for spec, value in zip(schema, args):
            if spec.role in ("out", "in"):
                if not isinstance(value, BufferHandle):
                    raise SchemaError("buffer argument must be a handle")
                if value.etype.value != spec.etype:
                    raise SchemaError(
                        f"buffer is {value.etype.value}, schema wants {spec.etype}"
                    )
                arr = self._array(value)
                cargs.append(arr.ctypes.data_as(ctypes.POINTER(_C_SCALAR_TYPES[spec.etype])))
            elif spec.role in ("dim", "off"):
                cargs.append(ctypes.c_longlong(int(value)))
            else:
                ctype = _C_SCALAR_TYPES[spec.etype]
                cargs.append(ctype(float(value) if spec.etype in ("f32", "f64") else int(value)))
        kernel.fn(*cargs)

    # -- linear algebra --------------------------------------------------------

    def _gemm(self, etype: ElemType) -> CompiledKernel:
        kernel = self._gemms.get(etype)
        if kernel is None:
            name = f"gemm_{etype.value}"
            library = self._build(name, _GEMM_TEMPLATE.format(name=name, ctype=etype.c_name))
            fn = getattr(library, name)
            fn.restype = None
            ptr = ctypes.POINTER(_C_SCALAR_TYPES[etype.value])
            fn.argtypes = [ptr, ctypes.c_longlong, ctypes.c_longlong, ctypes.c_longlong, ptr, ptr]
            kernel = CompiledKernel(name, (), fn, library)
            self._gemms[etype] = kernel
        return kernel

    def matmul(self, out: BufferHandle, left: BufferHandle, right: BufferHandle,
               m: int, k: int, n: int, etype: ElemType) -> None:
        if not etype.is_float:
            raise BackendError("matmul supports float element types only")
        kernel = self._gemm(etype)
        ptr = ctypes.POINTER(_C_SCALAR_TYPES[etype.value])
        kernel.fn(
            self._array(out).ctypes.data_as(ptr),
            ctypes.c_longlong(m), ctypes.c_longlong(k), ctypes.c_longlong(n),
            self._array(left).ctypes.data_as(ptr),
            self._array(right).ctypes.data_as(ptr),
        )

    # -- measurement -------------------------------------------------------------

    def measure_copy_bandwidth(self, n_elem: int, etype: ElemType = ElemType.f32,
                               trials: int = 5) -> float:
        """Effective GB/s of a compiled whole-buffer copy kernel (read + write)."""
        from .codegen import generate_kernel_source
        from .expr import Leaf, MatShape

        shape = MatShape(n_elem, 1)
        src_handle = self.alloc(etype, n_elem)
        dst_handle = self.alloc(etype, n_elem)
        self.upload(np.arange(n_elem, dtype=etype.dtype) % 1024, src_handle)
        node = Leaf(0, etype, shape)
        kernel = self.compile(generate_kernel_source(node))
        args = [dst_handle, n_elem, 1, src_handle, n_elem, 1]
        best = 0.0
        for _ in range(trials):
            start = time.perf_counter()
            self.launch(kernel, args, (n_elem, 1))
            self.synchronize()
            elapsed = time.perf_counter() - start
            best = max(best, 2 * n_elem * etype.width / elapsed / 1e9)
        self.free(src_handle)
        self.free(dst_handle)
        return best
