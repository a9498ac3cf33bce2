"""Exception hierarchy shared across the library."""


class FusematError(Exception):
    """Base class for all library errors."""


class ShapeError(FusematError):
    """Operands do not conform (shapes or element types incompatible)."""


class OutOfBoundsError(FusematError):
    """An index or view region falls outside its parent."""


class GenerationError(FusematError):
    """Kernel source generation failed (e.g. unresolved placeholder)."""


class PlanError(FusematError):
    """Internal planning invariant violated (e.g. fusion barrier not split)."""


class BackendError(FusematError):
    """Device/backend operation failed."""


class KernelCompileError(BackendError):
    """Kernel source did not compile; message carries a source excerpt."""


class SchemaError(BackendError):
    """Launch arguments do not match the kernel's argument schema."""
