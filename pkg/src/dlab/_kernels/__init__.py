"""Batched MLP kernels with two interchangeable backends.

``numpy_backend`` is the pure-Python reference; ``_fast`` is the compiled
(Cython) version of the same two entry points. The compiled one is selected
at import when available; set ``DLAB_BACKEND=python`` or ``compiled`` to
force a choice. Both expose::

    mlp_forward(...)  -> (Z, cache)
    mlp_backward(...) -> parameter gradients

with identical argument lists and cache layouts (see numpy_backend).
"""

import os

from . import numpy_backend

_requested = os.environ.get("DLAB_BACKEND", "").strip().lower()

if _requested in ("python", "numpy"):
    impl = numpy_backend
    BACKEND_NAME = "python"
else:
    try:
        from . import _fast as impl  # type: ignore[no-redef]

        if not hasattr(impl, "mlp_forward"):
            raise ImportError("compiled kernel module is incomplete")
        BACKEND_NAME = "compiled"
    except ImportError:
        if _requested == "compiled":
            raise
        impl = numpy_backend
        BACKEND_NAME = "python"

mlp_forward = impl.mlp_forward
mlp_backward = impl.mlp_backward


def backend_name() -> str:
    return BACKEND_NAME
