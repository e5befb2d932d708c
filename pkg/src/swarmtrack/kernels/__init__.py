"""Backend dispatch for the Q-network kernels.

The SWARMTRACK_BACKEND environment variable picks the implementation at
import time:

  auto   use the jit backend if numba imports and compiles, else numpy
  numba  require the jit backend, raise if unavailable
  numpy  force the plain numpy reference backend

Both backends expose the same two functions; everything above this layer
is backend-agnostic.
"""

import os

from . import numpy_backend

_CHOICES = ("auto", "numba", "numpy")
_requested = os.environ.get("SWARMTRACK_BACKEND", "auto").lower()
if _requested not in _CHOICES:
    raise ValueError(
        f"SWARMTRACK_BACKEND={_requested!r} not one of {_CHOICES}"
    )

BACKEND = "numpy"
_impl = numpy_backend
if _requested in ("auto", "numba"):
    try:
        from . import numba_backend as _jit
        _impl = _jit
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise

qvalues_batch = _impl.qvalues_batch
grad_batch = _impl.grad_batch
