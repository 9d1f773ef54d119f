"""Hot kernels with a compiled backend and a numpy fallback.

The compiled extension (``_ckernels``) is used when it imports; setting
``OCTOMO_PURE_PYTHON=1`` forces the numpy implementations. ``BACKEND`` names
the active one. Both share signatures, so callers never branch.
"""

import os

from . import _pykernels

python = _pykernels

try:
    if os.environ.get("OCTOMO_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python backend forced")
    from . import _ckernels as compiled
except ImportError:
    compiled = None

_impl = compiled if compiled is not None else _pykernels
BACKEND = "cython" if compiled is not None else "python"

traverse = _impl.traverse
gather = _impl.gather
scatter = _impl.scatter
gather_vjp_local = _impl.gather_vjp_local
march = _impl.march
march_adjoint = _impl.march_adjoint
silu_forward = _impl.silu_forward
silu_backward = _impl.silu_backward
tv_grid = _impl.tv_grid
adam_update = _impl.adam_update


def backends():
    """Available backend modules by name (the fallback is always present)."""
    out = {"python": _pykernels}
    if compiled is not None:
        out["cython"] = compiled
    return out
