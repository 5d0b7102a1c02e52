"""Hot loops over network weight packs, compiled when available.

The Cython extension ``_compiled`` is used if it imports; otherwise the
numpy implementations in ``_fallback`` are used. Set ``CONVEXMENU_PURE=1``
to force the fallback.
"""
import os

from ._fallback import TIE_TOL, ascend, pack_size, reflect_unit, unpack
from . import _fallback as fallback

compiled = None
if os.environ.get("CONVEXMENU_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _compiled as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else fallback
BACKEND = "compiled" if compiled is not None else "numpy"

value_and_xgrad = _impl.value_and_xgrad
best_response = _impl.best_response
langevin = _impl.langevin

__all__ = [
    "BACKEND",
    "TIE_TOL",
    "ascend",
    "best_response",
    "compiled",
    "fallback",
    "langevin",
    "pack_size",
    "reflect_unit",
    "unpack",
    "value_and_xgrad",
]
