"""Allocator kernel selection.

The compiled extension is used when it was built; otherwise, or when
``ZEROCAST_PURE_PYTHON=1`` is set, the pure-Python kernel is used. Both
expose the same ``AllocatorCore`` class.
"""

import os

from . import _alloc_py

IMPLEMENTATIONS = {"python": _alloc_py.AllocatorCore}

try:
    from . import _alloc_ext
except ImportError:
    _alloc_ext = None
else:
    IMPLEMENTATIONS["compiled"] = _alloc_ext.AllocatorCore

if _alloc_ext is not None and os.environ.get("ZEROCAST_PURE_PYTHON") != "1":
    IMPLEMENTATION = "compiled"
else:
    IMPLEMENTATION = "python"

AllocatorCore = IMPLEMENTATIONS[IMPLEMENTATION]

__all__ = ["AllocatorCore", "IMPLEMENTATION", "IMPLEMENTATIONS"]
