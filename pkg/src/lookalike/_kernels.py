"""Pick the compiled IVF kernels when built, numpy otherwise.

Set ``LOOKALIKE_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _ivf_py

if os.environ.get("LOOKALIKE_PURE_PYTHON", "") not in ("", "0"):
    _core = None
else:
    try:
        from . import _ivf_core as _core
    except ImportError:
        _core = None

BACKEND = "cython" if _core is not None else "python"
scan_topk_batch = _core.scan_topk_batch if _core is not None else _ivf_py.scan_topk_batch
