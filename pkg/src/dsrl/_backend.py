"""Kernel backend selection.

The compiled ``_core`` extension is used when it imports; setting
``DSRL_PURE_PYTHON=1`` forces the numpy fallback.
"""

from __future__ import annotations

import os

from . import _core_py

if os.environ.get("DSRL_PURE_PYTHON", "").strip() not in ("", "0"):
    kernels = _core_py
    NAME = "python"
else:
    try:
        from . import _core as kernels  # type: ignore[no-redef]

        NAME = "cython"
    except ImportError:
        kernels = _core_py
        NAME = "python"

lu_solve = kernels.lu_solve
solve_qp_dense = kernels.solve_qp_dense

__all__ = ["NAME", "kernels", "lu_solve", "solve_qp_dense"]
