"""Kernel backend selection.

The compiled Cython core is used when importable; set ``UMARK_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

BACKEND = "python"

if os.environ.get("UMARK_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from umark._core import (  # noqa: F401
            conv3x3_backward,
            conv3x3_forward,
            maxpool2_backward,
            maxpool2_forward,
        )

        BACKEND = "cython"
    except ImportError:
        pass

if BACKEND == "python":
    from umark._core_py import (  # noqa: F401
        conv3x3_backward,
        conv3x3_forward,
        maxpool2_backward,
        maxpool2_forward,
    )
