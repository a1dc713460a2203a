"""Select the compiled kernels when available, else the numpy fallback.

Set ``TFCZSL_BACKEND=python`` to force the fallback (used by the benchmark
and by the parity tests).
"""

import logging
import os

from . import _pykernels

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("TFCZSL_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("compiled kernels unavailable, using numpy fallback")
        _compiled = None

kernels = _compiled if _compiled is not None else _pykernels
NAME = "cython" if _compiled is not None else "python"


def compiled_kernels():
    """The compiled module if it was built (ignores ``TFCZSL_BACKEND``), else ``None``."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
