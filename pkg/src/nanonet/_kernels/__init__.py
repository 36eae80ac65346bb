"""Kernel backend selection.

Imports the compiled core when it has been built, otherwise the numpy
fallback. Set NANONET_PURE=1 to force the fallback regardless.
"""

import os

if os.environ.get("NANONET_PURE"):
    from . import fallback as _impl
else:
    try:
        from . import _core as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import fallback as _impl

BACKEND = _impl.BACKEND_NAME

softmax_rows_fwd = _impl.softmax_rows_fwd
softmax_rows_bwd = _impl.softmax_rows_bwd
masked_softmax_fwd = _impl.masked_softmax_fwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
rope_fwd = _impl.rope_fwd
build_mask = _impl.build_mask
