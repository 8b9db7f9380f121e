"""Kernel backend selection.

Imports the compiled extension when it is installed, otherwise the numpy
fallback. ATTNAGREE_BACKEND=python|compiled forces the choice; forcing
"compiled" without a built extension is an error rather than a silent
downgrade.
"""

import os

from . import _kernels_py

_requested = os.environ.get("ATTNAGREE_BACKEND", "").strip().lower()
if _requested not in ("", "compiled", "python"):
    raise RuntimeError(
        f"ATTNAGREE_BACKEND must be 'compiled' or 'python', got {_requested!r}"
    )

if _requested == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]
    except ImportError:
        if _requested == "compiled":
            raise RuntimeError(
                "ATTNAGREE_BACKEND=compiled but the kernel extension is not built; "
                "reinstall with a C toolchain or unset the variable"
            ) from None
        _impl = _kernels_py

BACKEND_NAME = "compiled" if _impl is not _kernels_py else "python"

layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
adam_update = _impl.adam_update
trilinear_resample = _impl.trilinear_resample
