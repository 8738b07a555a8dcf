"""Backend selection for the hot kernels.

Imports the compiled extension (gradleak._core) when it is available and
falls back to the pure-NumPy versions otherwise.  Set GRADLEAK_PURE=1 to
force the fallback, e.g. to benchmark one against the other.
"""

import os

if os.environ.get("GRADLEAK_PURE", "0") not in ("", "0"):
    from gradleak import _pure as backend
    COMPILED = False
else:
    try:
        from gradleak import _core as backend  # type: ignore[no-redef]
        COMPILED = True
    except ImportError:
        from gradleak import _pure as backend  # type: ignore[no-redef]
        COMPILED = False

weight_circulant_fill = backend.weight_circulant_fill
gradient_circulant_fill = backend.gradient_circulant_fill
tv_chambolle = backend.tv_chambolle
