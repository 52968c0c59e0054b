"""Kernel backend selection.

The hot inner loops (per-step MLP evaluation inside SDE rollouts and the
per-step log-density backward pass) run through ``forward``/``backward``
from either the compiled Cython extension or the numpy fallback.  The
choice is made once at import time:

* ``FLOWSTAGE_KERNELS=cy``  require the compiled backend, fail if absent
* ``FLOWSTAGE_KERNELS=py``  force the pure-Python backend
* unset or ``auto``         compiled if available, else pure Python

Both backends compute the same arithmetic; floating-point results may
differ at rounding level because of summation order, so a fixed seed is
bit-reproducible per backend, not across backends.
"""

from __future__ import annotations

import os

_choice = os.environ.get("FLOWSTAGE_KERNELS", "auto").lower()

if _choice not in ("auto", "py", "cy"):
    raise ImportError(f"FLOWSTAGE_KERNELS must be 'auto', 'py' or 'cy', got {_choice!r}")

if _choice == "py":
    from . import _mlp_np as _impl
elif _choice == "cy":
    from . import _mlp_cy as _impl  # type: ignore[no-redef]
else:
    try:
        from . import _mlp_cy as _impl  # type: ignore[no-redef]
    except ImportError:
        from . import _mlp_np as _impl

BACKEND: str = _impl.BACKEND
forward = _impl.forward
backward = _impl.backward
