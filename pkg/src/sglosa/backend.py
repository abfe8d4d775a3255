"""Kernel selection: the compiled ``_core`` extension when importable, else
the numpy fallback. Set ``SGLOSA_PURE_PYTHON=1`` to force the fallback."""

import os

from . import _fallback

BACKEND = "python"
if os.environ.get("SGLOSA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl
        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _fallback
else:
    _impl = _fallback

NO_CONTROL = _fallback.NO_CONTROL

escape_scalar = _impl.escape_scalar
escape_batch = _impl.escape_batch
stage_sweep = _impl.stage_sweep
ddp_backward = _impl.ddp_backward
ddp_forward = _impl.ddp_forward
escape_fits = _impl.escape_fits
expected_cost = _impl.expected_cost
ddp_solve = _impl.ddp_solve
two_segment_search = _impl.two_segment_search
track_speed = _impl.track_speed


def implementation(name):
    """Return the kernel module named ``"compiled"`` or ``"python"``."""
    if name == "python":
        return _fallback
    if name == "compiled":
        from . import _core
        return _core
    raise ValueError(f"unknown backend {name!r}")
