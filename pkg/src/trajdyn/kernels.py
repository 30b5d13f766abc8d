"""Backend selection for the hot simulation kernels.

The compiled extension is used when it imports cleanly; otherwise, or when
``TRAJDYN_PURE_PYTHON=1`` is set, the numpy fallback is used. ``BACKEND``
names the active choice.
"""
import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("TRAJDYN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

cartpole_step_batch = _active.cartpole_step_batch
cartpole_linear_rollout_batch = _active.cartpole_linear_rollout_batch
arm_step_batch = _active.arm_step_batch
relabel_index = _active.relabel_index

__all__ = [
    "BACKEND",
    "arm_step_batch",
    "cartpole_linear_rollout_batch",
    "cartpole_step_batch",
    "compiled_backend",
    "python_backend",
    "relabel_index",
]
