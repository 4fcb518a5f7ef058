"""Backend selection for the hot kernels.

The compiled extension is used when it imports cleanly; set
``MASKDIFF_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from maskdiff import _pykernels

python_backend = _pykernels
compiled_backend = None

if os.environ.get("MASKDIFF_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from maskdiff import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_impl = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if _impl is compiled_backend else "python"

cond_mi = _impl.cond_mi
expected_kl = _impl.expected_kl
monotone_path = _impl.monotone_path
chain_joint = _impl.chain_joint
top_p_rows = _impl.top_p_rows


def available_backends():
    out = {"python": python_backend}
    if compiled_backend is not None:
        out["cython"] = compiled_backend
    return out
