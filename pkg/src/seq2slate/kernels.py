"""Backend selection for the forward/backward kernels.

The compiled extension is used when it imports; otherwise the numpy
implementation is used. Setting ``S2SL_PURE_PYTHON=1`` forces the numpy
backend. Both expose ``forward``, ``backward`` and the mode constants.
"""

import os

from . import _kernels_py

FORCED = _kernels_py.FORCED
GREEDY = _kernels_py.GREEDY
SAMPLE = _kernels_py.SAMPLE

python_backend = _kernels_py
compiled_backend = None

if os.environ.get("S2SL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels_c as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else _kernels_py
BACKEND = "compiled" if _active is compiled_backend else "python"


def use_backend(name):
    """Switch the active backend (``"compiled"`` or ``"python"``) and return the previous name."""
    global _active, BACKEND
    previous = BACKEND
    if name == "compiled":
        if compiled_backend is None:
            raise RuntimeError("compiled kernels are not available; build the extension first")
        _active = compiled_backend
    elif name == "python":
        _active = _kernels_py
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name
    return previous


def forward(*args, **kwargs):
    return _active.forward(*args, **kwargs)


def backward(*args, **kwargs):
    return _active.backward(*args, **kwargs)
