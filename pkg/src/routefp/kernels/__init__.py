"""Backend selection for the hot compute kernels.

The numba backend is the default when importable; set ROUTEFP_BACKEND=numpy
(or numba) before import to force a path, or call `set_backend` at runtime.
Both backends share signatures and array layouts; see `numpy_ops` for the
layout contract.
"""

from __future__ import annotations

import os

from ..errors import InvalidConfigError
from . import numpy_ops

_BACKENDS = {"numpy": numpy_ops}

try:
    from . import numba_ops

    _BACKENDS["numba"] = numba_ops
except ImportError:  # pragma: no cover - numba is an install-time choice
    numba_ops = None

_env = os.environ.get("ROUTEFP_BACKEND", "").strip().lower()
if _env and _env not in _BACKENDS:
    raise InvalidConfigError(
        f"ROUTEFP_BACKEND={_env!r} not available; choose from {sorted(_BACKENDS)}"
    )
_active = _BACKENDS[_env] if _env else _BACKENDS.get("numba", numpy_ops)


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def get_backend() -> str:
    return _active.NAME


def set_backend(name: str) -> None:
    global _active
    if name not in _BACKENDS:
        raise InvalidConfigError(f"unknown backend {name!r}; choose from {sorted(_BACKENDS)}")
    _active = _BACKENDS[name]


def toy_forward(proj, aW, ab, W1, b1, W2, b2, X):
    return _active.toy_forward(proj, aW, ab, W1, b1, W2, b2, X)


def toy_backward(aW, W1, W2, xin, h_all, act, gout):
    return _active.toy_backward(aW, W1, W2, xin, h_all, act, gout)


def moe_forward(proj, aW, ab, W1, b1, W2, b2, bW1, bb1, bW2, bb2, rW, rb, tau, X):
    return _active.moe_forward(proj, aW, ab, W1, b1, W2, b2, bW1, bb1, bW2, bb2, rW, rb, tau, X)


def warmup() -> None:
    """Trigger JIT compilation of the active backend on tiny inputs."""
    import numpy as np

    L, d, dh, E, d_in = 1, 2, 3, 2, 2
    proj = np.eye(d, d_in)
    aW = np.zeros((L, d, d))
    ab = np.zeros((L, d))
    W1 = np.zeros((L, dh, d))
    b1 = np.zeros((L, dh))
    W2 = np.zeros((L, d, dh))
    b2 = np.zeros((L, d))
    X = np.zeros((1, d_in))
    out, xin, h, act = toy_forward(proj, aW, ab, W1, b1, W2, b2, X)
    toy_backward(aW, W1, W2, xin, h, act, out)
    bW1 = np.zeros((L, E, dh, d))
    bb1 = np.zeros((L, E, dh))
    bW2 = np.zeros((L, E, d, dh))
    bb2 = np.zeros((L, E, d))
    rW = np.zeros((L, E, d))
    rb = np.zeros((L, E))
    moe_forward(proj, aW, ab, W1, b1, W2, b2, bW1, bb1, bW2, bb2, rW, rb, 1.0, X)
