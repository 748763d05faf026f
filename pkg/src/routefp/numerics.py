"""Dense-matrix metric kernels and the deterministic RNG.

Everything here is a pure function on numpy arrays. Matrices are float64,
row-major. Probability vectors are 1-D arrays that are non-negative and sum
to 1 within 1e-9.
"""

from __future__ import annotations

import hashlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError

PROB_TOL = 1e-9


def _as_float_vector(v) -> np.ndarray:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise InvalidInputError(f"expected 1-D vector, got shape {a.shape}")
    return a


def check_prob_vector(p, tol: float = PROB_TOL) -> np.ndarray:
    """Validate that p is a probability vector; returns it as float64."""
    a = _as_float_vector(p)
    if a.size == 0:
        raise InvalidInputError("empty probability vector")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("non-finite entries in probability vector")
    if np.any(a < -tol):
        raise InvalidInputError("negative entries in probability vector")
    total = float(a.sum())
    if abs(total - 1.0) > tol:
        raise InvalidInputError(f"probability vector sums to {total}, not 1")
    return a


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax of a vector of scores.

    Shift-invariant (max subtracted before exponentiation) and
    order-preserving: the argmax of the input is the argmax of the output.
    """
    a = _as_float_vector(v)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("non-finite input to softmax")
    if not temperature > 0.0:
        raise InvalidInputError(f"temperature must be positive, got {temperature}")
    z = a / temperature
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def cosine_sim(u, v, return_flag: bool = False):
    """Cosine similarity <u,v>/(|u||v|) in [-1, 1].

    A zero-norm side yields 0.0 with the degenerate flag set (pruning can
    legally zero out a whole vector, so this is not an error).
    """
    a = _as_float_vector(u)
    b = _as_float_vector(v)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return (0.0, True) if return_flag else 0.0
    val = float(np.dot(a, b) / (na * nb))
    val = min(1.0, max(-1.0, val))
    return (val, False) if return_flag else val


def jsd2(p, q) -> float:
    """Jensen-Shannon divergence with base-2 logarithms, bounded in [0, 1].

    Symmetric, and 0 iff p == q. Disjoint supports give exactly 1.
    """
    a = check_prob_vector(p)
    b = check_prob_vector(q)
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch {a.shape} vs {b.shape}")
    m = 0.5 * (a + b)

    def kl2(x, y):
        mask = x > 0.0
        return float(np.sum(x[mask] * np.log2(x[mask] / y[mask])))

    val = 0.5 * kl2(a, m) + 0.5 * kl2(b, m)
    return min(1.0, max(0.0, val))


def linear_cka(x, y, return_flag: bool = False):
    """Linear centered kernel alignment between activation matrices.

    Rows are samples, columns features. Columns are mean-centered here, then
    CKA = |Y^T X|_F^2 / (|X^T X|_F * |Y^T Y|_F). Fewer than 2 rows or
    all-constant features are degenerate: value 0 with the flag set.
    """
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidInputError("linear_cka expects 2-D matrices")
    if a.shape[0] != b.shape[0]:
        raise InvalidInputError(f"row-count mismatch {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        return (0.0, True) if return_flag else 0.0
    a = a - a.mean(axis=0, keepdims=True)
    b = b - b.mean(axis=0, keepdims=True)
    xx = float(np.linalg.norm(a.T @ a))
    yy = float(np.linalg.norm(b.T @ b))
    if xx == 0.0 or yy == 0.0:
        return (0.0, True) if return_flag else 0.0
    xy = float(np.linalg.norm(b.T @ a))
    val = xy * xy / (xx * yy)
    val = min(1.0, max(0.0, val))
    return (val, False) if return_flag else val


def sgd_step(params, grads, lr: float):
    """One SGD update: param <- param - lr * grad, returned as new arrays.

    Accepts a mapping or a sequence of arrays; grads must mirror its
    structure and shapes exactly.
    """
    if isinstance(params, Mapping):
        if not isinstance(grads, Mapping) or set(params) != set(grads):
            raise InvalidInputError("grads keys do not match params keys")
        out = {}
        for k, p in params.items():
            p = np.asarray(p, dtype=np.float64)
            g = np.asarray(grads[k], dtype=np.float64)
            if p.shape != g.shape:
                raise InvalidInputError(f"shape mismatch for {k!r}: {p.shape} vs {g.shape}")
            out[k] = p - lr * g
        return out
    if isinstance(params, Sequence):
        if not isinstance(grads, Sequence) or len(params) != len(grads):
            raise InvalidInputError("grads length does not match params length")
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            p = np.asarray(p, dtype=np.float64)
            g = np.asarray(g, dtype=np.float64)
            if p.shape != g.shape:
                raise InvalidInputError(f"shape mismatch at {i}: {p.shape} vs {g.shape}")
            out.append(p - lr * g)
        return out
    raise InvalidInputError("params must be a mapping or a sequence of arrays")


def pairwise_sum(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Binary-tree summation along an axis.

    The reduction tree depends only on the length of the axis, so results are
    reproducible regardless of chunking or evaluation order.
    """
    a = np.asarray(a, dtype=np.float64)
    a = np.moveaxis(a, axis, 0)
    while a.shape[0] > 1:
        n = a.shape[0]
        half = n // 2
        folded = a[0 : 2 * half : 2] + a[1 : 2 * half : 2]
        if n % 2:
            folded = np.concatenate([folded, a[-1:]], axis=0)
        a = folded
    return a[0]


def pairwise_mean(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean via the deterministic pairwise summation tree."""
    n = np.asarray(a).shape[axis]
    if n == 0:
        raise InvalidInputError("cannot average an empty axis")
    return pairwise_sum(a, axis=axis) / n


_SEED_MASK = (1 << 128) - 1


@dataclass(frozen=True)
class Rng:
    """Splittable counter-based generator (Philox) with derived child streams.

    Identical seeds produce identical streams. `split` derives an independent
    child from a string label via SHA-256, so every consumer of randomness in
    the toolkit is keyed by an explicit, stable name.
    """

    seed: int

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.seed & _SEED_MASK))

    def split(self, label: str) -> "Rng":
        h = hashlib.sha256(f"{self.seed}:{label}".encode("utf-8")).digest()
        return Rng(int.from_bytes(h[:16], "big"))

    def child_seed(self, label: str) -> int:
        return self.split(label).seed
