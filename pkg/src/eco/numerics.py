"""Core tensor arithmetic, seeded randomness, and the finite-difference oracle.

Everything downstream (encoder, ensemble, classifier, trainer) is built on the
handful of primitives in this module. All functions are pure; arrays are never
mutated in place. Default working precision is float32; gradient checking runs
in float64 so rounding noise does not mask backward-pass bugs.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

SINGLE = np.float32
DOUBLE = np.float64


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-D arrays with an explicit shape check."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}"
        )
    return a @ b


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability."""
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(
    x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float
) -> np.ndarray:
    """Layer normalization over the last axis with biased (divide-by-n) variance."""
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    return gain * (x - mean) / np.sqrt(var + eps) + bias


def quick_gelu(x: np.ndarray) -> np.ndarray:
    """x * sigmoid(1.702 x), the activation used by CLIP-family checkpoints."""
    return x * _sigmoid(np.asarray(1.702, dtype=x.dtype) * x)


def quick_gelu_grad(x: np.ndarray) -> np.ndarray:
    """Elementwise derivative of quick_gelu at x."""
    a = np.asarray(1.702, dtype=x.dtype)
    s = _sigmoid(a * x)
    return s + x * a * s * (1.0 - s)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class OracleError(RuntimeError):
    """Raised when the finite-difference oracle hits a non-finite evaluation."""


def finite_difference_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3
) -> np.ndarray:
    """Central-difference gradient of a scalar function, in double precision.

    g[i] = (f(x + h e_i) - f(x - h e_i)) / (2h). The oracle is deliberately
    independent of any analytic backward pass it is used to check.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    x = np.asarray(x, dtype=DOUBLE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """Infinity-norm error of approx vs exact, relative to the scale of exact."""
    scale = max(float(np.max(np.abs(exact))), 1e-12)
    return float(np.max(np.abs(approx - exact))) / scale


class SeededRng:
    """Counter-based deterministic random stream (Philox under the hood).

    The draw sequence is a pure function of the seed: equal seeds produce
    equal streams on every platform. Workers derive independent streams via
    ``for_worker``.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def gaussian(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(mean, std, size=shape)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def for_worker(self, index: int) -> "SeededRng":
        return SeededRng(self.seed ^ index)
