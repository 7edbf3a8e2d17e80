"""Small numeric primitives shared by the engine and the reference paths.

Everything here is a pure per-position function or a plain matmul; windowing,
masking and segmentation logic live with their owners so the reference
implementations stay independent of the fast path.
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-5


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign for numerical stability in both float32 and float64.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def swish(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def glu(x: np.ndarray) -> np.ndarray:
    """Gated linear unit over the last axis: first half gated by the second."""
    half = x.shape[-1] // 2
    return x[..., :half] * sigmoid(x[..., half:])


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray,
               eps: float = LN_EPS) -> np.ndarray:
    """Normalize over the feature axis only; statistics never mix positions."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * scale + shift


def ff_forward(x: np.ndarray, w1: np.ndarray, b1: np.ndarray,
               w2: np.ndarray, b2: np.ndarray) -> np.ndarray:
    """Position-wise feed-forward with swish activation."""
    return swish(x @ w1 + b1) @ w2 + b2
