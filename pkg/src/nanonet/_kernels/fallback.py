"""Pure numpy implementations of the hot kernels.

Selected at import time when the compiled core is unavailable (or when
NANONET_PURE is set). Signatures and semantics match `_core` exactly.
"""

import math

import numpy as np
from scipy.special import erf

BACKEND_NAME = "fallback"

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softmax_rows_fwd(x: np.ndarray) -> np.ndarray:
    """Row softmax with per-row max subtraction; -inf entries map to 0.

    A fully masked row (all -inf) yields an all-zero row rather than NaN.
    """
    m = np.max(x, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    denom = np.sum(e, axis=1, keepdims=True)
    denom = np.where(denom == 0.0, 1.0, denom)
    return e / denom


def softmax_rows_bwd(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - np.sum(g * y, axis=1, keepdims=True))


def masked_softmax_fwd(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """softmax(x + mask) per row for an additive {0, -inf} mask, with the
    masked entries excluded outright (their probability is exactly 0).

    Avoids evaluating exp on -inf operands; fully masked rows come out zero.
    """
    allowed = np.isfinite(mask)
    neg = np.where(allowed, x + mask, -np.inf)
    m = np.max(neg, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(np.where(allowed, neg - m, 0.0)) * allowed
    denom = e.sum(axis=1, keepdims=True)
    denom = np.where(denom == 0.0, 1.0, denom)
    return e / denom


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    d = 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return g * d


def rope_fwd(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate consecutive coordinate pairs of each row by per-pair angles."""
    x0 = x[:, 0::2]
    x1 = x[:, 1::2]
    y = np.empty_like(x)
    y[:, 0::2] = x0 * cos - x1 * sin
    y[:, 1::2] = x0 * sin + x1 * cos
    return y


def build_mask(seq_ids: np.ndarray, positions: np.ndarray, window: int) -> np.ndarray:
    """Additive attention mask: 0 where (i, j) may attend, -inf elsewhere.

    Pair (i, j) is allowed iff both tokens share a sequence and, for a local
    window > 0, |positions[i] - positions[j]| < window.
    """
    allowed = seq_ids[:, None] == seq_ids[None, :]
    if window > 0:
        allowed = allowed & (
            np.abs(positions[:, None] - positions[None, :]) < window
        )
    return np.where(allowed, 0.0, -np.inf)
