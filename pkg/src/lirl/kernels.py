"""Fused elementwise optimiser loops, compiled with numba when available.

Matrix products stay in numpy (BLAS is already fast at these sizes); what
numba buys is one pass over the parameter buffer for Adam and target
mixing instead of a dozen temporary arrays.
"""

from __future__ import annotations

import math

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

AVAILABLE = numba is not None


def _adam_inplace(params, grad, m, v, b1, b2, scale, eps_hat):
    for i in range(params.shape[0]):
        g = grad[i]
        m[i] = b1 * m[i] + (1.0 - b1) * g
        v[i] = b2 * v[i] + (1.0 - b2) * g * g
        params[i] -= scale * m[i] / (math.sqrt(v[i]) + eps_hat)


def _mix_inplace(target, source, tau):
    for i in range(target.shape[0]):
        target[i] = (1.0 - tau) * target[i] + tau * source[i]


def _sq_norm(x):
    total = 0.0
    for i in range(x.shape[0]):
        total += float(x[i]) * float(x[i])
    return total


if AVAILABLE:
    _jit = numba.njit(cache=True)
    adam_inplace = _jit(_adam_inplace)
    mix_inplace = _jit(_mix_inplace)
    sq_norm = _jit(_sq_norm)
else:  # pragma: no cover
    adam_inplace = mix_inplace = sq_norm = None
