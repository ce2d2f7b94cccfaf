"""Shared scalar/array kernels used by both the plain-numpy and the taped paths.

The unfolded forward pass exists twice in this package: once as straight numpy
(inference, baselines, timing) and once built on the autodiff tape (training).
Both import these helpers so the two paths agree bitwise, not just to tolerance.
"""

from __future__ import annotations

import numpy as np

# Guard for divisions whose denominator is nonnegative by construction but can
# underflow to ~0 on degenerate instances. Derivatives treat y <= EPS_GUARD as
# constant, so forward and backward see the same effective denominator.
EPS_GUARD = 1e-12


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    # branch-free two-sided form: only exp of nonpositive values, so no
    # overflow for any finite input, and 0-d arrays pass through fine
    x = np.asarray(x, dtype=float)
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def saturate(x, lo=None, hi=None):
    """Clamp to [lo, hi]; either bound may be None (one-sided)."""
    x = np.asarray(x, dtype=float)
    if lo is not None:
        x = np.maximum(x, lo)
    if hi is not None:
        x = np.minimum(x, hi)
    return x


def guarded_div(x, y):
    """x / max(y, EPS_GUARD), elementwise. Intended for y >= 0."""
    return np.asarray(x, dtype=float) / np.maximum(y, EPS_GUARD)
