"""Per-node rates and the utility family driving both evaluation and solver.

A utility is Sigma_i beta_i(c_i) over per-node rates c. The solver side never
sees beta directly; it needs gamma(z) = -beta(-ln z) and its derivative, which
parameterize the weight update. Only utilities whose gamma is concave on (0, 1]
are admissible inside the solver; the others remain available for scoring.

Rates are reported in log2 (bits). gamma and the solver's objective use natural
log; a uniform positive rescaling of rates never moves the argmax, so the two
conventions coexist (tested by grid search in the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

RATE_CLAMP = 1e-9  # floor applied to rates before a log-of-rate utility

_SOLVER_NAMES = ("sum_rate", "weighted_sum_rate", "sum_squared_rate")
_ALL_NAMES = _SOLVER_NAMES + ("log_rate", "harmonic_rate")


class EvaluationError(ValueError):
    """A rate or z value fell outside the utility's domain."""


@dataclass(frozen=True)
class UtilityKind:
    """One member of the utility family; construct via the factory functions."""

    name: str
    weights: Optional[np.ndarray] = None
    solver_ok: bool = False

    def __post_init__(self):
        if self.name not in _ALL_NAMES:
            raise ValueError(f"unknown utility {self.name!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.ndim != 1 or np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be a 1-D positive vector")
            w = w.copy()
            w.flags.writeable = False
            object.__setattr__(self, "weights", w)

    # beta: applied to rates when scoring an allocation
    def beta(self, c):
        c = np.asarray(c, dtype=float)
        if self.name == "sum_rate":
            return c
        if self.name == "weighted_sum_rate":
            self._check_len(c)
            return self.weights * c
        if self.name == "sum_squared_rate":
            return c ** 2
        if self.name == "log_rate":
            return np.log(np.maximum(c, RATE_CLAMP))
        # harmonic_rate; no clamp is specified for it, so c = 0 is a hard error
        if np.any(c <= 0):
            raise EvaluationError("harmonic utility needs strictly positive rates")
        return -1.0 / c

    # gamma(z) = -beta(-ln z); the solver-facing scalar transform
    def gamma(self, z):
        z = self._check_z(z)
        if self.name == "sum_rate":
            return np.log(z)
        if self.name == "weighted_sum_rate":
            self._check_len(z)
            return self.weights * np.log(z)
        if self.name == "sum_squared_rate":
            return -np.log(z) ** 2
        if self.name == "log_rate":
            return -np.log(-np.log(z))
        return -1.0 / np.log(z)  # harmonic_rate

    def gamma_prime(self, z):
        z = self._check_z(z)
        if self.name == "sum_rate":
            return 1.0 / z
        if self.name == "weighted_sum_rate":
            self._check_len(z)
            return self.weights / z
        if self.name == "sum_squared_rate":
            return -2.0 * np.log(z) / z
        if self.name == "log_rate":
            return -1.0 / (z * np.log(z))
        return 1.0 / (z * np.log(z) ** 2)  # harmonic_rate

    def _check_z(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0):
            raise EvaluationError("gamma domain is z > 0")
        if self.name in ("log_rate", "harmonic_rate") and np.any(z >= 1):
            raise EvaluationError(f"{self.name} gamma is defined on z in (0, 1)")
        return z

    def _check_len(self, x):
        if np.shape(x) != self.weights.shape:
            raise ValueError("value length must match the weight vector")


def _assert_gamma_concave(kind: UtilityKind):
    # numeric concavity of gamma on a log-spaced grid over (0, 1]; slopes of
    # the chords must be non-increasing up to relative slack
    grid = np.logspace(-6, 0, 200)
    if kind.name == "weighted_sum_rate":
        gammas = [w * np.log(grid) for w in (kind.weights.min(), kind.weights.max())]
    else:
        gammas = [kind.gamma(grid)]
    for g in gammas:
        slopes = np.diff(g) / np.diff(grid)
        rise = np.diff(slopes)
        scale = np.maximum(np.abs(slopes[:-1]), 1.0)
        if np.any(rise > 1e-9 * scale):
            raise ValueError(f"gamma for {kind.name} is not concave on (0, 1]")


def sum_rate() -> UtilityKind:
    kind = UtilityKind(name="sum_rate", solver_ok=True)
    _assert_gamma_concave(kind)
    return kind


def weighted_sum_rate(weights) -> UtilityKind:
    kind = UtilityKind(name="weighted_sum_rate", weights=np.asarray(weights, dtype=float), solver_ok=True)
    _assert_gamma_concave(kind)
    return kind


def sum_squared_rate() -> UtilityKind:
    kind = UtilityKind(name="sum_squared_rate", solver_ok=True)
    _assert_gamma_concave(kind)
    return kind


def log_rate() -> UtilityKind:
    # gamma = -ln(-ln z) turns convex for z > 1/e, so this never enters the solver
    return UtilityKind(name="log_rate", solver_ok=False)


def harmonic_rate() -> UtilityKind:
    # gamma = -1/ln z turns convex for z > e^-2; evaluation-only as well
    return UtilityKind(name="harmonic_rate", solver_ok=False)


def utility_from_name(name: str, weights=None) -> UtilityKind:
    """Construct a utility from its config-file name."""
    if name == "sum_rate":
        return sum_rate()
    if name == "weighted_sum_rate":
        if weights is None:
            raise ValueError("weighted_sum_rate needs a weight vector")
        return weighted_sum_rate(weights)
    if name == "sum_squared_rate":
        return sum_squared_rate()
    if name == "log_rate":
        return log_rate()
    if name == "harmonic_rate":
        return harmonic_rate()
    raise ValueError(f"unknown utility {name!r}")


def rates(p, H, noise_std: float) -> np.ndarray:
    """Shannon rates log2(1 + SINR_i) under allocation p.

    SINR_i = h_ii^2 p_i / (sigma^2 + sum_{j != i} h_ij^2 p_j), with gains[i][j]
    read as transmitter j into receiver i.
    """
    gains = np.asarray(getattr(H, "gains", H), dtype=float)
    p = np.asarray(p, dtype=float)
    if noise_std <= 0:
        raise ValueError("noise_std must be positive")
    if p.shape != (gains.shape[0],):
        raise ValueError("power vector length must match the gain matrix")
    if np.any(p < 0):
        raise ValueError("powers must be nonnegative")
    g2 = gains ** 2
    signal = np.diag(g2) * p
    interference = g2 @ p - signal
    return np.log2(1.0 + signal / (noise_std ** 2 + interference))


def sum_utility(c, kind: UtilityKind) -> float:
    """Sigma_i beta_i(c_i)."""
    return float(np.sum(kind.beta(c)))


def gamma_prime(kind: UtilityKind, z):
    """Derivative of gamma(z) = -beta(-ln z); the weight-update coefficient."""
    return kind.gamma_prime(z)
