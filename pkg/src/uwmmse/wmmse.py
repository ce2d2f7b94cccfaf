"""Classical block-coordinate WMMSE and the three closed-form updates.

The solver minimizes sum_i (w_i e_i - ln w_i) where e_i is the per-node
mean-square error of a scaled receiver estimate; its fixed points are the
stationary points of sum-rate maximization. The same three updates, with the
weight update made affine in two extra inputs (a, b), form one layer of the
unfolded model, so they live here and the model module imports them.

All update functions accept a ChannelState or a bare gain matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ._numeric import EPS_GUARD, guarded_div, saturate
from .metrics import UtilityKind, sum_rate

log = logging.getLogger(__name__)


def _gains(H) -> np.ndarray:
    return np.asarray(getattr(H, "gains", H), dtype=float)


@dataclass(frozen=True)
class SolveOptions:
    noise_std: float
    p_max: float = 1.0
    max_iter: int = 100
    tol: float = 1e-6
    utility: UtilityKind = field(default_factory=sum_rate)

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")
        if self.noise_std <= 0 or self.p_max <= 0:
            raise ValueError("noise_std and p_max must be positive")


@dataclass(frozen=True)
class SolveResult:
    p: np.ndarray
    iterations: int
    objective_trace: np.ndarray
    converged: bool
    uwv: tuple


def mse_errors(u, v, H, noise_std: float) -> np.ndarray:
    """e_i = (1 - u_i h_ii v_i)^2 + sigma^2 u_i^2 + u_i^2 sum_{j!=i} h_ij^2 v_j^2."""
    g = _gains(H)
    g2 = g ** 2
    d = np.diag(g)
    v2 = np.asarray(v, dtype=float) ** 2
    interference = g2 @ v2 - np.diag(g2) * v2
    return (1.0 - u * d * v) ** 2 + noise_std ** 2 * u ** 2 + u ** 2 * interference


def mse_objective(w, u, v, H, noise_std: float) -> float:
    """sum_i (w_i e_i - ln w_i); requires positive weights."""
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    e = mse_errors(np.asarray(u, dtype=float), np.asarray(v, dtype=float), H, noise_std)
    return float(np.sum(w * e - np.log(w)))


def update_u(v, H, noise_std: float) -> np.ndarray:
    """MMSE receiver gain: u_i = h_ii v_i / (sigma^2 + sum_j h_ij^2 v_j^2)."""
    if noise_std <= 0:
        raise ValueError("noise_std must be positive")
    g = _gains(H)
    v = np.asarray(v, dtype=float)
    return np.diag(g) * v / (noise_std ** 2 + (g ** 2) @ (v ** 2))


def update_w(u, v, H, a, b, kind: UtilityKind) -> np.ndarray:
    """Weight update w_i = gamma'(1 - u_i h_ii v_i) * a_i + b_i.

    The argument 1 - u h v is in (0, 1] whenever u came from update_u on the
    same v; it is still clamped at the epsilon guard because downstream callers
    may feed (u, v) pairs of their own making.
    """
    g = _gains(H)
    z = 1.0 - np.asarray(u, dtype=float) * np.diag(g) * np.asarray(v, dtype=float)
    n_clamped = int(np.sum(z < EPS_GUARD))
    if n_clamped:
        log.debug("update_w clamped %d weight argument(s) at %g", n_clamped, EPS_GUARD)
        z = np.maximum(z, EPS_GUARD)
    return kind.gamma_prime(z) * np.asarray(a, dtype=float) + np.asarray(b, dtype=float)


def update_v(u, w, H, p_max: float) -> np.ndarray:
    """Transmit amplitude: clamp of u_i h_ii w_i / sum_j h_ji^2 u_j^2 w_j to [0, sqrt(p_max)].

    The denominator sums over column i of the gains (everyone transmitter i
    interferes with); it is epsilon-guarded so u = 0 yields v = 0.
    """
    g = _gains(H)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    numer = u * np.diag(g) * w
    denom = (g ** 2).T @ (u ** 2 * w)
    return saturate(guarded_div(numer, denom), 0.0, np.sqrt(p_max))


def _positivity_check(u, v, H):
    # analytic guarantee: 1 - u h v = (sig^2 + interference)/(sig^2 + total) in (0, 1]
    z = 1.0 - u * np.diag(_gains(H)) * v
    if np.any(z <= 0):
        raise ArithmeticError("weight-update argument left (0, 1]; inputs are inconsistent")


def _run(H, opts: SolveOptions, max_iter: int, use_tol: bool) -> SolveResult:
    if not opts.utility.solver_ok:
        raise ValueError(f"utility {opts.utility.name!r} is not admissible inside the solver")
    g = _gains(H)
    m = g.shape[0]
    ones = np.ones(m)
    v = np.sqrt(opts.p_max) * ones
    trace = []
    converged = False
    iterations = 0
    u = np.zeros(m)
    w = ones.copy()
    for it in range(1, max_iter + 1):
        u = update_u(v, g, opts.noise_std)
        _positivity_check(u, v, g)
        w = update_w(u, v, g, ones, np.zeros(m), opts.utility)
        v_new = update_v(u, w, g, opts.p_max)
        # generic gamma' may round a weight to exactly 0 on degenerate nodes;
        # the objective is undefined there so the trace entry becomes nan
        if np.all(w > 0):
            trace.append(mse_objective(w, u, v_new, g, opts.noise_std))
        else:
            trace.append(np.nan)
        step = np.max(np.abs(v_new - v)) / max(np.max(np.abs(v)), EPS_GUARD)
        v = v_new
        iterations = it
        if use_tol and step < opts.tol:
            converged = True
            break
    return SolveResult(
        p=v ** 2,
        iterations=iterations,
        objective_trace=np.asarray(trace),
        converged=converged,
        uwv=(u, w, v),
    )


def solve(H, opts: SolveOptions) -> SolveResult:
    """Iterate u, w, v updates until the relative v-change drops below tol."""
    return _run(H, opts, opts.max_iter, use_tol=True)


def solve_truncated(H, opts: SolveOptions, K: int) -> SolveResult:
    """Exactly K iterations, no convergence test."""
    if K < 1:
        raise ValueError("K must be >= 1")
    return _run(H, opts, K, use_tol=False)
