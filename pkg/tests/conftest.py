"""Shared helpers for the test suite.

Gain matrices here come in two flavors: geometric ones from netgen (realistic
magnitudes, used where the physics matters) and O(1) random ones (used for
numerical identities, where path-loss dynamic range would only add float noise
unrelated to the property under test).
"""

import numpy as np

from uwmmse import metrics, netgen
from uwmmse.netgen import ProblemConfig

SIGMA_LOW = 2.6e-5
SIGMA_HIGH = 1.0


def rand_gains(m: int, seed: int) -> np.ndarray:
    """O(1) interference matrix: dominant positive diagonal, dense cross terms."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, 909))))
    g = rng.uniform(0.05, 0.6, size=(m, m))
    g[np.arange(m), np.arange(m)] = rng.uniform(1.0, 2.0, size=m)
    return g


def geo_gains(m: int, topo_seed: int, fading_seed: int) -> np.ndarray:
    topo = netgen.sample_topology(m, topo_seed)
    return netgen.path_gains(topo) * netgen.sample_fading(m, fading_seed)


def permuted(H: np.ndarray, pi: np.ndarray) -> np.ndarray:
    return H[np.ix_(pi, pi)]


def problem(noise_std: float = SIGMA_HIGH, p_max: float = 1.0, kind=None) -> ProblemConfig:
    return ProblemConfig(noise_std=noise_std, p_max=p_max,
                         utility=kind if kind is not None else metrics.sum_rate())


def grid_best_sum_rate(g: np.ndarray, noise_std: float, p_max: float, levels: int):
    """Exhaustive sum-rate search over the per-node power grid; independent oracle.

    Returns (best utility, best allocation). Vectorized over the full product
    grid, so only sensible for m <= 4 or so.
    """
    m = g.shape[0]
    axis = np.linspace(0.0, p_max, levels)
    mesh = np.meshgrid(*([axis] * m), indexing="ij")
    P = np.stack([a.reshape(-1) for a in mesh], axis=1)  # (levels^m, m)
    g2 = g ** 2
    received = P @ g2.T  # entry (n, i) = sum_j g2[i, j] p_j
    signal = P * np.diag(g2)
    sinr = signal / (noise_std ** 2 + received - signal)
    total = np.log2(1.0 + sinr).sum(axis=1)
    best = int(np.argmax(total))
    return float(total[best]), P[best]
