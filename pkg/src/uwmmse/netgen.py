"""Random geometric interference networks and their channel matrices.

m transmitter/receiver pairs are dropped in the plane: transmitter i uniform on
[-m, m]^2, its receiver uniform in the box tx_i +/- m/4. Channel gains combine a
||t - r||^-2.2 path loss with i.i.d. Rayleigh(1) fading.

Orientation convention, used consistently everywhere downstream:

    gains[i][j] = gain from transmitter j into receiver i

so row i is everything receiver i hears and column i is everywhere transmitter
i is heard.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .metrics import UtilityKind, sum_rate

PATHLOSS_EXPONENT = 2.2

# stream tags so every random draw has its own reproducible substream
_T_TOPOLOGY = 1
_T_FADING = 2
_T_RECEIVERS = 3
_T_APPEND = 4

_MAX_ATTEMPTS = 100


class DegenerateGeometryError(ValueError):
    """Some transmitter coincides exactly with some receiver (infinite gain)."""


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class NetworkTopology:
    """Planar positions of m transceiver pairs.

    gen_box_halfwidth is the receiver-box halfwidth used when the receivers
    were (re)dropped; perturbation ops keep using it rather than rederiving it
    from the current pair count.
    """

    m: int
    tx_pos: np.ndarray  # (m, 2)
    rx_pos: np.ndarray  # (m, 2)
    gen_box_halfwidth: float

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("need at least one transceiver pair")
        object.__setattr__(self, "tx_pos", _readonly(self.tx_pos))
        object.__setattr__(self, "rx_pos", _readonly(self.rx_pos))
        if self.tx_pos.shape != (self.m, 2) or self.rx_pos.shape != (self.m, 2):
            raise ValueError("position arrays must have shape (m, 2)")
        offset = np.abs(self.rx_pos - self.tx_pos)
        if not np.all(offset <= self.gen_box_halfwidth + 1e-9):
            raise ValueError("receiver outside its generation box")


@dataclass(frozen=True)
class ChannelState:
    """Nonnegative m x m gain matrix plus reproducibility metadata."""

    m: int
    gains: np.ndarray
    topology_seed: Optional[int] = None
    fading_seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "gains", _readonly(self.gains))
        if self.gains.shape != (self.m, self.m):
            raise ValueError("gains must be m x m")
        if not np.all(np.isfinite(self.gains)) or np.any(self.gains < 0):
            raise ValueError("gains must be finite and nonnegative")
        if np.any(np.diag(self.gains) <= 0):
            raise ValueError("diagonal gains must be positive")


@dataclass(frozen=True)
class ProblemConfig:
    """Noise level, power budget, and the utility being optimized."""

    noise_std: float
    p_max: float = 1.0
    utility: UtilityKind = field(default_factory=sum_rate)

    def __post_init__(self):
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if self.p_max <= 0:
            raise ValueError("p_max must be positive")


def _min_cross_distance(tx: np.ndarray, rx: np.ndarray) -> float:
    d = np.linalg.norm(tx[None, :, :] - rx[:, None, :], axis=2)
    return float(d.min())


def sample_topology(m: int, seed: int) -> NetworkTopology:
    """Drop m pairs uniformly: tx on [-m, m]^2, rx within tx +/- m/4.

    Coincident tx/rx geometry (zero distance somewhere) is resampled with an
    attempt-indexed seed; after 100 attempts it raises.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    halfwidth = m / 4.0
    for attempt in range(_MAX_ATTEMPTS):
        rng = _rng(seed, _T_TOPOLOGY, attempt)
        tx = rng.uniform(-m, m, size=(m, 2))
        rx = tx + rng.uniform(-halfwidth, halfwidth, size=(m, 2))
        if _min_cross_distance(tx, rx) > 0.0:
            return NetworkTopology(m=m, tx_pos=tx, rx_pos=rx, gen_box_halfwidth=halfwidth)
    raise DegenerateGeometryError("coincident transmitter/receiver after 100 attempts")


def path_gains(topo: NetworkTopology) -> np.ndarray:
    """Distance-law gains: entry (i, j) = ||t_j - r_i||^-2.2."""
    diff = topo.tx_pos[None, :, :] - topo.rx_pos[:, None, :]  # (rx i, tx j, 2)
    dist = np.linalg.norm(diff, axis=2)
    if np.any(dist == 0.0):
        raise DegenerateGeometryError("zero transmitter-receiver distance")
    return dist ** (-PATHLOSS_EXPONENT)


def sample_fading(m: int, seed: int) -> np.ndarray:
    """i.i.d. Rayleigh(1) draws via the inverse CDF sqrt(-2 ln U), U in (0,1]."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = _rng(seed, _T_FADING)
    u = 1.0 - rng.random(size=(m, m))  # (0, 1], keeps ln finite
    return np.sqrt(-2.0 * np.log(u))


def channel_state(
    topo: NetworkTopology,
    fading: np.ndarray,
    topology_seed: Optional[int] = None,
    fading_seed: Optional[int] = None,
) -> ChannelState:
    """Combine path gains with a fading draw into a ChannelState."""
    fading = np.asarray(fading, dtype=float)
    if fading.shape != (topo.m, topo.m):
        raise ValueError("fading shape must match topology")
    gains = path_gains(topo) * fading
    return ChannelState(
        m=topo.m, gains=gains, topology_seed=topology_seed, fading_seed=fading_seed
    )


def sample_channel(m: int, topology_seed: int, fading_seed: int) -> ChannelState:
    """Convenience: fresh topology + fresh fading in one call."""
    topo = sample_topology(m, topology_seed)
    fad = sample_fading(m, fading_seed)
    return channel_state(topo, fad, topology_seed=topology_seed, fading_seed=fading_seed)


def scale_density(topo: NetworkTopology, d: float, seed: int) -> NetworkTopology:
    """Compress (d > 1) or dilate (d < 1) the layout: tx /= d, rx re-dropped.

    The receiver boxes keep the original halfwidth, so large d packs
    transmitters together while interference ranges stay put.
    """
    if d <= 0:
        raise ValueError("density factor must be positive")
    hw = topo.gen_box_halfwidth
    tx = topo.tx_pos / d
    for attempt in range(_MAX_ATTEMPTS):
        rng = _rng(seed, _T_RECEIVERS, attempt)
        rx = tx + rng.uniform(-hw, hw, size=(topo.m, 2))
        if _min_cross_distance(tx, rx) > 0.0:
            return NetworkTopology(m=topo.m, tx_pos=tx, rx_pos=rx, gen_box_halfwidth=hw)
    raise DegenerateGeometryError("coincident transmitter/receiver after 100 attempts")


def resize_network(topo: NetworkTopology, m_new: int, seed: int) -> NetworkTopology:
    """Shrink to a prefix of pairs or grow by appending fresh pairs.

    Retained transmitters keep their positions; every retained receiver is
    re-dropped. Appended transmitters land in the original [-N, N]^2 box
    (N = topo.m at call time), so growing never expands the deployment area.
    """
    if m_new < 1:
        raise ValueError("m_new must be >= 1")
    n_orig = topo.m
    hw = topo.gen_box_halfwidth
    keep = min(m_new, n_orig)
    tx_keep = topo.tx_pos[:keep]
    for attempt in range(_MAX_ATTEMPTS):
        rng = _rng(seed, _T_RECEIVERS, attempt)
        rx_keep = tx_keep + rng.uniform(-hw, hw, size=(keep, 2))
        if m_new <= n_orig:
            tx, rx = tx_keep, rx_keep
        else:
            rng_new = _rng(seed, _T_APPEND, attempt)
            tx_new = rng_new.uniform(-n_orig, n_orig, size=(m_new - keep, 2))
            rx_new = tx_new + rng_new.uniform(-hw, hw, size=(m_new - keep, 2))
            tx = np.vstack([tx_keep, tx_new])
            rx = np.vstack([rx_keep, rx_new])
        if _min_cross_distance(tx, rx) > 0.0:
            return NetworkTopology(m=m_new, tx_pos=tx, rx_pos=rx, gen_box_halfwidth=hw)
    raise DegenerateGeometryError("coincident transmitter/receiver after 100 attempts")


def node_distance_features(topo: NetworkTopology) -> np.ndarray:
    """Per-node geometry features: own-link length and nearest cross distance.

    Column 0: ||t_i - r_i||. Column 1: min over j != i of ||t_i - r_j||
    (how close transmitter i sits to someone else's receiver). Raw values;
    standardization is the caller's business.
    """
    diff = topo.rx_pos[None, :, :] - topo.tx_pos[:, None, :]  # (tx i, rx j, 2)
    dist = np.linalg.norm(diff, axis=2)
    own = np.diag(dist).copy()
    cross = dist + np.diag(np.full(topo.m, np.inf))
    nearest = cross.min(axis=1)
    if topo.m == 1:
        nearest = own.copy()  # no cross links to speak of
    return np.stack([own, nearest], axis=1)


# --- dataset serialization -------------------------------------------------
# One JSON document per channel sample, newline-delimited. Gains are stored
# row-major so the file round-trips without shape ambiguity beyond m.

def channel_document(topo: NetworkTopology, state: ChannelState, noise_std: float) -> dict:
    return {
        "m": state.m,
        "tx_pos": topo.tx_pos.tolist(),
        "rx_pos": topo.rx_pos.tolist(),
        "gains": state.gains.reshape(-1).tolist(),
        "noise_std": noise_std,
        "seeds": {"topology": state.topology_seed, "fading": state.fading_seed},
    }


def load_channel_document(doc: dict) -> tuple[NetworkTopology, ChannelState, float]:
    m = int(doc["m"])
    tx = np.asarray(doc["tx_pos"], dtype=float)
    rx = np.asarray(doc["rx_pos"], dtype=float)
    # smallest box consistent with the stored positions (halfwidth is not
    # serialized; it only matters when re-perturbing a topology)
    hw = float(np.abs(rx - tx).max())
    topo = NetworkTopology(m=m, tx_pos=tx, rx_pos=rx, gen_box_halfwidth=hw)
    seeds = doc.get("seeds") or {}
    state = ChannelState(
        m=m,
        gains=np.asarray(doc["gains"], dtype=float).reshape(m, m),
        topology_seed=seeds.get("topology"),
        fading_seed=seeds.get("fading"),
    )
    return topo, state, float(doc["noise_std"])


def write_channel_dataset(path, docs: Iterable[dict]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc, separators=(",", ":"), sort_keys=True))
            fh.write("\n")
            n += 1
    return n


def iter_channel_dataset(path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
