"""Per-node simulation of the trained model's distributed deployment.

Each transceiver pair is an agent that knows row i (everything its receiver
hears), column i (everywhere its transmitter lands), the node features, and the
trained weights. Per unfolding layer the agents run three synchronous broadcast
phases: hidden GNN features, the v pilot, and the (u, w) feedback. Every gain
read goes through an audited accessor; any access outside the agent's row or
column raises immediately, so a completed run certifies locality.

The arithmetic mirrors the centralized forward pass (same groupings, per-row),
so outputs match it to float accumulation order.

With the polynomial-filter psi (regnn) the hidden-feature phase needs one
broadcast round per filter hop instead of one total; the closed-form count
contract in message_count applies to the default GCN schedule. Phase 2's
explicit pilots could be replaced by receiver-side power measurement in a
physical system; the simulator keeps them as messages so the overhead is
visible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._numeric import EPS_GUARD, relu as _relu, sigmoid as _sigmoid
from .metrics import UtilityKind
from .model import GcnParams, ModelParams, RegnnParams, default_features
from .netgen import ProblemConfig

FLOAT_BYTES = 8


class LocalityViolation(RuntimeError):
    """An agent touched a gain entry outside its own row and column."""


@dataclass(frozen=True)
class MessageRecord:
    layer: int
    phase: int
    sender: int
    kind: str
    size_bytes: int


class MessageLog:
    """Ordered broadcast records plus the audit counters of the run."""

    def __init__(self):
        self.records: list[MessageRecord] = []
        self.gain_reads = 0

    def append(self, layer: int, phase: int, sender: int, kind: str, size_bytes: int):
        self.records.append(MessageRecord(layer, phase, sender, kind, size_bytes))

    @property
    def broadcasts(self) -> int:
        return len(self.records)

    def directed(self, m: int) -> int:
        return self.broadcasts * (m - 1)

    def to_rows(self) -> list:
        return [(r.layer, r.phase, r.sender, r.size_bytes) for r in self.records]


@dataclass(frozen=True)
class MessageCounts:
    broadcasts: int
    directed: int


def message_count(m: int, K: int) -> MessageCounts:
    """Closed-form schedule size for the GCN psi: three phases per layer."""
    if m < 1 or K < 1:
        raise ValueError("m and K must be >= 1")
    return MessageCounts(broadcasts=3 * m * K, directed=3 * m * (m - 1) * K)


class AuditedGains:
    """Gain matrix wrapper that enforces and counts row/column-local reads."""

    def __init__(self, gains: np.ndarray, log: MessageLog):
        self._g = np.asarray(gains, dtype=float)
        self._log = log
        self.m = self._g.shape[0]

    def row(self, agent: int) -> np.ndarray:
        self._log.gain_reads += self.m
        return self._g[agent, :].copy()

    def col(self, agent: int) -> np.ndarray:
        self._log.gain_reads += self.m
        return self._g[:, agent].copy()

    def entry(self, agent: int, i: int, j: int) -> float:
        if i != agent and j != agent:
            raise LocalityViolation(f"agent {agent} read gain ({i}, {j})")
        self._log.gain_reads += 1
        return float(self._g[i, j])


class _Agent:
    """Local state of one transceiver pair."""

    def __init__(self, idx: int, gains: AuditedGains, q_row: np.ndarray, cfg: ProblemConfig):
        self.i = idx
        self.row = gains.row(idx)  # receiver-side knowledge
        self.col = gains.col(idx)  # transmitter-side knowledge
        self.h_ii = self.row[idx]
        self.q = q_row
        self.sigma2 = cfg.noise_std ** 2
        self.sqrt_pmax = float(np.sqrt(cfg.p_max))
        self.v = self.sqrt_pmax
        self.a = None
        self.b = None
        self.u = None
        self.w = None

    # --- psi, GCN schedule ---

    def gcn_hidden(self, theta: GcnParams, q_all: np.ndarray) -> np.ndarray:
        # needs row-local aggregation of features: h_ii q_i and sum_j h_ij q_j
        return _relu((self.q * self.h_ii) @ theta.w11 + (self.row @ q_all) @ theta.w12)

    def gcn_output(self, theta: GcnParams, z_all: np.ndarray) -> float:
        own = z_all[self.i]
        return float(_sigmoid(self.h_ii * (own @ theta.w21) + self.row @ (z_all @ theta.w22)))

    # --- psi, polynomial-filter schedule ---

    def regnn_tap(self, y_all: np.ndarray) -> float:
        return float(self.row @ y_all)

    # --- solver updates, per-node forms of the centralized equations ---

    def compute_uw(self, v_all: np.ndarray, kind: UtilityKind):
        denom = self.sigma2 + (self.row ** 2) @ (v_all ** 2)
        self.u = self.h_ii * self.v / denom
        z = max(1.0 - self.u * self.h_ii * self.v, EPS_GUARD)
        gp = float(kind.gamma_prime(np.asarray([z]))[0]) if kind.weights is None else None
        if gp is None:
            gp = float(kind.weights[self.i] / z)
        self.w = gp * self.a + self.b

    def compute_v(self, u_all: np.ndarray, w_all: np.ndarray):
        numer = self.u * self.h_ii * self.w
        denom = (self.col ** 2) @ (u_all ** 2 * w_all)
        self.v = float(np.clip(numer / max(denom, EPS_GUARD), 0.0, self.sqrt_pmax))


def run_distributed(H, Q, params: ModelParams, cfg: ProblemConfig):
    """Synchronous-round simulation; returns (p, MessageLog).

    Raises LocalityViolation if any agent's computation would need a gain
    entry outside its row/column.
    """
    gains = np.asarray(getattr(H, "gains", H), dtype=float)
    m = gains.shape[0]
    q = default_features(m) if Q is None else np.asarray(Q, dtype=float)
    log = MessageLog()
    audited = AuditedGains(gains, log)
    agents = [_Agent(i, audited, q[i], cfg) for i in range(m)]

    for k, layer in enumerate(params.layers, start=1):
        # phase 1: hidden features / filter taps, then local a_i, b_i
        if params.psi_variant == "gcn":
            za = np.empty((m, params.F))
            zb = np.empty((m, params.F))
            for ag in agents:
                za[ag.i] = ag.gcn_hidden(layer.theta_a, q)
                zb[ag.i] = ag.gcn_hidden(layer.theta_b, q)
                log.append(k, 1, ag.i, "psi_hidden", 2 * params.F * FLOAT_BYTES)
            for ag in agents:
                ag.a = ag.gcn_output(layer.theta_a, za)
                ag.b = ag.gcn_output(layer.theta_b, zb)
        else:
            _regnn_phase(agents, layer.theta_a, layer.theta_b, q, log, k)

        # phase 2: v pilots out, receivers form u and w locally
        v_all = np.array([ag.v for ag in agents])
        for ag in agents:
            log.append(k, 2, ag.i, "v_pilot", FLOAT_BYTES)
        for ag in agents:
            ag.compute_uw(v_all, cfg.utility)

        # phase 3: (u, w) feedback, transmitters update v
        u_all = np.array([ag.u for ag in agents])
        w_all = np.array([ag.w for ag in agents])
        for ag in agents:
            log.append(k, 3, ag.i, "uw_feedback", 2 * FLOAT_BYTES)
        for ag in agents:
            ag.compute_v(u_all, w_all)

    p = np.array([ag.v ** 2 for ag in agents])
    return p, log


def _regnn_phase(agents, theta_a: RegnnParams, theta_b: RegnnParams, q, log, layer_idx):
    """Filter-hop rounds: every H-power needs one broadcast of the running signal."""
    m = len(agents)
    ya = q[:, 0].astype(float).copy()
    yb = ya.copy()
    acc_a = np.zeros(m)
    acc_b = np.zeros(m)
    n_layers, n_taps = theta_a.taps.shape
    za = ya
    zb = yb
    for l in range(n_layers):
        acc_a = theta_a.taps[l, 0] * za
        acc_b = theta_b.taps[l, 0] * zb
        ya, yb = za, zb
        for t in range(1, n_taps):
            for ag in agents:
                log.append(layer_idx, 1, ag.i, "psi_pilot", 2 * FLOAT_BYTES)
            ya = np.array([ag.regnn_tap(ya) for ag in agents])
            yb = np.array([ag.regnn_tap(yb) for ag in agents])
            acc_a = acc_a + theta_a.taps[l, t] * ya
            acc_b = acc_b + theta_b.taps[l, t] * yb
        if l < n_layers - 1:
            za, zb = _relu(acc_a), _relu(acc_b)
        else:
            za, zb = _sigmoid(acc_a), _sigmoid(acc_b)
    for ag in agents:
        ag.a = float(za[ag.i])
        ag.b = float(zb[ag.i])
