"""Loss assembly, Adam, the training loop, and robust-training samplers.

The loss is the negated Monte-Carlo mean of the sum-utility over a batch of
channel draws. One tape evaluates the whole batch: samples sharing a node
count are stacked along a leading axis, parameter nodes are created once, and
groups of differing sizes (the size-robust regime) each contribute a term to
the same scalar.

Training is reproducible from (config, seeds): samplers derive every draw from
an explicit seed tree, and the optimizer is deterministic.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import grad, netgen
from .metrics import UtilityKind, rates, sum_utility
from .model import ModelParams, flat_to_params, forward, forward_expr, params_to_flat, params_to_nodes
from .netgen import ProblemConfig

LN2 = float(np.log(2.0))

# seed-tree tags
_T_TRAIN = 21
_T_VAL = 22
_T_PERTURB = 23


def _child_seed(*key: int) -> int:
    return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_steps: int = 10000
    steps_per_epoch: int = 500
    max_epochs: int = 20
    patience: int = 3
    val_size: int = 256
    regime: str = "fixed"  # fixed | density | size
    d_range: tuple = (0.5, 5.0)
    m_range: tuple = (10, 30)
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "steps_per_epoch", "max_epochs", "val_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.regime not in ("fixed", "density", "size"):
            raise ValueError("regime must be fixed, density, or size")


# --- channel samplers --------------------------------------------------------

class FixedTopologySampler:
    """One topology, fresh fading per sample; the default training protocol."""

    def __init__(self, m: int, topology_seed: int, data_seed: int,
                 feature_fn: Optional[Callable] = None, batch_size: int = 64):
        self.topology = netgen.sample_topology(m, topology_seed)
        self._pg = netgen.path_gains(self.topology)
        self.q = np.ones((m, 1)) if feature_fn is None else np.asarray(feature_fn(self.topology), dtype=float)
        self.m = m
        self.data_seed = data_seed
        self.batch_size = batch_size

    def _sample(self, tag: int, idx: int, sub: int = 0):
        fad = netgen.sample_fading(self.m, _child_seed(self.data_seed, tag, idx, sub))
        return self._pg * fad, self.q

    def train_batch(self, step: int) -> list:
        return [self._sample(_T_TRAIN, step, i) for i in range(self.batch_size)]

    def validation_set(self, n: int) -> list:
        return [self._sample(_T_VAL, i) for i in range(n)]


class DensityRobustSampler:
    """Per-sample density factor d ~ U(d_range): tx scaled, rx re-dropped."""

    def __init__(self, m: int, topology_seed: int, data_seed: int, d_range=(0.5, 5.0),
                 batch_size: int = 64):
        if not (0 < d_range[0] <= d_range[1]):
            raise ValueError("invalid density range")
        self.base = netgen.sample_topology(m, topology_seed)
        self.m = m
        self.d_range = tuple(d_range)
        self.data_seed = data_seed
        self.batch_size = batch_size

    def _sample(self, tag: int, idx: int, sub: int = 0):
        s = _child_seed(self.data_seed, tag, idx, sub)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((s, _T_PERTURB))))
        d = rng.uniform(*self.d_range)
        topo = netgen.scale_density(self.base, d, seed=s)
        fad = netgen.sample_fading(self.m, s)
        return netgen.path_gains(topo) * fad, np.ones((self.m, 1))

    def train_batch(self, step: int) -> list:
        return [self._sample(_T_TRAIN, step, i) for i in range(self.batch_size)]

    def validation_set(self, n: int) -> list:
        return [self._sample(_T_VAL, i) for i in range(n)]


class SizeRobustSampler:
    """Per-sample pair count uniform over [m_lo, m_hi]; base topology resized."""

    def __init__(self, m: int, topology_seed: int, data_seed: int, m_range=(10, 30),
                 batch_size: int = 64):
        if not (1 <= m_range[0] <= m_range[1]):
            raise ValueError("invalid size range")
        self.base = netgen.sample_topology(m, topology_seed)
        self.m_range = (int(m_range[0]), int(m_range[1]))
        self.data_seed = data_seed
        self.batch_size = batch_size

    def _sample(self, tag: int, idx: int, sub: int = 0):
        s = _child_seed(self.data_seed, tag, idx, sub)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((s, _T_PERTURB))))
        m_i = int(rng.integers(self.m_range[0], self.m_range[1] + 1))
        topo = netgen.resize_network(self.base, m_i, seed=s)
        fad = netgen.sample_fading(m_i, s)
        return netgen.path_gains(topo) * fad, np.ones((m_i, 1))

    def train_batch(self, step: int) -> list:
        return [self._sample(_T_TRAIN, step, i) for i in range(self.batch_size)]

    def validation_set(self, n: int) -> list:
        return [self._sample(_T_VAL, i) for i in range(n)]


def make_sampler(cfg: TrainConfig, m: int, topology_seed: int,
                 feature_fn: Optional[Callable] = None):
    if cfg.regime == "fixed":
        return FixedTopologySampler(m, topology_seed, cfg.seed, feature_fn, cfg.batch_size)
    if feature_fn is not None:
        raise ValueError("custom features are only supported in the fixed regime")
    if cfg.regime == "density":
        return DensityRobustSampler(m, topology_seed, cfg.seed, cfg.d_range, cfg.batch_size)
    return SizeRobustSampler(m, topology_seed, cfg.seed, cfg.m_range, cfg.batch_size)


# --- loss --------------------------------------------------------------------

def _rates_expr(tape: grad.Tape, gains: np.ndarray, p: grad.Node, noise_std: float) -> grad.Node:
    g2 = gains ** 2
    diag = np.einsum("bii->bi", g2).copy()
    g2zd = g2.copy()
    zi = np.arange(g2.shape[1])
    g2zd[:, zi, zi] = 0.0
    signal = grad.mul(grad.constant(tape, diag), p)
    interference = grad.matvec(grad.constant(tape, g2zd), p)
    sinr = grad.div(signal, grad.add(grad.constant(tape, noise_std ** 2), interference))
    return grad.mul(grad.constant(tape, 1.0 / LN2), grad.ln(grad.add(grad.constant(tape, 1.0), sinr)))


def _beta_total_expr(tape: grad.Tape, c: grad.Node, kind: UtilityKind) -> grad.Node:
    if kind.name == "sum_rate":
        return grad.sum_all(c)
    if kind.name == "sum_squared_rate":
        return grad.sum_all(grad.square(c))
    if kind.name == "weighted_sum_rate":
        return grad.sum_all(grad.mul(grad.constant(tape, kind.weights), c))
    raise ValueError(f"utility {kind.name!r} cannot be used as a training loss")


def batch_loss(params: ModelParams, batch: list, cfg: ProblemConfig,
               loss_utility: Optional[UtilityKind] = None) -> grad.Node:
    """-(1/B) * Sigma_samples sum-utility of the unfolded allocation.

    batch entries are (gains, Q) pairs; samples are grouped by node count and
    each group evaluated as one stacked subgraph on a shared tape. cfg.utility
    shapes the weight update inside the layers; loss_utility (default: the
    same) scores the resulting rates, which is what the "unmodified update"
    ablation varies.
    """
    if not batch:
        raise ValueError("empty batch")
    kind = loss_utility if loss_utility is not None else cfg.utility
    tape = grad.Tape()
    node_layers = params_to_nodes(tape, params)
    groups: dict[int, list] = {}
    for gains, q in batch:
        gains = np.asarray(getattr(gains, "gains", gains), dtype=float)
        groups.setdefault(gains.shape[0], []).append((gains, np.asarray(q, dtype=float)))
    total = None
    for m in sorted(groups):
        gs = np.stack([g for g, _ in groups[m]])
        qs = np.stack([q for _, q in groups[m]])
        v = forward_expr(tape, gs, qs, node_layers, params, cfg)
        p = grad.square(v)
        c = _rates_expr(tape, gs, p, cfg.noise_std)
        term = _beta_total_expr(tape, c, kind)
        total = term if total is None else grad.add(total, term)
    return grad.mul(grad.constant(tape, -1.0 / len(batch)), total)


# --- optimizer ----------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int
    m: dict
    v: dict
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(flat_params: dict) -> OptimizerState:
    return OptimizerState(
        step=0,
        m={k: np.zeros_like(v) for k, v in flat_params.items()},
        v={k: np.zeros_like(v) for k, v in flat_params.items()},
    )


def adam_step(state: OptimizerState, flat_params: dict, grads: dict, lr: float):
    """Bias-corrected adaptive-moment update; returns (new params, state).

    Parameters whose gradient is absent from the map are treated as
    zero-gradient (dead subgraphs still decay their moments).
    """
    state.step += 1
    t = state.step
    out = {}
    for k in sorted(flat_params):
        g = grads.get(k)
        theta = flat_params[k]
        if g is None:
            g = np.zeros_like(theta)
        g = np.asarray(g, dtype=float).reshape(theta.shape)
        state.m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * g ** 2
        m_hat = state.m[k] / (1 - state.beta1 ** t)
        v_hat = state.v[k] / (1 - state.beta2 ** t)
        out[k] = theta - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out, state


# --- evaluation helper ---------------------------------------------------------

def evaluate_mean_utility(params: ModelParams, samples: list, cfg: ProblemConfig,
                          kind: Optional[UtilityKind] = None) -> float:
    """Mean sum-utility of the numpy forward pass over (gains, Q) samples."""
    kind = kind if kind is not None else cfg.utility
    vals = []
    for gains, q in samples:
        p, _ = forward(gains, q, params, cfg)
        vals.append(sum_utility(rates(p, gains, cfg.noise_std), kind))
    return float(np.mean(vals))


# --- training loop --------------------------------------------------------------

@dataclass
class TrainReport:
    losses: np.ndarray
    val_curve: list  # (epoch, mean utility)
    best_epoch: int
    best_val: float
    best_params: ModelParams
    stop_reason: str
    steps_run: int
    wall_time: float
    optimizer: dict


def train(cfg: TrainConfig, sampler, theta0: ModelParams, problem: ProblemConfig,
          loss_utility: Optional[UtilityKind] = None) -> TrainReport:
    """Step/epoch loop with early stopping on the validation monitor.

    The monitor is the mean sum-utility (same utility as the loss) on a
    validation set drawn once up front. Stops when epochs-since-best reaches
    patience, or at max_epochs/max_steps, and returns the best parameters.
    """
    t_start = time.perf_counter()
    template = theta0
    flat = params_to_flat(theta0)
    state = init_adam(flat)
    monitor = loss_utility if loss_utility is not None else problem.utility
    val_set = sampler.validation_set(cfg.val_size)

    losses = []
    val_curve = []
    best_val = -np.inf
    best_flat = dict(flat)
    best_epoch = 0
    epochs_since_best = 0
    stop_reason = "max_steps"
    epoch = 0

    for step in range(1, cfg.max_steps + 1):
        batch = sampler.train_batch(step)
        params = flat_to_params(flat, template)
        loss = batch_loss(params, batch, problem, loss_utility)
        grads = grad.backward(loss)
        flat, state = adam_step(state, flat, grads, cfg.learning_rate)
        losses.append(float(loss.value))

        if step % cfg.steps_per_epoch == 0:
            epoch += 1
            val = evaluate_mean_utility(flat_to_params(flat, template), val_set, problem, monitor)
            val_curve.append((epoch, val))
            if val > best_val:
                best_val = val
                best_flat = dict(flat)
                best_epoch = epoch
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                stop_reason = "patience"
                break
            if epoch >= cfg.max_epochs:
                stop_reason = "max_epochs"
                break

    if not val_curve:
        # fewer steps than one epoch: fall back to the final parameters
        best_flat = dict(flat)
        best_val = evaluate_mean_utility(flat_to_params(flat, template), val_set, problem, monitor)
        val_curve.append((0, best_val))

    return TrainReport(
        losses=np.asarray(losses),
        val_curve=val_curve,
        best_epoch=best_epoch,
        best_val=best_val,
        best_params=flat_to_params(best_flat, template),
        stop_reason=stop_reason,
        steps_run=len(losses),
        wall_time=time.perf_counter() - t_start,
        optimizer={"beta1": state.beta1, "beta2": state.beta2, "eps": state.eps,
                   "learning_rate": cfg.learning_rate},
    )


def train_robust(cfg: TrainConfig, m: int, topology_seed: int, theta0: ModelParams,
                 problem: ProblemConfig, loss_utility: Optional[UtilityKind] = None) -> TrainReport:
    """Robust training: every batch draws fresh perturbed topologies."""
    if cfg.regime not in ("density", "size"):
        raise ValueError("train_robust needs the density or size regime")
    sampler = make_sampler(cfg, m, topology_seed)
    return train(cfg, sampler, theta0, problem, loss_utility)
