"""
Monte Carlo closed-loop simulation over sampled channel realisations.

Random numbers come from independent PCG64 streams keyed by
``(seed, purpose, run block)``: one purpose for the channel (mode and
delivery draws) and one for process noise.  Two controllers simulated with
the same seed therefore see identical channel and noise sequences, and the
result does not depend on how run blocks are scheduled.  Gaussian variates
use numpy's ziggurat ``standard_normal`` mapped through a symmetric square
root of the noise covariance.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .channel import MarkovChannel
from .control import LqWeights
from .errors import DimensionError, DomainError
from .mjls import GainSet, MjlsModel

PERCENTILES = (5, 25, 50, 75, 95)
DIVERGENCE_NORM = 1e150
RUN_BLOCK = 1000

_CHANNEL, _NOISE = 0, 1


@dataclass(frozen=True)
class SimConfig:
    horizon: int = 1200
    n_runs: int = 10_000
    initial_state: tuple = (0.0, 0.0, np.pi / 10.0, 0.0)
    initial_mode: int = 0
    seed: int = 0
    noise_on: bool = True
    snapshot_steps: tuple = ()

    def __post_init__(self):
        if self.horizon < 1 or self.n_runs < 1:
            raise DomainError("horizon and n_runs must be at least 1")
        if self.initial_mode < 0:
            raise DomainError("initial_mode must be non-negative")
        if not 0 <= self.seed < 2 ** 64:
            raise DomainError("seed must be a 64-bit unsigned integer")
        if any(not 0 <= k <= self.horizon for k in self.snapshot_steps):
            raise DomainError("snapshot steps must lie in [0, horizon]")
        object.__setattr__(self, "initial_state", tuple(float(v) for v in self.initial_state))
        object.__setattr__(self, "snapshot_steps", tuple(int(k) for k in self.snapshot_steps))


@dataclass(frozen=True, eq=False)
class TraceEnsemble:
    """Per-step statistics of an ensemble of closed-loop runs.

    Statistics at step ``k`` use the runs that have not diverged by ``k``.
    ``percentiles`` has shape ``(len(PERCENTILES), horizon + 1, n_x)``.
    ``snapshots`` maps each requested step to the raw ``(n_runs, n_x)`` states.
    """

    mean: np.ndarray
    std: np.ndarray
    percentiles: np.ndarray
    active_runs: np.ndarray
    terminal_norms: np.ndarray
    diverged: np.ndarray
    empirical_per: float
    max_burst: int
    run_costs: np.ndarray | None = None
    snapshots: dict = field(default_factory=dict)
    labels: tuple = ()

    @property
    def n_runs(self) -> int:
        return self.terminal_norms.size

    @property
    def n_diverged(self) -> int:
        return int(self.diverged.sum())

    @property
    def horizon(self) -> int:
        return self.mean.shape[0] - 1

    def empirical_cost(self) -> float:
        """Run-averaged cost over the second half of the horizon, diverged runs excluded."""
        if self.run_costs is None:
            raise DomainError("ensemble was simulated without weights")
        ok = ~self.diverged
        return float(self.run_costs[ok].mean()) if ok.any() else float("inf")


def _stream(seed: int, purpose: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(purpose, block))))


def _blocks(n_runs: int):
    for b, start in enumerate(range(0, n_runs, RUN_BLOCK)):
        yield b, start, min(start + RUN_BLOCK, n_runs)


def sample_channel(channel: MarkovChannel, horizon: int, initial_mode: int,
                   rng: np.random.Generator, n_runs: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Mode sequences ``theta_0..theta_{T-1}`` and delivery indicators, shape ``(n_runs, T)``."""
    if not 0 <= initial_mode < channel.n_states:
        raise DomainError(f"initial_mode {initial_mode} outside 0..{channel.n_states - 1}")
    cum = np.cumsum(channel.tpm, axis=1)
    cum[:, -1] = 1.0
    u_mode = rng.random((n_runs, horizon))
    u_loss = rng.random((n_runs, horizon))
    modes = np.empty((n_runs, horizon), dtype=np.int64)
    modes[:, 0] = initial_mode
    for k in range(1, horizon):
        modes[:, k] = (u_mode[:, k, None] >= cum[modes[:, k - 1]]).sum(axis=1)
    np.minimum(modes, channel.n_states - 1, out=modes)
    delivered = u_loss < channel.delivery_prob[modes]
    return modes, delivered


def sample_channel_ensemble(channel: MarkovChannel, horizon: int, initial_mode: int,
                            seed: int, n_runs: int) -> tuple[np.ndarray, np.ndarray]:
    """Channel draws for ``n_runs`` runs from the per-block channel streams of ``seed``."""
    modes = np.empty((n_runs, horizon), dtype=np.int64)
    delivered = np.empty((n_runs, horizon), dtype=bool)
    for b, lo, hi in _blocks(n_runs):
        modes[lo:hi], delivered[lo:hi] = sample_channel(
            channel, horizon, initial_mode, _stream(seed, _CHANNEL, b), hi - lo)
    return modes, delivered


def _noise_factor(sigma_w: np.ndarray) -> np.ndarray:
    lam, vec = np.linalg.eigh(0.5 * (sigma_w + sigma_w.T))
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def _policy_gains(model: MjlsModel, policy) -> tuple[np.ndarray, bool]:
    if isinstance(policy, GainSet):
        g = policy.gains
    else:
        g = np.asarray(policy, dtype=float)
        if g.ndim == 2:
            g = g[None]
    if g.shape[1:] != (model.plant.n_u, model.plant.n_x):
        raise DimensionError(f"gain shape {g.shape[1:]} does not match the plant")
    if g.shape[0] == 1:
        return g, False
    if g.shape[0] != model.n_modes:
        raise DimensionError(f"{g.shape[0]} gains for {model.n_modes} channel states")
    return g, True


def stage_cost(x: np.ndarray, u: np.ndarray, weights: LqWeights) -> np.ndarray:
    """``x'Qx + u'Ru`` along the last axis."""
    return (np.einsum("...i,ij,...j->...", x, weights.q, x)
            + np.einsum("...i,ij,...j->...", u, weights.r, u))


def empirical_cost(states, inputs, weights: LqWeights) -> float:
    """Time-averaged quadratic cost over the second half of the horizon, averaged over runs.

    ``states`` has shape ``(n_runs, T, n_x)`` and ``inputs`` the applied
    inputs ``(n_runs, T, n_u)`` (zero where the packet was lost).
    """
    states = np.asarray(states, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    t = states.shape[1]
    c = stage_cost(states[:, t // 2:], inputs[:, t // 2:], weights)
    return float(c.mean())


def simulate(model: MjlsModel, gains_policy, cfg: SimConfig,
             weights: LqWeights | None = None) -> TraceEnsemble:
    """Propagate ``x_{k+1} = A x_k + nu_k B K_{theta_{k-1}} x_k + w_k`` for every run.

    ``gains_policy`` is a :class:`GainSet` with one gain per channel state
    (indexed by the previous state, with ``theta_{-1} = initial_mode``) or a
    single gain applied at every step.  Runs whose norm exceeds ``1e150``
    are frozen there and flagged as diverged.
    """
    plant = model.plant
    n_x, T, R = plant.n_x, cfg.horizon, cfg.n_runs
    if not 0 <= cfg.initial_mode < model.n_modes:
        raise DomainError(f"initial_mode {cfg.initial_mode} outside 0..{model.n_modes - 1}")
    x0 = np.asarray(cfg.initial_state, dtype=float)
    if x0.shape != (n_x,):
        raise DimensionError(f"initial_state has {x0.size} entries, plant has {n_x} states")
    gains, mode_dependent = _policy_gains(model, gains_policy)
    A, B = plant.a, plant.b
    factor = _noise_factor(plant.sigma_w)

    modes, delivered = sample_channel_ensemble(model.channel, T, cfg.initial_mode, cfg.seed, R)
    noise_rngs = [(lo, hi, _stream(cfg.seed, _NOISE, b)) for b, lo, hi in _blocks(R)]

    x = np.broadcast_to(x0, (R, n_x)).copy()
    diverged = np.zeros(R, dtype=bool)
    mean = np.empty((T + 1, n_x))
    std = np.empty((T + 1, n_x))
    pct = np.empty((len(PERCENTILES), T + 1, n_x))
    active = np.empty(T + 1, dtype=np.int64)
    snapshots = {}
    costs = np.zeros(R) if weights is not None else None
    burst = np.zeros(R, dtype=np.int64)
    max_burst = np.zeros(R, dtype=np.int64)
    half = T // 2
    prev = np.full(R, cfg.initial_mode, dtype=np.int64)

    def record(k):
        ok = ~diverged
        active[k] = ok.sum()
        if active[k]:
            xs = x[ok]
            mean[k] = xs.mean(axis=0)
            std[k] = xs.std(axis=0, ddof=1) if active[k] > 1 else 0.0
            pct[:, k] = np.percentile(xs, PERCENTILES, axis=0)
        else:
            mean[k] = std[k] = np.nan
            pct[:, k] = np.nan
        if k in cfg.snapshot_steps:
            snapshots[k] = x.copy()

    record(0)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(T):
            theta = modes[:, k]
            nu = delivered[:, k]
            u = np.einsum("rij,rj->ri", gains[prev], x) if mode_dependent else x @ gains[0].T
            u_applied = u * nu[:, None]
            if costs is not None and k >= half:
                c = stage_cost(x, u_applied, weights)
                costs += np.where(diverged, 0.0, c)
            x_next = x @ A.T + u_applied @ B.T
            if cfg.noise_on:
                for lo, hi, rng in noise_rngs:
                    x_next[lo:hi] += rng.standard_normal((hi - lo, n_x)) @ factor.T
            norm = np.linalg.norm(x_next, axis=1)
            newly = ~diverged & ~(norm <= DIVERGENCE_NORM)
            if newly.any():
                bad = np.where(newly)[0]
                finite = np.isfinite(norm[bad])
                # saturate on the divergence sphere, keeping the direction if it is still finite
                scaled = np.where(finite[:, None], x_next[bad] / np.where(finite, norm[bad], 1.0)[:, None],
                                  x[bad] / np.linalg.norm(x[bad], axis=1, keepdims=True).clip(1e-300))
                x_next[bad] = scaled * DIVERGENCE_NORM
                diverged |= newly
            x_next[diverged & ~newly] = x[diverged & ~newly]
            x = x_next
            burst = np.where(nu, 0, burst + 1)
            np.maximum(max_burst, burst, out=max_burst)
            prev = theta
            record(k + 1)

    if costs is not None:
        costs /= (T - half)
    return TraceEnsemble(
        mean=mean, std=std, percentiles=pct, active_runs=active,
        terminal_norms=np.linalg.norm(x, axis=1), diverged=diverged,
        empirical_per=float(1.0 - delivered.mean()), max_burst=int(max_burst.max()),
        run_costs=costs, snapshots=snapshots, labels=plant.labels)


def ensemble_to_csv(ens: TraceEnsemble) -> str:
    """One row per step: ``k`` then mean, std and percentiles for every state."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["k"]
    for lab in ens.labels:
        header += [f"{lab}_mean", f"{lab}_std"] + [f"{lab}_p{p}" for p in PERCENTILES]
    w.writerow(header)
    for k in range(ens.horizon + 1):
        row = [k]
        for j in range(len(ens.labels)):
            row += [f"{ens.mean[k, j]:.10g}", f"{ens.std[k, j]:.10g}"]
            row += [f"{ens.percentiles[q, k, j]:.10g}" for q in range(len(PERCENTILES))]
        w.writerow(row)
    return buf.getvalue()


def ensemble_to_gnuplot(ens: TraceEnsemble) -> str:
    """Whitespace-separated data blocks, one per state, separated by two blank lines."""
    out = []
    for j, lab in enumerate(ens.labels):
        out.append(f"# {lab}: k mean std " + " ".join(f"p{p}" for p in PERCENTILES))
        for k in range(ens.horizon + 1):
            vals = [ens.mean[k, j], ens.std[k, j]] + list(ens.percentiles[:, k, j])
            out.append(f"{k} " + " ".join(f"{v:.10g}" for v in vals))
        out.append("\n")
    return "\n".join(out)


def summary(ens: TraceEnsemble) -> dict:
    d = {
        "runs": ens.n_runs,
        "horizon": ens.horizon,
        "diverged_runs": ens.n_diverged,
        "median_terminal_norm": float(np.median(ens.terminal_norms)),
        "empirical_per": ens.empirical_per,
        "max_burst": ens.max_burst,
    }
    if ens.run_costs is not None:
        d["empirical_cost"] = ens.empirical_cost()
    return d
