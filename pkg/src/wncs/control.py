"""
Infinite-horizon LQ synthesis under packet dropouts.

All solvers use synchronous value iteration started from ``X = Q``.  Stored
gains always act as ``u = K x`` with closed loop ``A + nu B K``, so the
stabilising minus sign lives inside ``K``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .channel import bernoulli_channel
from .errors import ConsistencyError, DimensionError, DomainError, NoSolutionError
from .mjls import GainSet, MjlsModel, build_classical_lambda, build_lambda, spectral_radius
from .plant import DiscretePlant, controllability_check, observability_check

REL_TOL = 1e-12
MAX_ITER = 100_000
DIVERGENCE_NORM = 1e12
RESIDUAL_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class LqWeights:
    q: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        q = np.atleast_2d(np.asarray(self.q, dtype=float))
        r = np.atleast_2d(np.asarray(self.r, dtype=float))
        for name, m in (("q", q), ("r", r)):
            if m.shape[0] != m.shape[1]:
                raise DimensionError(f"{name} must be square")
            if not np.all(np.isfinite(m)) or np.abs(m - m.T).max() > 1e-12 * max(1.0, np.abs(m).max()):
                raise DomainError(f"{name} must be finite and symmetric")
        if np.linalg.eigvalsh(q).min() < -1e-12 * max(1.0, np.abs(q).max()):
            raise DomainError("q must be positive semi-definite")
        if np.linalg.eigvalsh(r).min() <= 1e-12 * max(1.0, np.abs(r).max()):
            raise DomainError("r must be positive definite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "r", r)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    """Fixed point of a Riccati iteration plus the closed-loop figures of merit.

    ``cost`` is ``sum_i p_i trace(X_i Sigma_w)``; it is reported even when
    ``stabilizing`` is false, in which case it is not a finite-horizon limit.
    """

    x_blocks: np.ndarray
    gains: GainSet
    cost: float
    iterations: int
    residual: float
    stabilizing: bool
    rho: float
    converged: bool = True
    extra: dict = field(default_factory=dict)


def _check_dims(plant: DiscretePlant, weights: LqWeights):
    if weights.q.shape != (plant.n_x, plant.n_x) or weights.r.shape != (plant.n_u, plant.n_u):
        raise DimensionError("weights do not match the plant dimensions")


def _warn_structure(plant: DiscretePlant, weights: LqWeights):
    if not controllability_check(plant.a, plant.b):
        warnings.warn("(A, B) is not controllable", RuntimeWarning, stacklevel=3)
    if not observability_check(plant.a, weights.q):
        warnings.warn("(A, Q) is not observable", RuntimeWarning, stacklevel=3)


def _iterate(step, x0, what: str):
    x = x0
    trace = [float(np.linalg.norm(x))]
    for it in range(1, MAX_ITER + 1):
        xn = step(x)
        xn = 0.5 * (xn + np.swapaxes(xn, -1, -2))
        nrm = float(np.linalg.norm(xn))
        trace.append(nrm)
        if not np.isfinite(nrm) or nrm > DIVERGENCE_NORM:
            raise NoSolutionError(
                f"{what} iteration diverged after {it} steps (norm {nrm:.3e}): "
                "no stabilizing solution", trace)
        delta = float(np.linalg.norm(xn - x))
        x = xn
        if delta <= REL_TOL * max(nrm, np.finfo(float).tiny):
            return x, it, True
    warnings.warn(f"{what} iteration hit {MAX_ITER} steps without converging",
                  RuntimeWarning, stacklevel=3)
    return x, MAX_ITER, False


def mare_step(plant: DiscretePlant, weights: LqWeights, nu_hat: float, x: np.ndarray) -> np.ndarray:
    """One value-iteration step of the modified algebraic Riccati equation."""
    A, B = plant.a, plant.b
    bxa = B.T @ x @ A
    return A.T @ x @ A + weights.q - nu_hat * bxa.T @ np.linalg.solve(weights.r + B.T @ x @ B, bxa)


def mare_gain(plant: DiscretePlant, weights: LqWeights, x: np.ndarray) -> np.ndarray:
    A, B = plant.a, plant.b
    return -np.linalg.solve(weights.r + B.T @ x @ B, B.T @ x @ A)


def bernoulli_lambda(plant: DiscretePlant, gain, nu_hat: float) -> np.ndarray:
    """``(1 - nu) A kron A + nu (A + BK) kron (A + BK)``."""
    acl = plant.a + plant.b @ np.atleast_2d(gain)
    return (1.0 - nu_hat) * np.kron(plant.a, plant.a) + nu_hat * np.kron(acl, acl)


def mare_solve(plant: DiscretePlant, weights: LqWeights, nu_hat: float,
               x0=None) -> RiccatiSolution:
    """Solve the MARE for i.i.d. packet delivery with probability ``nu_hat``.

    Raises
    ------
    NoSolutionError
        If the iterate norm exceeds ``1e12``; the exception carries the
        per-iteration norm trace.
    """
    if not 0.0 <= nu_hat <= 1.0:
        raise DomainError(f"nu_hat must lie in [0, 1], got {nu_hat}")
    _check_dims(plant, weights)
    _warn_structure(plant, weights)
    start = weights.q.copy() if x0 is None else np.asarray(x0, dtype=float)
    x, its, conv = _iterate(lambda s: mare_step(plant, weights, nu_hat, s), start, "MARE")
    k = mare_gain(plant, weights, x)
    res = float(np.linalg.norm(x - mare_step(plant, weights, nu_hat, x)) / max(np.linalg.norm(x), 1e-300))
    rho = spectral_radius(bernoulli_lambda(plant, k, nu_hat))
    cost = float(np.trace(x @ plant.sigma_w))
    return RiccatiSolution(x[None], GainSet(k[None]), cost, its, res, rho < 1.0, rho, conv,
                           {"nu_hat": nu_hat})


def critical_probability_bound(a) -> float:
    """``1 - prod |lambda_u|^-2`` over the unstable eigenvalues of ``A``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise DimensionError("A must be square")
    lam = np.abs(np.linalg.eigvals(a))
    unstable = lam[lam > 1.0 + 1e-9]
    return float(1.0 - np.prod(unstable ** -2.0))


def critical_probability_estimate(plant: DiscretePlant, weights: LqWeights,
                                  tol: float = 1e-4) -> float:
    """Bisect on ``nu_hat`` for the boundary where the MARE iteration stops converging."""

    def ok(nu):
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sol = mare_solve(plant, weights, nu)
        except NoSolutionError:
            return False
        return sol.converged

    lo, hi = 0.0, 1.0
    if ok(lo):
        return 0.0
    if not ok(hi):
        raise NoSolutionError("MARE has no solution even with lossless delivery")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _care_terms(model: MjlsModel, weights: LqWeights, xs: np.ndarray):
    A, B = model.plant.a, model.plant.b
    P, nu = model.channel.tpm, model.channel.delivery_prob
    s_a = np.einsum("ij,jab->iab", P, xs)
    s_c = np.einsum("ij,jab->iab", P * nu[None, :], xs)
    xi = P @ nu
    aa = np.einsum("ba,ibc,cd->iad", A, s_a, A) + weights.q
    cc = np.einsum("ba,ibc,cd->iad", A, s_c, B)
    bb = np.einsum("ba,ibc,cd->iad", B, s_c, B) + xi[:, None, None] * weights.r
    return aa, bb, cc


def care_step(model: MjlsModel, weights: LqWeights, xs: np.ndarray) -> np.ndarray:
    aa, bb, cc = _care_terms(model, weights, xs)
    return aa - np.einsum("iab,ibc->iac", cc, np.linalg.solve(bb, np.swapaxes(cc, 1, 2)))


def care_gains(model: MjlsModel, weights: LqWeights, xs: np.ndarray) -> GainSet:
    _, bb, cc = _care_terms(model, weights, xs)
    return GainSet(-np.linalg.solve(bb, np.swapaxes(cc, 1, 2)))


def care_residual(model: MjlsModel, weights: LqWeights, xs) -> float:
    """Largest relative mismatch ``||X_i - F_i(X)|| / ||X_i||`` over the N coupled equations."""
    xs = np.asarray(xs, dtype=float)
    diff = xs - care_step(model, weights, xs)
    return float(max(np.linalg.norm(diff[i]) / max(np.linalg.norm(xs[i]), 1e-300)
                     for i in range(xs.shape[0])))


def _model_cost(model: MjlsModel, xs: np.ndarray) -> float:
    p = model.channel.stationary
    return float(sum(p[i] * np.trace(xs[i] @ model.plant.sigma_w) for i in range(len(p))))


def care_solve(model: MjlsModel, weights: LqWeights) -> RiccatiSolution:
    """Coupled Riccati equations for gains indexed by the previously observed channel state."""
    _check_dims(model.plant, weights)
    _warn_structure(model.plant, weights)
    xi = model.channel.tpm @ model.channel.delivery_prob
    if np.any(xi <= 0.0):
        bad = int(np.argmax(xi <= 0.0))
        raise DomainError(f"state {bad} never leads to a delivery: the coupled equations are singular")
    n = model.n_modes
    start = np.repeat(weights.q[None], n, axis=0)
    xs, its, conv = _iterate(lambda s: care_step(model, weights, s), start, "CARE")
    gains = care_gains(model, weights, xs)
    rho = spectral_radius(build_lambda(model, gains))
    return RiccatiSolution(xs, gains, _model_cost(model, xs), its,
                           care_residual(model, weights, xs), rho < 1.0, rho, conv)


def classical_care_step(model: MjlsModel, weights: LqWeights, xs: np.ndarray) -> np.ndarray:
    A, B = model.plant.a, model.plant.b
    P, nu = model.channel.tpm, model.channel.delivery_prob
    out = np.empty_like(xs)
    for i in range(xs.shape[0]):
        e = np.einsum("j,jab->ab", P[i], xs)
        bea = B.T @ e @ A
        out[i] = A.T @ e @ A + weights.q - nu[i] * bea.T @ np.linalg.solve(weights.r + B.T @ e @ B, bea)
    return out


def classical_care_solve(model: MjlsModel, weights: LqWeights) -> RiccatiSolution:
    """Coupled Riccati equations assuming the current channel state is known instantly.

    ``rho`` is the radius of the instantaneous-mode second-moment operator,
    and ``extra["delayed_rho"]`` the radius of the same gains applied with
    one step of mode delay.
    """
    _check_dims(model.plant, weights)
    n = model.n_modes
    start = np.repeat(weights.q[None], n, axis=0)
    xs, its, conv = _iterate(lambda s: classical_care_step(model, weights, s), start, "classical CARE")
    A, B = model.plant.a, model.plant.b
    P = model.channel.tpm
    ks = []
    for i in range(n):
        e = np.einsum("j,jab->ab", P[i], xs)
        ks.append(-np.linalg.solve(weights.r + B.T @ e @ B, B.T @ e @ A))
    gains = GainSet(np.array(ks))
    diff = xs - classical_care_step(model, weights, xs)
    res = float(np.linalg.norm(diff) / max(np.linalg.norm(xs), 1e-300))
    rho = spectral_radius(build_classical_lambda(model, gains))
    delayed = spectral_radius(build_lambda(model, gains))
    return RiccatiSolution(xs, gains, _model_cost(model, xs), its, res, rho < 1.0, rho, conv,
                           {"delayed_rho": delayed})


def mode_independent_solution(model: MjlsModel, weights: LqWeights,
                              strict: bool = True) -> RiccatiSolution:
    """MARE solution at the stationary mean delivery probability, replicated over all states.

    The replicated pair solves every coupled equation only when each state's
    one-step delivery probability ``sum_j p_ij nu_j`` equals the stationary
    mean.  The achieved residual is checked and, with ``strict``, a
    :class:`ConsistencyError` is raised when it exceeds ``1e-8``.
    """
    nu_bar = model.channel.mean_delivery
    base = mare_solve(model.plant, weights, nu_bar)
    n = model.n_modes
    xs = np.repeat(base.x_blocks, n, axis=0)
    gains = GainSet.replicate(base.gains[0], n)
    res = care_residual(model, weights, xs)
    if strict and res > RESIDUAL_TOL:
        raise ConsistencyError(
            f"replicated MARE solution misses the coupled equations by {res:.3e}; "
            "per-state delivery probabilities sum_j p_ij nu_j are not all equal")
    rho = spectral_radius(build_lambda(model, gains))
    return RiccatiSolution(xs, gains, _model_cost(model, xs), base.iterations, res,
                           rho < 1.0, rho, base.converged,
                           {"nu_hat": nu_bar, "bernoulli_cost": base.cost})


def bernoulli_model(plant: DiscretePlant, nu_hat: float) -> MjlsModel:
    """Single-state model whose moment operators collapse to the i.i.d. loss case."""
    return MjlsModel(plant, bernoulli_channel(nu_hat))
