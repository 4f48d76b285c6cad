"""Continuous-time plants, zero-order-hold discretisation, and the cart-pendulum fixture."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DimensionError, DomainError


@dataclass(frozen=True)
class LinearPlant:
    a_cont: np.ndarray
    b_cont: np.ndarray
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a_cont, dtype=float))
        b = np.asarray(self.b_cont, dtype=float)
        if b.ndim == 1:
            b = b.reshape(-1, 1)
        if a.shape[0] != a.shape[1] or b.shape[0] != a.shape[0]:
            raise DimensionError(f"inconsistent plant shapes A{a.shape}, B{b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise DomainError("plant matrices must be finite")
        object.__setattr__(self, "a_cont", a)
        object.__setattr__(self, "b_cont", b)
        labels = tuple(self.labels) or tuple(f"x{i}" for i in range(a.shape[0]))
        object.__setattr__(self, "labels", labels)


@dataclass(frozen=True)
class DiscretePlant:
    """``x_{k+1} = A x_k + B u_k + w_k`` with ``w_k ~ N(0, sigma_w)``."""

    a: np.ndarray
    b: np.ndarray
    ts: float
    sigma_w: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.a, dtype=float))
        b = np.asarray(self.b, dtype=float)
        if b.ndim == 1:
            b = b.reshape(-1, 1)
        sw = np.atleast_2d(np.asarray(self.sigma_w, dtype=float))
        n = a.shape[0]
        if a.shape != (n, n) or b.shape[0] != n or sw.shape != (n, n):
            raise DimensionError(f"inconsistent shapes A{a.shape}, B{b.shape}, Sigma_w{sw.shape}")
        if not self.ts > 0:
            raise DomainError("ts must be positive")
        scale = max(1.0, np.abs(sw).max())
        if np.abs(sw - sw.T).max() > 1e-12 * scale:
            raise DomainError("sigma_w must be symmetric")
        if np.linalg.eigvalsh(sw).min() < -1e-12 * scale:
            raise DomainError("sigma_w must be positive semi-definite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "sigma_w", sw)
        object.__setattr__(self, "labels", tuple(self.labels) or tuple(f"x{i}" for i in range(n)))

    @property
    def n_x(self) -> int:
        return self.a.shape[0]

    @property
    def n_u(self) -> int:
        return self.b.shape[1]


@dataclass(frozen=True)
class PendulumParams:
    cart_mass: float = 0.5
    pend_mass: float = 0.2
    inertia: float = 0.006
    com_distance: float = 0.3
    friction: float = 0.1
    gravity: float = 9.81

    def __post_init__(self):
        for name in ("cart_mass", "pend_mass", "inertia", "com_distance", "gravity"):
            if not getattr(self, name) > 0 and not (name == "gravity" and self.gravity == 0):
                raise DomainError(f"{name} must be positive")
        if self.friction < 0:
            raise DomainError("friction must be non-negative")


def pendulum_linearized(p: PendulumParams) -> LinearPlant:
    """Cart-pendulum linearised about the upright equilibrium.

    State ``[cart position, cart velocity, pendulum angle, angular rate]``,
    input the horizontal force on the cart.
    """
    M, m, I, l, b, g = (p.cart_mass, p.pend_mass, p.inertia, p.com_distance,
                        p.friction, p.gravity)
    den = I * (M + m) + M * m * l ** 2
    a = np.array([
        [0.0, 1.0, 0.0, 0.0],
        [0.0, -(I + m * l ** 2) * b / den, m ** 2 * g * l ** 2 / den, 0.0],
        [0.0, 0.0, 0.0, 1.0],
        [0.0, -m * l * b / den, m * g * l * (M + m) / den, 0.0],
    ])
    bc = np.array([[0.0], [(I + m * l ** 2) / den], [0.0], [m * l / den]])
    return LinearPlant(a, bc, ("cart_pos", "cart_vel", "angle", "angle_rate"))


def discretize_zoh(p: LinearPlant, ts: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact zero-order-hold discretisation via the augmented matrix exponential."""
    if not ts > 0:
        raise DomainError("ts must be positive")
    n, m = p.b_cont.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = p.a_cont
    aug[:n, n:] = p.b_cont
    e = linalg.expm(aug * ts)
    return e[:n, :n], e[:n, n:]


def _full_rank(mat: np.ndarray, n: int) -> bool:
    s = np.linalg.svd(mat, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return False
    tol = n * np.finfo(float).eps * s[0]
    return int(np.sum(s > tol)) == n


def controllability_check(A, B) -> bool:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    return _full_rank(np.hstack(blocks), n)


def observability_check(A, C) -> bool:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    C = np.asarray(C, dtype=float).reshape(-1, A.shape[0])
    return controllability_check(A.T, C.T)


# Weights, noise and initial state of the cart-pendulum experiment.
PENDULUM_TS = 0.01
PENDULUM_Q = np.diag([5000.0, 0.0, 100.0, 0.0])
PENDULUM_R = np.array([[1.0]])
PENDULUM_NOISE_V = np.array([0.030, 0.100, 0.010, 0.150])
PENDULUM_SIGMA_W = np.outer(PENDULUM_NOISE_V, PENDULUM_NOISE_V)
PENDULUM_X0 = np.array([0.0, 0.0, np.pi / 10.0, 0.0])


def pendulum_plant(params: PendulumParams | None = None, ts: float = PENDULUM_TS,
                   sigma_w=None) -> DiscretePlant:
    """Discretised cart-pendulum with the experiment's process noise."""
    lin = pendulum_linearized(params or PendulumParams())
    a, b = discretize_zoh(lin, ts)
    sw = PENDULUM_SIGMA_W if sigma_w is None else sigma_w
    return DiscretePlant(a, b, ts, sw, lin.labels)
