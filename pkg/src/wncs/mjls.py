"""
Moment operators and mean-square stability of Markov jump linear systems
whose controller observes the channel mode with one step of delay.

The closed loop is ``x_{k+1} = (A + nu_k B K_{theta_{k-1}}) x_k + w_k`` where
``theta`` is the channel Markov chain and ``nu_k`` the delivery indicator
drawn with probability ``delivery_prob[theta_k]``.  Conditioning the state
moments on the pair ``(theta_{k-1}, theta_k) = (l, i)`` gives N x N grids
of blocks

    m[l, i] = E(x_k 1{theta_{k-1}=l, theta_k=i})
    M[l, i] = E(x_k x_k' 1{theta_{k-1}=l, theta_k=i})

whose one-step propagation is linear.  ``vec2`` flattens such a grid in
block-column-major order (block (l, i) sits at position ``l + N*i``), and
``build_psi`` / ``build_lambda`` return the matrices acting on those
vectors.  Everything here is real-valued.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import linalg as sparse_linalg

from .channel import MarkovChannel
from .errors import (ConstructionError, DimensionError, NumericalError,
                     UnstableSystemError)
from .plant import DiscretePlant

MAX_LAMBDA_DIM = 40_000
STRICT_TOL = 1e-10


@dataclass(frozen=True)
class MjlsModel:
    plant: DiscretePlant
    channel: MarkovChannel

    @property
    def n_modes(self) -> int:
        return self.channel.n_states

    @property
    def n_x(self) -> int:
        return self.plant.n_x


@dataclass(frozen=True, eq=False)
class GainSet:
    """One ``n_u x n_x`` feedback gain per channel state, closed loop ``A + nu B K``."""

    gains: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.gains, dtype=float)
        if g.ndim == 2:
            g = g[None]
        if g.ndim != 3:
            raise DimensionError(f"gains must have shape (N, n_u, n_x), got {g.shape}")
        if not np.all(np.isfinite(g)):
            raise DimensionError("gains must be finite")
        g = g.copy()
        g.flags.writeable = False
        object.__setattr__(self, "gains", g)

    @classmethod
    def replicate(cls, gain, n_modes: int) -> "GainSet":
        k = np.atleast_2d(np.asarray(gain, dtype=float))
        return cls(np.repeat(k[None], n_modes, axis=0))

    @property
    def n_modes(self) -> int:
        return self.gains.shape[0]

    def __getitem__(self, i) -> np.ndarray:
        return self.gains[i]

    def __len__(self):
        return self.n_modes

    def to_text(self) -> str:
        n, nu, nx = self.gains.shape
        lines = [f"{n} {nu} {nx}"]
        for k in self.gains:
            lines += [" ".join(f"{v:.17g}" for v in row) for row in k]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GainSet":
        rows = [ln.split() for ln in text.splitlines()
                if ln.strip() and not ln.lstrip().startswith("#")]
        try:
            n, nu, nx = (int(v) for v in rows[0])
            data = np.array([[float(v) for v in r] for r in rows[1:]])
            return cls(data.reshape(n, nu, nx))
        except (ValueError, IndexError) as exc:
            raise DimensionError(f"malformed gain file: {exc}") from None


@dataclass(frozen=True, eq=False)
class BlockMatrix:
    """N x N grid of equally sized blocks stored as an (N, N, n_r, n_c) array."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.blocks, dtype=float)
        if b.ndim != 4 or b.shape[0] != b.shape[1]:
            raise DimensionError(f"blocks must have shape (N, N, n_r, n_c), got {b.shape}")
        b = b.copy()
        b.flags.writeable = False
        object.__setattr__(self, "blocks", b)

    @property
    def n(self) -> int:
        return self.blocks.shape[0]

    @property
    def block_shape(self) -> tuple[int, int]:
        return self.blocks.shape[2:]

    def __getitem__(self, li) -> np.ndarray:
        return self.blocks[li[0], li[1]]

    def total(self) -> np.ndarray:
        """Sum of all blocks (the unconditional moment)."""
        return self.blocks.sum(axis=(0, 1))

    def assembled(self) -> np.ndarray:
        n, _, r, c = self.blocks.shape
        return self.blocks.transpose(0, 2, 1, 3).reshape(n * r, n * c)

    def scaled(self, s: float) -> "BlockMatrix":
        return BlockMatrix(self.blocks * s)

    @classmethod
    def zeros(cls, n, n_r, n_c=1):
        return cls(np.zeros((n, n, n_r, n_c)))

    @classmethod
    def identity(cls, n, n_x):
        return cls(np.broadcast_to(np.eye(n_x), (n, n, n_x, n_x)))

    def to_text(self) -> str:
        n, _, r, c = self.blocks.shape
        lines = [f"{n} {r} {c}"]
        lines += [" ".join(f"{v:.17g}" for v in row) for row in self.assembled()]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BlockMatrix":
        rows = [ln.split() for ln in text.splitlines()
                if ln.strip() and not ln.lstrip().startswith("#")]
        try:
            n, r, c = (int(v) for v in rows[0])
            full = np.array([[float(v) for v in row] for row in rows[1:]])
            return cls(full.reshape(n, r, n, c).transpose(0, 2, 1, 3))
        except (ValueError, IndexError) as exc:
            raise DimensionError(f"malformed block matrix text: {exc}") from None


def vec2(bm: BlockMatrix) -> np.ndarray:
    # (l, i, r, c) -> order i, l, c, r with r fastest
    return bm.blocks.transpose(1, 0, 3, 2).reshape(-1).copy()


def vec2_inv(v, n: int, n_r: int, n_c: int = 1) -> BlockMatrix:
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != n * n * n_r * n_c:
        raise DimensionError(f"vector of length {v.size} does not hold {n}x{n} blocks of {n_r}x{n_c}")
    return BlockMatrix(v.reshape(n, n, n_c, n_r).transpose(1, 0, 3, 2))


def matrix_to_text(mat) -> str:
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    lines = [f"{mat.shape[0]} {mat.shape[1]}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in mat]
    return "\n".join(lines) + "\n"


def matrix_from_text(text: str) -> np.ndarray:
    rows = [ln.split() for ln in text.splitlines()
            if ln.strip() and not ln.lstrip().startswith("#")]
    r, c = (int(v) for v in rows[0])
    mat = np.array([[float(v) for v in row] for row in rows[1:]])
    if mat.shape != (r, c):
        raise DimensionError(f"header says {r}x{c}, body is {mat.shape}")
    return mat


def _check(model: MjlsModel, gains: GainSet):
    if gains.n_modes != model.n_modes:
        raise DimensionError(f"{gains.n_modes} gains for {model.n_modes} channel states")
    if gains.gains.shape[1:] != (model.plant.n_u, model.plant.n_x):
        raise DimensionError(
            f"gain shape {gains.gains.shape[1:]} does not match plant "
            f"({model.plant.n_u}, {model.plant.n_x})")
    dim = (model.n_modes * model.n_x) ** 2
    if dim > MAX_LAMBDA_DIM:
        raise DimensionError(
            f"second-moment operator would have dimension {dim} > {MAX_LAMBDA_DIM}")


def build_delta_p(channel: MarkovChannel) -> tuple[np.ndarray, np.ndarray]:
    """``(dP_1, dP_nu)``, both N^2 x N, entry ``(i + N*j, i)`` = ``p_ij`` (times ``nu_i``)."""
    P = channel.tpm
    nu = channel.delivery_prob
    n = P.shape[0]
    d1 = np.hstack([np.diag(P[:, j]) for j in range(n)]).T
    dn = np.hstack([np.diag(nu * P[:, j]) for j in range(n)]).T
    return d1, dn


def build_psi(model: MjlsModel, gains: GainSet) -> np.ndarray:
    _check(model, gains)
    A, B = model.plant.a, model.plant.b
    d1, dn = build_delta_p(model.channel)
    bk = np.hstack([B @ k for k in gains.gains])
    aa = np.hstack([A] * model.n_modes)
    return np.kron(dn, bk) + np.kron(d1, aa)


def build_lambda(model: MjlsModel, gains: GainSet) -> np.ndarray:
    """Matrix of the second-moment operator: ``vec2(L(S)) = Lambda @ vec2(S)``.

    The cross terms ``A S K'B'`` and ``B K S A'`` map to ``(BK) kron A`` and
    ``A kron (BK)`` respectively; both are kept so the identity holds for
    non-symmetric blocks too.
    """
    _check(model, gains)
    A, B = model.plant.a, model.plant.b
    d1, dn = build_delta_p(model.channel)
    top = []
    for k in gains.gains:
        bk = B @ k
        top.append(np.kron(bk, bk) + np.kron(bk, A) + np.kron(A, bk))
    aa = np.kron(A, A)
    return np.kron(dn, np.hstack(top)) + np.kron(d1, np.hstack([aa] * model.n_modes))


def build_upsilon(model: MjlsModel) -> np.ndarray:
    n_x = model.n_x
    d1, _ = build_delta_p(model.channel)
    return np.kron(d1, np.hstack([np.kron(np.eye(n_x), model.plant.sigma_w)] * model.n_modes))


def build_xi(model: MjlsModel) -> np.ndarray:
    n_x = model.n_x
    d1, _ = build_delta_p(model.channel)
    return np.kron(d1, np.hstack([np.eye(n_x * n_x)] * model.n_modes))


@dataclass(frozen=True, eq=False)
class MomentOperators:
    psi: np.ndarray
    lam: np.ndarray
    upsilon: np.ndarray
    xi: np.ndarray


def moment_operators(model: MjlsModel, gains: GainSet) -> MomentOperators:
    return MomentOperators(build_psi(model, gains), build_lambda(model, gains),
                           build_upsilon(model), build_xi(model))


def apply_l(model: MjlsModel, gains: GainSet, s: BlockMatrix) -> BlockMatrix:
    """Second-moment operator evaluated block by block (no Kronecker products)."""
    _check(model, gains)
    A, B = model.plant.a, model.plant.b
    P, nu = model.channel.tpm, model.channel.delivery_prob
    n = model.n_modes
    if s.n != n or s.block_shape != (model.n_x, model.n_x):
        raise DimensionError("operand does not match the model")
    bk = [B @ k for k in gains.gains]
    out = np.zeros_like(s.blocks)
    for i in range(n):
        acc = np.zeros((model.n_x, model.n_x))
        for l in range(n):
            S = s[l, i]
            acc += A @ S @ A.T + nu[i] * (bk[l] @ S @ bk[l].T + A @ S @ bk[l].T + bk[l] @ S @ A.T)
        for j in range(n):
            out[i, j] = P[i, j] * acc
    return BlockMatrix(out)


def apply_t(model: MjlsModel, gains: GainSet, s: BlockMatrix) -> BlockMatrix:
    """Adjoint of :func:`apply_l` under ``<S; T> = sum_ij trace(S_ij' T_ij)``."""
    _check(model, gains)
    A, B = model.plant.a, model.plant.b
    P, nu = model.channel.tpm, model.channel.delivery_prob
    n = model.n_modes
    if s.n != n or s.block_shape != (model.n_x, model.n_x):
        raise DimensionError("operand does not match the model")
    bk = [B @ k for k in gains.gains]
    out = np.zeros_like(s.blocks)
    for i in range(n):
        E = sum(P[i, j] * s[i, j] for j in range(n))
        for l in range(n):
            out[l, i] = (A.T @ E @ A
                         + nu[i] * (bk[l].T @ E @ bk[l] + bk[l].T @ E @ A + A.T @ E @ bk[l]))
    return BlockMatrix(out)


def inner_product(s: BlockMatrix, t: BlockMatrix) -> float:
    return float(np.einsum("lirc,lirc->", s.blocks, t.blocks))


def spectral_radius(m) -> float:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError("spectral radius needs a square matrix")
    if not np.all(np.isfinite(m)):
        raise NumericalError("matrix has non-finite entries")
    if m.shape[0] <= 2000:
        try:
            return float(np.max(np.abs(np.linalg.eigvals(m))))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"eigenvalue solver failed: {exc}") from None
    try:
        vals = sparse_linalg.eigs(m, k=1, which="LM", tol=1e-12, return_eigenvectors=False)
    except sparse_linalg.ArpackNoConvergence as exc:
        raise NumericalError(f"Arnoldi iteration did not converge: {exc}") from None
    return float(np.abs(vals[0]))


def is_ms_stable(model: MjlsModel, gains: GainSet) -> tuple[bool, float]:
    rho = spectral_radius(build_lambda(model, gains))
    return rho < 1.0, rho


def _is_pd(x: np.ndarray, strict=True) -> bool:
    xs = 0.5 * (x + x.T)
    lam = np.linalg.eigvalsh(xs)
    scale = max(np.abs(lam).max(), np.finfo(float).tiny)
    return lam.min() > STRICT_TOL * scale if strict else lam.min() >= -STRICT_TOL * scale


@dataclass(frozen=True, eq=False)
class LyapunovSolution:
    y: BlockMatrix
    residual: float
    block_pd: np.ndarray

    @property
    def all_pd(self) -> bool:
        return bool(np.all(self.block_pd))


def lyapunov_solve(model: MjlsModel, gains: GainSet, z: BlockMatrix) -> LyapunovSolution:
    """Solve ``Y - L(Y) = Z`` for the block matrix ``Y``."""
    lam = build_lambda(model, gains)
    n, n_x = model.n_modes, model.n_x
    if z.n != n or z.block_shape != (n_x, n_x):
        raise DimensionError("Z does not match the model")
    lhs = np.eye(lam.shape[0]) - lam
    try:
        v = np.linalg.solve(lhs, vec2(z))
    except np.linalg.LinAlgError:
        raise NumericalError("I - Lambda is singular: no unique Lyapunov solution") from None
    if not np.all(np.isfinite(v)):
        raise NumericalError("I - Lambda is numerically singular: no unique Lyapunov solution")
    y = vec2_inv(v, n, n_x, n_x)
    res = y.blocks - apply_l(model, gains, y).blocks - z.blocks
    zn = np.linalg.norm(z.blocks)
    rel = float(np.linalg.norm(res) / zn) if zn > 0 else float(np.linalg.norm(res))
    if rel > 1e-8:
        raise NumericalError(f"Lyapunov residual {rel:.3e} exceeds 1e-8 (I - Lambda ill-conditioned)")
    pd = np.array([[_is_pd(y[l, i]) for i in range(n)] for l in range(n)])
    return LyapunovSolution(y, rel, pd)


def stationary_pair_probs(channel: MarkovChannel) -> np.ndarray:
    """``pi[l, i] = Pr(theta_{k-1}=l, theta_k=i)`` under the stationary distribution."""
    return channel.stationary[:, None] * channel.tpm


def _pi_blocks(pi: np.ndarray, n_x: int) -> BlockMatrix:
    return BlockMatrix(pi[:, :, None, None] * np.eye(n_x))


def steady_second_moment(model: MjlsModel, gains: GainSet) -> BlockMatrix:
    """Limit of the conditioned second moments; ``.total()`` is the state covariance."""
    lam = build_lambda(model, gains)
    rho = spectral_radius(lam)
    if rho >= 1.0:
        raise UnstableSystemError(f"rho(Lambda) = {rho:.6f} >= 1: no steady second moment")
    pi_inf = _pi_blocks(stationary_pair_probs(model.channel), model.n_x)
    rhs = build_upsilon(model) @ vec2(pi_inf)
    v = np.linalg.solve(np.eye(lam.shape[0]) - lam, rhs)
    return vec2_inv(v, model.n_modes, model.n_x, model.n_x)


@dataclass(frozen=True, eq=False)
class MomentState:
    m: BlockMatrix
    M: BlockMatrix
    pi: np.ndarray

    def mean(self) -> np.ndarray:
        return self.m.total()[:, 0]

    def second_moment(self) -> np.ndarray:
        return self.M.total()


def initial_moments(model: MjlsModel, x0, initial_mode: int, prev_mode: int | None = None,
                    cov0=None) -> MomentState:
    """Moments of a deterministic (or Gaussian) initial state in a known mode pair."""
    n, n_x = model.n_modes, model.n_x
    prev = initial_mode if prev_mode is None else prev_mode
    x0 = np.asarray(x0, dtype=float).reshape(n_x)
    m = np.zeros((n, n, n_x, 1))
    M = np.zeros((n, n, n_x, n_x))
    m[prev, initial_mode, :, 0] = x0
    M[prev, initial_mode] = np.outer(x0, x0) + (0 if cov0 is None else np.asarray(cov0))
    pi = np.zeros((n, n))
    pi[prev, initial_mode] = 1.0
    return MomentState(BlockMatrix(m), BlockMatrix(M), pi)


def step_moments(model: MjlsModel, gains: GainSet, m: BlockMatrix, M: BlockMatrix,
                 pi) -> tuple[BlockMatrix, BlockMatrix, np.ndarray]:
    """One exact propagation step of first moments, second moments and mode-pair probabilities."""
    _check(model, gains)
    A, B, Sw = model.plant.a, model.plant.b, model.plant.sigma_w
    P, nu = model.channel.tpm, model.channel.delivery_prob
    n, n_x = model.n_modes, model.n_x
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (n, n) or m.blocks.shape != (n, n, n_x, 1) or M.blocks.shape != (n, n, n_x, n_x):
        raise DimensionError("moment operands do not match the model")
    bk = [B @ k for k in gains.gains]
    m_new = np.zeros_like(m.blocks)
    M_new = np.zeros_like(M.blocks)
    mass = pi.sum(axis=0)  # sum_l pi[l, i]
    for i in range(n):
        first = sum(A @ m[l, i] + nu[i] * bk[l] @ m[l, i] for l in range(n))
        second = sum(A @ M[l, i] @ A.T
                     + nu[i] * (bk[l] @ M[l, i] @ bk[l].T + A @ M[l, i] @ bk[l].T
                                + bk[l] @ M[l, i] @ A.T)
                     for l in range(n))
        for j in range(n):
            m_new[i, j] = P[i, j] * first
            M_new[i, j] = P[i, j] * second + Sw * mass[i] * P[i, j]
    pi_new = mass[:, None] * P
    return BlockMatrix(m_new), BlockMatrix(M_new), pi_new


def propagate_moments(model: MjlsModel, gains: GainSet, state: MomentState,
                      steps: int) -> list[MomentState]:
    """Moment states at k = 0..steps."""
    out = [state]
    for _ in range(steps):
        s = out[-1]
        out.append(MomentState(*step_moments(model, gains, s.m, s.M, s.pi)))
    return out


@dataclass(frozen=True, eq=False)
class StabilizabilityCertificate:
    v1: BlockMatrix
    v2: BlockMatrix
    v3: BlockMatrix
    l: np.ndarray  # (N, n_u, n_x)


def build_certificate(model: MjlsModel, gains: GainSet) -> StabilizabilityCertificate:
    """Certificate assembled from the Lyapunov solution with ``Z`` = identity blocks."""
    stable, rho = is_ms_stable(model, gains)
    if not stable:
        raise UnstableSystemError(f"gains are not stabilizing (rho(Lambda) = {rho:.6f})")
    sol = lyapunov_solve(model, gains, BlockMatrix.identity(model.n_modes, model.n_x))
    if not sol.all_pd:
        raise ConstructionError("Lyapunov solution has a block that is not positive definite")
    n = model.n_modes
    y = sol.y.blocks
    v2 = np.empty((n, n, model.n_x, model.plant.n_u))
    v3 = np.empty((n, n, model.plant.n_u, model.plant.n_u))
    for l in range(n):
        for i in range(n):
            v2[l, i] = y[l, i] @ gains[l].T
            w = v2[l, i].T @ np.linalg.solve(y[l, i], v2[l, i])
            v3[l, i] = 0.5 * (w + w.T)
    return StabilizabilityCertificate(sol.y, BlockMatrix(v2), BlockMatrix(v3),
                                      np.array(gains.gains))


def _min_eig(x: np.ndarray, *operands) -> tuple[float, float]:
    """Smallest eigenvalue of the symmetric part and the norm it is judged against.

    For differences such as ``V3 - L V2`` the scale is taken from the operands,
    since the difference itself may vanish exactly.
    """
    lam = np.linalg.eigvalsh(0.5 * (x + x.T))
    scale = max([np.abs(lam).max()] + [np.linalg.norm(o, 2) for o in operands] + [1e-300])
    return float(lam.min()), float(scale)


def verify_certificate(model: MjlsModel, cert: StabilizabilityCertificate) -> tuple[bool, float]:
    """Check the stabilizability matrix inequalities for every block pair.

    Each condition is turned into a "must be non-negative" margin: the
    smallest eigenvalue of ``X`` for ``X > 0`` / ``X >= 0``, of ``-X`` for
    ``X < 0``.  Strict conditions need a margin above ``1e-10 * ||X||``,
    non-strict ones at least ``-1e-10 * ||X||``.  Returns feasibility and the
    smallest margin over all conditions.
    """
    A, B = model.plant.a, model.plant.b
    P, nu = model.channel.tpm, model.channel.delivery_prob
    n = model.n_modes
    v1, v2, v3, L = cert.v1, cert.v2, cert.v3, np.asarray(cert.l)
    if (v1.n != n or v1.block_shape != (model.n_x, model.n_x)
            or v2.block_shape != (model.n_x, model.plant.n_u)
            or v3.block_shape != (model.plant.n_u, model.plant.n_u)
            or L.shape != (n, model.plant.n_u, model.n_x)):
        raise DimensionError("certificate shapes do not match the model")
    feasible = True
    worst = np.inf

    def record(margin, scale, strict):
        nonlocal feasible, worst
        worst = min(worst, margin)
        if strict:
            feasible &= margin > STRICT_TOL * scale
        else:
            feasible &= margin >= -STRICT_TOL * scale

    for i in range(n):
        acc = sum(A @ v1[l, i] @ A.T
                  + nu[i] * (A @ v2[l, i] @ B.T + B @ v2[l, i].T @ A.T + B @ v3[l, i] @ B.T)
                  for l in range(n))
        for j in range(n):
            record(*_min_eig(v1[i, j]), strict=True)
            record(*_min_eig(v3[i, j]), strict=False)
            lmi_a = P[i, j] * acc - v1[i, j]
            record(*_min_eig(-lmi_a, P[i, j] * acc, v1[i, j]), strict=True)
            lv2 = L[i] @ v2[i, j]
            schur = np.block([[v1[i, j], v2[i, j]], [v2[i, j].T, lv2]])
            record(*_min_eig(schur), strict=False)
            record(*_min_eig(v3[i, j] - lv2, v3[i, j], lv2), strict=False)
    return bool(feasible), float(worst)


def gains_from_certificate(cert: StabilizabilityCertificate) -> GainSet:
    return GainSet(np.asarray(cert.l))


def build_classical_lambda(model: MjlsModel, gains: GainSet) -> np.ndarray:
    """Second-moment matrix when the controller sees the current mode instantly.

    State ``Q_j = E(x x' 1{theta=j})`` evolves as
    ``Q_j' = sum_i p_ij [(1 - nu_i) A Q_i A' + nu_i (A + B K_i) Q_i (A + B K_i)']``.
    """
    _check(model, gains)
    A, B = model.plant.a, model.plant.b
    P, nu = model.channel.tpm, model.channel.delivery_prob
    n, n2 = model.n_modes, model.n_x ** 2
    aa = np.kron(A, A)
    out = np.zeros((n * n2, n * n2))
    for i in range(n):
        acl = A + B @ gains[i]
        t = (1.0 - nu[i]) * aa + nu[i] * np.kron(acl, acl)
        for j in range(n):
            out[j * n2:(j + 1) * n2, i * n2:(i + 1) * n2] = P[i, j] * t
    return out


def classical_stabilizability_radius(model: MjlsModel, gains: GainSet) -> float:
    return spectral_radius(build_classical_lambda(model, gains))
