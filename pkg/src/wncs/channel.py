"""
Analytic log-normal SNIR channel and its finite-state Markov abstractions.

The SNIR in dB, ``Gamma``, is normally distributed with mean ``mu_db`` and
standard deviation ``sigma_db``.  Bit and packet error ratios follow the
O-QPSK DSSS expression used by IEEE 802.15.4 radios without forward error
correction::

    R_b(g) = 1/30 * sum_{i=2}^{16} (-1)^i C(16, i) exp(20 g (1 - i) / i)
    R_p(g) = 1 - (1 - R_b(g))^L_F

Two abstractions are provided: a Gilbert (two-state) channel split at a
single SNIR threshold, and a general finite-state Markov channel (FSMC)
whose transition matrix comes from a bivariate normal model of consecutive
slots.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import integrate, stats

from .errors import ConstructionError, DomainError, NumericalError

# Quadrature is restricted to mu +/- this many standard deviations.
TAIL_SIGMAS = 10.0
QUAD_ABS_TOL = 1e-12

_BER_I = np.arange(2, 17)
_BER_COEF = np.array([(-1.0) ** i * math.comb(16, int(i)) for i in _BER_I]) / 30.0
_BER_RATE = 20.0 * (1.0 - _BER_I) / _BER_I


@dataclass(frozen=True)
class AnalyticChannel:
    """Log-normal SNIR channel, ``Gamma ~ N(mu_db, sigma_db**2)`` in dB."""

    mu_db: float
    sigma_db: float
    frame_bits: int = 208
    slot_period_s: float = 0.01

    def __post_init__(self):
        if not np.isfinite(self.mu_db):
            raise DomainError("mu_db must be finite")
        if not self.sigma_db > 0:
            raise DomainError(f"sigma_db must be positive, got {self.sigma_db}")
        if int(self.frame_bits) != self.frame_bits or self.frame_bits < 1:
            raise DomainError(f"frame_bits must be a positive integer, got {self.frame_bits}")
        if not self.slot_period_s > 0:
            raise DomainError(f"slot_period_s must be positive, got {self.slot_period_s}")

    def cdf(self, gamma_db):
        return stats.norm.cdf(gamma_db, loc=self.mu_db, scale=self.sigma_db)

    def pdf(self, gamma_db):
        return stats.norm.pdf(gamma_db, loc=self.mu_db, scale=self.sigma_db)

    @property
    def support(self) -> tuple[float, float]:
        return (self.mu_db - TAIL_SIGMAS * self.sigma_db,
                self.mu_db + TAIL_SIGMAS * self.sigma_db)


@dataclass(frozen=True)
class GilbertSpec:
    threshold_db: float
    epsilon: float

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise DomainError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not np.isfinite(self.threshold_db):
            raise DomainError("threshold_db must be finite")


@dataclass(frozen=True, eq=False)
class MarkovChannel:
    """Finite-state Markov channel.

    Parameters
    ----------
    tpm : (N, N) array_like
        Row-stochastic transition matrix, ``tpm[i, j] = Pr(theta_{k+1}=j | theta_k=i)``.
    delivery_prob : (N,) array_like
        Per-state packet delivery probability.
    info : dict, optional
        Free-form diagnostics recorded by the constructor that built the
        channel (thresholds, unclamped PER values, burst length, ...).

    The stationary distribution is computed once at construction and the
    chain is rejected if it is not ergodic.
    """

    tpm: np.ndarray
    delivery_prob: np.ndarray
    info: dict = field(default_factory=dict, compare=False)
    stationary: np.ndarray = field(init=False, compare=False)

    def __post_init__(self):
        tpm = np.array(self.tpm, dtype=float, copy=True)
        nu = np.array(self.delivery_prob, dtype=float, copy=True).reshape(-1)
        if tpm.ndim != 2 or tpm.shape[0] != tpm.shape[1]:
            raise ConstructionError(f"tpm must be square, got shape {tpm.shape}")
        if nu.shape[0] != tpm.shape[0]:
            raise ConstructionError(
                f"delivery_prob has {nu.shape[0]} entries for {tpm.shape[0]} states")
        if not np.all(np.isfinite(tpm)) or np.any(tpm < 0):
            raise ConstructionError("tpm entries must be finite and non-negative")
        row_err = np.max(np.abs(tpm.sum(axis=1) - 1.0))
        if row_err > 1e-12:
            raise ConstructionError(f"tpm rows must sum to 1 (max deviation {row_err:.3e})")
        if np.any(nu < 0) or np.any(nu > 1):
            raise ConstructionError("delivery probabilities must lie in [0, 1]")
        tpm.flags.writeable = False
        nu.flags.writeable = False
        p = stationary_distribution(tpm)
        p.flags.writeable = False
        object.__setattr__(self, "tpm", tpm)
        object.__setattr__(self, "delivery_prob", nu)
        object.__setattr__(self, "stationary", p)

    @property
    def n_states(self) -> int:
        return self.tpm.shape[0]

    @property
    def mean_delivery(self) -> float:
        """Stationary-average delivery probability ``sum_i p_i nu_i``."""
        return float(self.stationary @ self.delivery_prob)

    def to_text(self) -> str:
        lines = [str(self.n_states)]
        lines += [" ".join(f"{v:.17g}" for v in row) for row in self.tpm]
        lines.append(" ".join(f"{v:.17g}" for v in self.delivery_prob))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MarkovChannel":
        rows = [ln.split() for ln in text.splitlines()
                if ln.strip() and not ln.lstrip().startswith("#")]
        try:
            n = int(rows[0][0])
            tpm = np.array([[float(v) for v in r] for r in rows[1:1 + n]])
            nu = np.array([float(v) for v in rows[1 + n]])
        except (IndexError, ValueError) as exc:
            raise ConstructionError(f"malformed Markov channel text: {exc}") from None
        if len(rows) != n + 2 or len(rows[0]) != 1:
            raise ConstructionError("expected N, then N rows of the TPM, then the delivery vector")
        return cls(tpm, nu)


def bernoulli_channel(delivery: float) -> MarkovChannel:
    """Single-state channel with i.i.d. deliveries."""
    return MarkovChannel(np.ones((1, 1)), np.array([delivery]), info={"kind": "bernoulli"})


def ber(gamma_linear):
    """Bit error ratio of O-QPSK DSSS at linear SNIR ``gamma_linear``.

    Accepts scalars or arrays.  Values are clamped at 0 against floating-point
    undershoot; the sum itself never exceeds 0.5.
    """
    g = np.asarray(gamma_linear, dtype=float)
    if np.any(~(g > 0)):
        raise DomainError("gamma_linear must be positive")
    terms = _BER_COEF * np.exp(np.multiply.outer(g, _BER_RATE))
    out = np.clip(terms.sum(axis=-1), 0.0, 0.5)
    return float(out) if out.ndim == 0 else out


def per(gamma_linear, frame_bits: int, method: str = "stable"):
    """Packet error ratio ``1 - (1 - R_b)^frame_bits``.

    ``method="stable"`` evaluates ``-expm1(L * log1p(-R_b))`` and keeps full
    relative accuracy for tiny bit error ratios.  ``method="direct"``
    evaluates the textbook expression in binary64; once ``R_b`` falls under
    half an ulp of 1 the result collapses to exactly 0.
    """
    if frame_bits < 0:
        raise DomainError("frame_bits must be non-negative")
    b = ber(gamma_linear)
    if frame_bits == 0:
        return 0.0 if np.ndim(b) == 0 else np.zeros_like(b)
    if method == "stable":
        out = -np.expm1(frame_bits * np.log1p(-np.asarray(b)))
    elif method == "direct":
        out = 1.0 - (1.0 - np.asarray(b)) ** frame_bits
    else:
        raise DomainError(f"unknown PER method {method!r}")
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def _per_db(gamma_db, frame_bits):
    return per(10.0 ** (gamma_db / 10.0), frame_bits)


def _quad(func, lo, hi, points=None):
    if hi <= lo:
        return 0.0
    pts = None
    if points:
        pts = [p for p in points if lo < p < hi] or None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err, *rest = integrate.quad(func, lo, hi, epsabs=QUAD_ABS_TOL, epsrel=1e-10,
                                         limit=400, points=pts, full_output=1)
    if err > max(1e3 * QUAD_ABS_TOL, 1e-9 * abs(val)):
        raise NumericalError(
            f"quadrature on [{lo:.3g}, {hi:.3g}] did not converge (achieved abs error {err:.3e})")
    return val


# PER falls from ~1 to ~0 between roughly -15 dB and +8 dB; splitting the
# interval there keeps the adaptive scheme from missing the transition.
_PER_BREAKS = (-15.0, -10.0, -5.0, 0.0, 3.0, 6.0, 9.0)


def _region_per_moment(ch: AnalyticChannel, lo: float, hi: float, power: int = 1) -> float:
    """``integral_lo^hi R_p(Gamma)**power f(Gamma) dGamma`` over the truncated support."""
    s_lo, s_hi = ch.support
    lo, hi = max(lo, s_lo), min(hi, s_hi)
    return _quad(lambda a: _per_db(a, ch.frame_bits) ** power * ch.pdf(a), lo, hi, _PER_BREAKS)


def expected_per(ch: AnalyticChannel) -> tuple[float, float]:
    """Mean and variance of the packet error ratio under the SNIR distribution."""
    m1 = _region_per_moment(ch, -np.inf, np.inf, 1)
    m2 = _region_per_moment(ch, -np.inf, np.inf, 2)
    return m1, max(m2 - m1 * m1, 0.0)


def burst_length(ch: AnalyticChannel, epsilon: float, threshold_db: float) -> int:
    """Number of consecutive below-threshold slots whose i.i.d. probability drops under ``epsilon``.

    ``L_B = ceil(ln(epsilon) / ln(F(threshold_db)))`` with ``F`` the SNIR CDF.
    """
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not np.isfinite(threshold_db):
        raise DomainError("threshold_db must be finite")
    f = float(ch.cdf(threshold_db))
    if f <= 0.0 or f >= 1.0:
        raise DomainError(
            f"threshold {threshold_db} dB is too far in the tail (CDF = {f}); burst length undefined")
    return int(math.ceil(math.log(epsilon) / math.log(f)))


def per_threshold_for(epsilon_per: float, frame_bits: int, method: str = "stable",
                      tol_db: float = 1e-6) -> float:
    """Smallest SNIR in dB at which the packet error ratio is at most ``epsilon_per``.

    Found by bisection on the monotone PER curve.  Raises ``DomainError``
    when every SNIR satisfies the bound, i.e. ``epsilon_per`` is at or above
    the ``gamma -> 0`` limit ``1 - 2**-frame_bits``.
    """
    if not 0.0 < epsilon_per < 1.0:
        raise DomainError(f"epsilon_per must lie in (0, 1), got {epsilon_per}")
    sup = 1.0 - 0.5 ** frame_bits
    if epsilon_per >= sup:
        raise DomainError(
            f"epsilon_per={epsilon_per} is at or above the PER supremum {sup} "
            "(gamma -> 0 domain edge); no finite threshold")

    def ok(gdb):
        return per(10.0 ** (gdb / 10.0), frame_bits, method) <= epsilon_per

    hi = 0.0
    while not ok(hi):
        hi += 10.0
        if hi > 200.0:
            raise NumericalError("PER does not reach epsilon below 200 dB")
    lo = hi - 10.0
    while ok(lo):
        lo -= 10.0
        if lo < -400.0:
            raise DomainError("PER bound holds down to -400 dB; domain edge")
    while hi - lo > tol_db:
        mid = 0.5 * (lo + hi)
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def build_gilbert(ch: AnalyticChannel, spec: GilbertSpec, burst_rule: str = "tail") -> MarkovChannel:
    """Two-state Gilbert channel split at ``spec.threshold_db``.

    State 0 is the bad state (SNIR below threshold), state 1 the good one.
    Stationary probabilities and per-state PER come from the analytic
    model; the good-state PER is set to 0 when it falls below
    ``spec.epsilon``.  The remaining free parameter, the bad-state
    self-transition ``p00``, is fixed by ``burst_rule``:

    ``"tail"``
        ``p_bad * p00**(L_B - 1) = epsilon``: a run of ``L_B`` bad slots has
        probability ``epsilon``.
    ``"mean"``
        ``1 / (1 - p00) = L_B``: the mean bad sojourn equals ``L_B``.

    The good-to-bad probability then follows from stationarity.
    """
    eps = spec.epsilon
    th = spec.threshold_db
    p_bad = float(ch.cdf(th))
    lo, hi = ch.support
    if p_bad < 1e-12 or th <= lo:
        raise ConstructionError(f"bad region below {th} dB carries no probability mass")
    if 1.0 - p_bad < 1e-12 or th >= hi:
        raise ConstructionError(f"good region above {th} dB carries no probability mass")
    p_good = 1.0 - p_bad
    per_bad = _region_per_moment(ch, -np.inf, th) / p_bad
    per_good_raw = _region_per_moment(ch, th, np.inf) / p_good
    per_good = 0.0 if per_good_raw < eps else per_good_raw

    lb = burst_length(ch, eps, th)
    if burst_rule == "tail":
        if lb < 2:
            raise ConstructionError(f"burst length {lb} leaves p00 undetermined")
        p00 = (eps / p_bad) ** (1.0 / (lb - 1))
    elif burst_rule == "mean":
        p00 = 1.0 - 1.0 / lb
    else:
        raise DomainError(f"unknown burst_rule {burst_rule!r}")
    if not 0.0 < p00 < 1.0:
        raise ConstructionError(f"bad-state self-transition {p00} is outside (0, 1)")
    p01 = 1.0 - p00
    p10 = p_bad * p01 / p_good
    if not 0.0 <= p10 <= 1.0:
        raise ConstructionError(f"good-to-bad transition {p10} is outside [0, 1]")
    tpm = np.array([[p00, p01], [p10, 1.0 - p10]])
    info = {
        "kind": "gilbert",
        "threshold_db": th,
        "epsilon": eps,
        "burst_rule": burst_rule,
        "burst_length": lb,
        "region_prob": [p_bad, p_good],
        "per_bad": per_bad,
        "per_good_unclamped": per_good_raw,
    }
    return MarkovChannel(tpm, np.array([1.0 - per_bad, 1.0 - per_good]), info=info)


def _joint_region_prob(za: tuple[float, float], zb: tuple[float, float], corr: float) -> float:
    """Pr(Z1 in za, Z2 in zb) for standard bivariate normal with correlation ``corr``."""
    a0, a1 = max(za[0], -TAIL_SIGMAS), min(za[1], TAIL_SIGMAS)
    if a1 <= a0:
        return 0.0
    if corr == 0.0:
        return float((stats.norm.cdf(a1) - stats.norm.cdf(a0))
                     * (stats.norm.cdf(zb[1]) - stats.norm.cdf(zb[0])))
    s = math.sqrt(1.0 - corr * corr)

    def inner(z):
        return stats.norm.pdf(z) * (stats.norm.cdf((zb[1] - corr * z) / s)
                                    - stats.norm.cdf((zb[0] - corr * z) / s))

    # the conditional CDF is steep near z = zb/corr; split there
    pts = [b / corr for b in zb if np.isfinite(b)]
    return _quad(inner, a0, a1, pts)


def build_fsmc(ch: AnalyticChannel, thresholds_db: Sequence[float], corr: float = 0.0,
               clamp_below: float | None = None) -> MarkovChannel:
    """Finite-state Markov channel from a partition of the SNIR range.

    ``corr`` is the correlation coefficient between the SNIR of consecutive
    slots, ``(Gamma_k, Gamma_{k+1})`` being jointly normal.  Per-state PER
    values below ``clamp_below`` are set to 0.
    """
    th = np.asarray(list(thresholds_db), dtype=float)
    if th.size and np.any(np.diff(th) <= 0):
        raise DomainError("thresholds must be strictly increasing")
    if not 0.0 <= corr < 1.0:
        raise DomainError(f"corr must lie in [0, 1), got {corr}")
    edges = np.concatenate(([-np.inf], th, [np.inf]))
    n = edges.size - 1
    z = (edges - ch.mu_db) / ch.sigma_db
    p = np.array([stats.norm.cdf(z[i + 1]) - stats.norm.cdf(z[i]) for i in range(n)])
    if np.any(p < 1e-12):
        bad = int(np.argmin(p))
        raise ConstructionError(f"region {bad} ({edges[bad]}, {edges[bad + 1]}) dB is empty")
    rp = np.array([_region_per_moment(ch, edges[i], edges[i + 1]) / p[i] for i in range(n)])
    raw = rp.copy()
    if clamp_below is not None:
        rp[rp < clamp_below] = 0.0
    joint = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            joint[i, j] = _joint_region_prob((z[i], z[i + 1]), (z[j], z[j + 1]), corr)
    tpm = joint / joint.sum(axis=1, keepdims=True)
    info = {"kind": "fsmc", "thresholds_db": th.tolist(), "corr": corr,
            "region_prob": p.tolist(), "per_unclamped": raw.tolist()}
    return MarkovChannel(tpm, 1.0 - rp, info=info)


def stationary_distribution(tpm) -> np.ndarray:
    """Stationary distribution of an ergodic transition matrix.

    Solves ``p^T (P - I) = 0`` with the normalisation ``sum(p) = 1``
    appended as an extra equation.  Chains with more than one eigenvalue on
    the unit circle (reducible with several recurrent classes, or periodic)
    are rejected.
    """
    P = np.asarray(tpm, dtype=float)
    n = P.shape[0]
    lam = np.linalg.eigvals(P)
    n_unit = int(np.sum(np.abs(lam) > 1.0 - 1e-9))
    if n_unit != 1:
        raise ConstructionError(
            f"chain is not ergodic: {n_unit} eigenvalues on the unit circle")
    lhs = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    p, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
    p = np.clip(p, 0.0, None)
    return p / p.sum()
