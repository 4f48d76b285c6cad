import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import linalg

from wncs.errors import DimensionError, DomainError
from wncs.plant import (PENDULUM_Q, PENDULUM_SIGMA_W, PENDULUM_X0, DiscretePlant, LinearPlant,
                        PendulumParams, controllability_check, discretize_zoh,
                        observability_check, pendulum_linearized, pendulum_plant)


def test_unstable_pole_oracle():
    p = PendulumParams()
    M, m, I, l, g = p.cart_mass, p.pend_mass, p.inertia, p.com_distance, p.gravity
    frictionless = np.sqrt(m * g * l * (M + m) / (I * (M + m) + M * m * l ** 2))
    assert frictionless == pytest.approx(5.587, abs=1e-3)
    poles = np.linalg.eigvals(pendulum_linearized(p).a_cont)
    assert poles.real.max() == pytest.approx(5.568, abs=1e-3)
    poles0 = np.linalg.eigvals(pendulum_linearized(PendulumParams(friction=0.0)).a_cont)
    assert poles0.real.max() == pytest.approx(frictionless, rel=1e-10)


def test_frictionless_spectrum_is_symmetric():
    poles = np.sort_complex(np.linalg.eigvals(pendulum_linearized(PendulumParams(friction=0.0)).a_cont))
    assert np.allclose(np.sort_complex(-poles), poles, atol=1e-9)
    assert np.sum(np.abs(poles) < 1e-9) == 2


def test_no_gravity_no_unstable_pole():
    poles = np.linalg.eigvals(pendulum_linearized(PendulumParams(gravity=0.0)).a_cont)
    assert poles.real.max() <= 1e-12


def test_discrete_eigenvalue():
    a = pendulum_plant().a
    assert np.abs(np.linalg.eigvals(a)).max() == pytest.approx(1.058, abs=1e-3)


def test_zero_dynamics_is_integrator():
    a, b = discretize_zoh(LinearPlant(np.zeros((2, 2)), np.array([[1.0], [2.0]])), 0.3)
    assert np.allclose(a, np.eye(2))
    assert np.allclose(b, [[0.3], [0.6]])


def test_scalar_exponential():
    a, b = discretize_zoh(LinearPlant([[-2.0]], [[1.0]]), 0.1)
    assert a[0, 0] == pytest.approx(np.exp(-0.2), rel=1e-14)
    assert b[0, 0] == pytest.approx((1 - np.exp(-0.2)) / 2, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 0.5), st.floats(1e-3, 0.5))
def test_semigroup_and_spectral_mapping(seed, t1, t2):
    rng = np.random.default_rng(seed)
    ac = rng.standard_normal((3, 3))
    lp = LinearPlant(ac, rng.standard_normal((3, 1)))
    a12 = discretize_zoh(lp, t1 + t2)[0]
    assert np.allclose(a12, discretize_zoh(lp, t1)[0] @ discretize_zoh(lp, t2)[0], atol=1e-10)
    lam_d = np.sort_complex(np.linalg.eigvals(discretize_zoh(lp, t1)[0]))
    lam_c = np.sort_complex(np.exp(np.linalg.eigvals(ac) * t1))
    assert np.allclose(lam_d, lam_c, atol=1e-9)


def test_zoh_input_matrix_matches_integral():
    lp = pendulum_linearized(PendulumParams())
    a, b = discretize_zoh(lp, 0.01)
    s = np.linspace(0, 0.01, 2001)
    vals = np.array([linalg.expm(lp.a_cont * t) @ lp.b_cont for t in s])
    assert np.allclose(b, np.trapezoid(vals, s, axis=0), atol=1e-10)


def test_controllability():
    p = pendulum_plant()
    assert controllability_check(p.a, p.b)
    assert observability_check(p.a, PENDULUM_Q)
    assert not controllability_check(np.eye(3), np.zeros((3, 1)))
    assert controllability_check(np.diag([1.0, 2.0, 3.0]), np.ones((3, 1)))
    assert not controllability_check(np.eye(2), np.ones((2, 1)))


def test_fixture_constants():
    v = np.array([0.030, 0.100, 0.010, 0.150])
    assert np.array_equal(PENDULUM_SIGMA_W, np.outer(v, v))
    assert np.array_equal(PENDULUM_Q, np.diag([5000.0, 0.0, 100.0, 0.0]))
    assert np.array_equal(PENDULUM_X0, [0.0, 0.0, np.pi / 10, 0.0])


@pytest.mark.parametrize("kw", [dict(cart_mass=0.0), dict(inertia=-1.0), dict(friction=-0.1),
                                dict(gravity=-9.81)])
def test_invalid_params(kw):
    with pytest.raises(DomainError):
        PendulumParams(**kw)


def test_discrete_plant_validation():
    with pytest.raises(DomainError):
        DiscretePlant(np.eye(2), np.ones((2, 1)), 0.01, [[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(DomainError):
        DiscretePlant(np.eye(2), np.ones((2, 1)), 0.01, -np.eye(2))
    with pytest.raises(DimensionError):
        DiscretePlant(np.eye(2), np.ones((3, 1)), 0.01, np.eye(2))
    with pytest.raises(DomainError):
        DiscretePlant(np.eye(2), np.ones((2, 1)), 0.0, np.eye(2))
    with pytest.raises(DimensionError):
        LinearPlant(np.ones((2, 3)), np.ones((2, 1)))
