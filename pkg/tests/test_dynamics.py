import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from reachguard import dynamics as D


def test_di_vector_field_examples():
    assert D.di_vector_field(0, 0.5, 1) == (0.5, 1)
    assert D.di_vector_field(0.3, 0, 0) == (0, 0)
    assert D.di_vector_field(-1, -0.2, -1) == (-0.2, -1)


def test_di_vector_field_rejects_nan():
    with pytest.raises(D.DomainError):
        D.di_vector_field(float("nan"), 0, 0)


def test_dubins_vector_field_examples():
    np.testing.assert_allclose(D.dubins_vector_field(0, 0, 0, 0), (1, 0, 0))
    np.testing.assert_allclose(D.dubins_vector_field(0, 0, math.pi / 2, 1), (0, 1, 1), atol=1e-15)
    np.testing.assert_allclose(D.dubins_vector_field(1, 1, math.pi, -1), (-1, 0, -1), atol=1e-15)


def test_bike_vector_field_examples():
    assert D.bike_vector_field(0, 0, 12, 0, 0, 0) == (12, 0, 0, 0)
    np.testing.assert_allclose(D.bike_vector_field(0, 0, 3, 0, 1, math.pi / 4), (3, 0, 1, 1.0))
    np.testing.assert_allclose(D.bike_vector_field(0, 0, 0, 1, -1, 0.3), (0, 0, -1, 0))


def test_bike_vector_field_singular_steer():
    with pytest.raises(D.DomainError):
        D.bike_vector_field(0, 0, 1, 0, 0, math.pi / 2)


def test_integrate_step_examples():
    di = D.double_integrator()
    np.testing.assert_allclose(D.integrate_step(di, [0, 0], [1], 0.05), [0, 0.05])
    np.testing.assert_allclose(D.integrate_step(di, [0, 1], [0], 0.1), [0.1, 1])
    db = D.dubins()
    x = D.integrate_step(db, [0, 0, 2 * math.pi - 0.01], [1], 0.05)
    assert x[2] == pytest.approx(0.04, abs=1e-12)


def test_integrate_step_bad_dt():
    with pytest.raises(ValueError):
        D.integrate_step(D.double_integrator(), [0, 0], [0], 0.0)


def test_integrate_step_nonfinite():
    with pytest.raises(D.NumericalError):
        D.integrate_step(D.double_integrator(), [0, 1e308], [0], 1e10)


def test_di_safe_oracle_examples():
    assert D.di_safe_oracle(0, 0)
    assert not D.di_safe_oracle(0.9, 0.7)
    assert D.di_safe_oracle(-1, 0)


def test_sign_rules():
    assert D.di_optimal_control(0.5) == 1
    assert D.di_optimal_control(-0.5) == -1
    assert D.di_optimal_control(0.0) == 1
    assert D.dubins_optimal_control(0.2) == -1
    assert D.dubins_optimal_control(-0.2) == 1
    assert D.dubins_optimal_control(0.0) == -1
    b = ((-4.0, 2.0), (-0.3, 0.3))
    assert D.bike_optimal_control(-0.2, 0.3, b) == (-4.0, 0.3)
    assert D.bike_optimal_control(0.2, -0.3, b) == (2.0, -0.3)
    assert D.bike_optimal_control(0.0, 0.0, b) == (-4.0, 0.3)


def test_clamp_control():
    di = D.double_integrator()
    assert di.clamp_control([1.0 + 5e-10])[0] == 1.0
    with pytest.raises(D.DomainError):
        di.clamp_control([1.1])


def test_get_system_unknown():
    with pytest.raises(ValueError):
        D.get_system("hovercraft")
    assert D.get_system("di").name == "double_integrator"


def test_hamiltonian_maximised_by_sign_rule():
    # any gradient field: the rule must beat 101 sampled controls
    rng = np.random.default_rng(0)
    di = D.double_integrator()
    X = rng.uniform([-1, -2], [1, 2], size=(2000, 2))
    G = rng.normal(size=(2000, 2))
    u_star = di.optimal_control(G)
    h_star = np.sum(di.f(X, u_star) * G, axis=1)
    for a in np.linspace(-1, 1, 101):
        h = np.sum(di.f(X, np.full((2000, 1), a)) * G, axis=1)
        assert np.all(h_star >= h - 1e-12)


def test_bike_rule_maximises_hamiltonian():
    rng = np.random.default_rng(1)
    bk = D.bike()
    X = np.column_stack([rng.normal(size=(500, 2)), rng.uniform(0, 30, 500), rng.uniform(0, 6, 500)])
    G = rng.normal(size=(500, 4))
    h_star = np.sum(bk.f(X, bk.optimal_control(G)) * G, axis=1)
    for a in np.linspace(-4, 2, 11):
        for d in np.linspace(-0.3, 0.3, 11):
            h = np.sum(bk.f(X, np.tile([a, d], (500, 1))) * G, axis=1)
            assert np.all(h_star >= h - 1e-9)


@settings(max_examples=200, deadline=None)
@given(phi=st.floats(-50, 50), u=st.floats(-1, 1), dt=st.floats(1e-4, 1.0))
def test_wrap_range(phi, u, dt):
    x = D.integrate_step(D.dubins(), [0.0, 0.0, phi], [u], dt)
    assert 0.0 <= x[2] < 2 * math.pi


@settings(max_examples=100, deadline=None)
@given(v=st.floats(0, 10), phi=st.floats(0, 6.28), a=st.floats(-4, 2), d=st.floats(-0.3, 0.3))
def test_euler_rk4_agree(v, phi, a, d):
    bk = D.bike()
    x = np.array([1.0, -2.0, v, phi])
    e = D.integrate_step(bk, x, [a, d], 1e-3, "euler")
    r = D.integrate_step(bk, x, [a, d], 1e-3, "rk4")
    diff = e - r
    diff[3] = (diff[3] + math.pi) % (2 * math.pi) - math.pi
    assert np.max(np.abs(diff)) <= 1e-5


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-2, 2), v=st.floats(-2, 2), phi=st.floats(0, 6.28), u=st.floats(-1, 1))
def test_euler_rk4_agree_classical(x, v, phi, u):
    di = D.double_integrator()
    e = D.integrate_step(di, [x, v], [u], 1e-3, "euler")
    r = D.integrate_step(di, [x, v], [u], 1e-3, "rk4")
    assert np.max(np.abs(e - r)) <= 1e-5
    db = D.dubins()
    e = D.integrate_step(db, [x, v, phi], [u], 1e-3, "euler")
    r = D.integrate_step(db, [x, v, phi], [u], 1e-3, "rk4")
    diff = e - r
    diff[2] = (diff[2] + math.pi) % (2 * math.pi) - math.pi
    assert np.max(np.abs(diff)) <= 1e-5


def _brake_sim(x, v, dt=1e-3, horizon=10.0):
    # full brake against the direction of motion until stopped
    x = x.copy()
    v = v.copy()
    ok = np.abs(x) <= 1.0
    for _ in range(int(horizon / dt)):
        a = -np.sign(v)
        v_new = v + a * dt
        v_new = np.where(np.sign(v_new) != np.sign(v), 0.0, v_new)
        x = x + 0.5 * (v + v_new) * dt
        v = v_new
        ok &= np.abs(x) <= 1.0
        if not np.any(v):
            break
    return ok


def test_oracle_matches_forward_simulation():
    xs = np.linspace(-1.2, 1.2, 201)
    vs = np.linspace(-2, 2, 201)
    X, Vv = np.meshgrid(xs, vs, indexing="ij")
    sim = _brake_sim(X.ravel(), Vv.ravel())
    ora = D.di_safe_oracle(X.ravel(), Vv.ravel())
    assert np.mean(sim == ora) >= 0.999
