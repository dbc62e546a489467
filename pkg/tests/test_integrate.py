import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetshadow.chart import reduced_field
from hetshadow.integrate import (DivergenceError, NotFoundError, StiffnessError, _rk_step, event_crossing,
                                 flow_map, integrate, integrate_model, model_field, write_trajectory_csv)
from hetshadow.model import ck_model, energy, mass, nonhamiltonian_example


def rotation(nu):
    return lambda c: 1j * nu * c


def saddle(w):
    return w * np.array([1.0, -1.0])


def test_rotation_one_period():
    nu = 1.3
    traj = integrate(rotation(nu), np.array([0.6 + 0.2j]), (0, 2 * np.pi / nu), rtol=1e-10, atol=1e-13)
    assert abs(traj.states[-1][0] - (0.6 + 0.2j)) < 1e-9


def test_saddle_closed_form():
    T, sigma = 10.0, 0.05
    y = flow_map(saddle, np.array([math.exp(-T), sigma]), T, tol=1e-12, atol=1e-20)
    assert y[0] == pytest.approx(1.0, rel=1e-8)
    assert y[1] == pytest.approx(sigma * math.exp(-T), rel=1e-8)


def test_zero_time_is_identity():
    x = np.array([0.1, 0.2])
    assert np.array_equal(flow_map(saddle, x, 0.0), x)
    traj = integrate(saddle, x, (1.0, 1.0))
    assert np.array_equal(traj.states[-1], x)


def test_semigroup_and_reversibility():
    m = ck_model(4)
    f = model_field(m)
    rng = np.random.default_rng(2)
    b = rng.normal(size=(5, 4)) + 1j * rng.normal(size=(5, 4))
    b /= np.sqrt(mass(b))[:, None]
    s, t = 0.7, 1.1
    two = flow_map(f, flow_map(f, b, t, tol=1e-12), s, tol=1e-12)
    one = flow_map(f, b, s + t, tol=1e-12)
    assert np.max(np.abs(two - one)) < 1e-8
    back = flow_map(f, flow_map(f, b, 3.0, tol=1e-12), -3.0, tol=1e-12)
    assert np.max(np.abs(back - b)) < 1e-7


def test_dense_output_matches_endpoints():
    traj = integrate(rotation(1.0), np.array([1.0 + 0j]), (0, 3), dense=True)
    for t in (0.3, 1.7, 2.9):
        assert abs(traj(t)[0] - np.exp(1j * t)) < 1e-9
    no_dense = integrate(rotation(1.0), np.array([1.0 + 0j]), (0, 1))
    with pytest.raises(ValueError):
        no_dense(0.5)


def test_backward_dense_output():
    traj = integrate(saddle, np.array([1.0, 1.0]), (0, -2), dense=True, bound=None)
    assert traj(-1.0)[0] == pytest.approx(math.exp(-1.0), rel=1e-9)


def test_scaled_integration_is_exact_change():
    x0 = np.array([1e-9, 1e-3])
    s = np.array([1e-9, 1e-3])
    a = integrate(saddle, x0, (0, 5), scale=s, rtol=1e-12, atol=1e-14).states[-1]
    assert a[0] == pytest.approx(1e-9 * math.exp(5), rel=1e-10)
    assert a[1] == pytest.approx(1e-3 * math.exp(-5), rel=1e-10)


def _fixed_step_error(h, T=4.0):
    f = rotation(1.0)
    y = np.array([1.0 + 0j])
    for i in range(int(round(T / h))):
        y, _, _ = _rk_step(f, i * h, y, f(y), h)
    return abs(y[0] - np.exp(1j * T))


def test_order_check_on_linear_test():
    # halving the step of the fifth-order pair cuts the error by far more than 4x
    e1, e2 = _fixed_step_error(0.2), _fixed_step_error(0.1)
    assert e1 / e2 >= 4
    assert math.log2(e1 / e2) > 4.5


def test_error_follows_tolerance():
    # the adaptive controller keeps the global error roughly proportional to rtol
    errs = []
    for rtol in (1e-6, 5e-7):
        y = integrate(rotation(1.0), np.array([1.0 + 0j]), (0, 20), rtol=rtol, atol=1e-16).states[-1][0]
        errs.append(abs(y - np.exp(20j)))
    assert 1.5 < errs[0] / errs[1] < 3


def test_errors():
    with pytest.raises(ValueError):
        integrate(saddle, np.ones(2), (0, 1), rtol=0)
    with pytest.raises(DivergenceError):
        integrate(lambda y: y * y, np.array([1.0]), (0, 2))
    with pytest.raises(StiffnessError):
        integrate(lambda y: -1e9 * y, np.array([1.0]), (0, 1), max_steps=50)


def test_linear_event_time():
    T, sigma = 8.0, 0.05
    t, y = event_crossing(lambda x: x, np.array([math.exp(-T)]), (0, sigma), horizon=20)
    assert t == pytest.approx(T + math.log(sigma), abs=1e-9)
    assert y[0] == pytest.approx(sigma, abs=1e-10)


def test_event_along_heteroclinic_line():
    m = ck_model(3)
    d = complex(1, math.sqrt(3)) / 2

    def f(v):
        c = v[..., 0] + 1j * v[..., 1]
        r = reduced_field(m, 1, 2, np.clip(np.abs(c), 0, 1) * np.exp(1j * np.angle(c)))
        return np.stack([r.real, r.imag], axis=-1)

    c0 = 1e-3 * d
    sigma = 0.3
    t, y = event_crossing(f, np.array([c0.real, c0.imag]), lambda v: math.hypot(v[0], v[1]) - sigma,
                          horizon=20)
    assert abs(math.hypot(y[0], y[1]) - sigma) < 1e-10
    assert abs(y[0] * d.imag - y[1] * d.real) < 1e-10


def test_event_not_found():
    with pytest.raises(NotFoundError):
        event_crossing(rotation(1.0), np.array([0.1 + 0j]), lambda c: abs(c[0]) - 0.5, horizon=10)


@pytest.mark.parametrize("model", [ck_model(3), nonhamiltonian_example(3)])
def test_conservation_monitor(model):
    b0 = np.array([math.sqrt(1 - 2e-4), 0.01, 0.01j])
    traj = integrate_model(model, b0, (0, 50), rtol=1e-10, bound=None)
    assert traj.stats["max_mass_drift"] < 1e-8
    assert abs(mass(traj.states[-1]) - 1) < 1e-8
    if "max_energy_drift" in traj.stats:
        assert abs(energy(model, traj.states[-1]) - energy(model, b0)) < 1e-7


def test_batch_matches_single():
    m = ck_model(3)
    f = model_field(m)
    rng = np.random.default_rng(5)
    b = rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3))
    b /= np.sqrt(mass(b))[:, None]
    batch = flow_map(f, b, 2.0, tol=1e-12)
    for i in range(3):
        assert np.max(np.abs(flow_map(f, b[i], 2.0, tol=1e-12) - batch[i])) < 1e-9


def test_trajectory_csv(tmp_path):
    m = ck_model(3)
    traj = integrate_model(m, np.array([0.8, 0.6, 0.0]), (0, 1))
    p = tmp_path / "traj.csv"
    write_trajectory_csv(p, m, traj)
    data = np.loadtxt(p, delimiter=",", skiprows=1)
    assert data.shape == (len(traj.times), 2 * 3 + 3)
    assert np.allclose(data[:, -2], 1.0)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 3.0), st.floats(-1, 1), st.floats(-1, 1))
def test_linear_saddle_property(t, x, y):
    out = flow_map(saddle, np.array([x, y]), t, tol=1e-11, atol=1e-14, bound=None)
    assert np.allclose(out, [x * math.exp(t), y * math.exp(-t)], rtol=1e-8, atol=1e-12)
