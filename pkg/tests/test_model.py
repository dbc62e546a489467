import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hetshadow.integrate import integrate, model_field
from hetshadow.model import (ConfigError, InvalidStateError, LatticeModel, check_hypotheses, ck_model,
                             dissipation_R, eval_field, load_model, mass, mass_derivative,
                             mass_rate_from_field, model_from_dict, model_to_dict, nonhamiltonian_example,
                             odd_coupling, random_sphere_states, with_extra)


def states(n, count=20, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return random_sphere_states(n, count, rng) * scale


def test_ck_field_at_first_torus():
    b = np.zeros(4, dtype=complex)
    b[0] = 1.0
    f = eval_field(ck_model(4), b)
    assert f[0] == pytest.approx(-1j)
    assert np.all(f[1:] == 0)


def test_ck_field_by_hand():
    # b_l' = -i sum_m a_lm b_m^2 conj(b_l) written out for three modes
    b = np.array([0.3 + 0.1j, -0.5 + 0.2j, 0.4 - 0.6j])
    A = np.array([[1, -2, 0], [-2, 1, -2], [0, -2, 1]])
    expect = np.array([-1j * sum(A[l, m] * b[m] ** 2 for m in range(3)) * np.conj(b[l]) for l in range(3)])
    assert np.allclose(eval_field(ck_model(3), b), expect, atol=1e-15)


@pytest.mark.parametrize("model", [ck_model(5), nonhamiltonian_example(5)])
def test_zero_mode_stays_zero(model):
    b = states(5)
    for k in range(5):
        bk = b.copy()
        bk[:, k] = 0
        assert np.all(eval_field(model, bk)[:, k] == 0)


def test_nonhamiltonian_with_zero_rho_is_hamiltonian():
    b = states(4, scale=1.3)
    m0 = LatticeModel(ck_model(4).A, nonhamiltonian_example(4).C, 0.0, "NonHamiltonian")
    assert np.array_equal(eval_field(m0, b), eval_field(ck_model(4), b))


def test_mass_derivative_hamiltonian_is_zero():
    assert np.all(mass_derivative(ck_model(3), states(3, scale=1.7)) == 0)


def test_mass_conserved_on_sphere_for_dissipative_model():
    m = nonhamiltonian_example(4)
    assert np.max(np.abs(mass_rate_from_field(m, states(4)))) < 1e-14


def test_mass_rate_off_sphere_matches_finite_difference():
    m = nonhamiltonian_example(3)
    b0 = states(3, count=1, seed=3)[0] * np.sqrt(2.0)
    assert mass(b0) == pytest.approx(2.0)
    expect = 2 * m.rho * dissipation_R(m, b0) * (2.0 - 1.0)
    assert mass_derivative(m, b0) == pytest.approx(expect, rel=1e-12)
    h = 1e-4
    f = model_field(m)
    fwd = integrate(f, b0, (0, h), rtol=1e-13, atol=1e-15).states[-1]
    bwd = integrate(f, b0, (0, -h), rtol=1e-13, atol=1e-15).states[-1]
    fd = (mass(fwd) - mass(bwd)) / (2 * h)
    assert fd == pytest.approx(expect, rel=1e-6)


@pytest.mark.parametrize("model", [ck_model(3), ck_model(6), nonhamiltonian_example(4)])
def test_hypotheses_pass(model):
    rep = check_hypotheses(model)
    assert rep.passed, rep.failures
    assert max(rep.violations.values()) < 1e-12


def test_non_hermitian_flagged():
    A = ck_model(3).A.copy()
    A[0, 1] = -2 + 0.5j
    rep = check_hypotheses(LatticeModel(A))
    assert not rep.flags["hermitian"]
    assert "hermitian" in rep.failures


def test_sign_flip_exact_for_polynomial_field():
    m = ck_model(4)
    b = states(4)
    s = np.array([-1.0, 1, 1, 1])
    assert np.array_equal(eval_field(m, s * b), s * eval_field(m, b))


def test_odd_coupling_breaks_sign_symmetry_only():
    m = with_extra(ck_model(3), odd_coupling(0.5))
    rep = check_hypotheses(m)
    assert rep.violations["sign"] > 1e-3
    assert rep.violations["phase"] < 1e-12
    assert rep.violations["hyperplane"] == 0


def test_invalid_state_rejected():
    with pytest.raises(InvalidStateError):
        eval_field(ck_model(3), [1.0, np.nan, 0])


def test_config_round_trip(tmp_path):
    m = nonhamiltonian_example(3, rho=0.05)
    p = tmp_path / "m.json"
    p.write_text(json.dumps(model_to_dict(m)))
    m2 = load_model(p)
    assert np.array_equal(m2.A, m.A) and np.array_equal(m2.C, m.C) and m2.rho == m.rho
    b = states(3)
    assert np.array_equal(eval_field(m2, b), eval_field(m, b))


@pytest.mark.parametrize("cfg", [{"preset": "nope"}, {"A": [[1, 2], [2, 1]]}, {"n": 3},
                                 {"A": [[1, 0, 0], [0, 1], [0, 0, 1]]}, {"A": [["x", 0, 0]] * 3}])
def test_bad_configs(cfg):
    with pytest.raises(ConfigError):
        model_from_dict(cfg)


def test_bad_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{")
    with pytest.raises(ConfigError):
        load_model(p)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 2 * np.pi), st.integers(0, 10_000))
def test_phase_equivariance(theta, seed):
    m = nonhamiltonian_example(4)
    b = states(4, count=1, seed=seed, scale=1.2)[0]
    rot = np.exp(1j * theta)
    err = np.max(np.abs(eval_field(m, rot * b) - rot * eval_field(m, b)))
    assert err < 1e-12 * np.linalg.norm(b) ** 3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.3, 2.0))
def test_mass_rate_identity(seed, scale):
    m = nonhamiltonian_example(3)
    b = states(3, count=1, seed=seed, scale=scale)[0]
    lhs = mass_rate_from_field(m, b)
    rhs = mass_derivative(m, b)
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))
