import json

import numpy as np
import pytest
from scipy.linalg import eigvals

from conftest import random_params, random_state
from swirs.errors import UndefinedEquilibriumError
from swirs.services.control_service import CostSpec
from swirs.services.model_service import ControlTrajectory, TimeGrid, integrate, rhs
from swirs.services.stability_service import (
    StabilityService,
    analyze_E1,
    analyze_E2,
    check_lyapunov_trajectory,
    classify,
    e2_coordinates,
    equilibrium_E1,
    equilibrium_E2,
    jacobian,
    lyapunov_conditions,
    lyapunov_derivative,
    lyapunov_value,
    spectrum_distance,
)


def test_e1_entry_and_eigenvalue(exp1_params):
    jac = jacobian(equilibrium_E1(), exp1_params)
    assert jac[2, 2] == pytest.approx(0.30)
    assert np.min(np.abs(eigvals(jac) - 0.29)) < 1e-12


def test_jacobian_matches_finite_differences(rng):
    h = 1e-6
    for _ in range(20):
        p = random_params(rng)
        x = random_state(rng)
        numeric = np.empty((5, 5))
        for j in range(5):
            step = np.zeros(5)
            step[j] = h
            numeric[:, j] = (rhs(x + step, None, p) - rhs(x - step, None, p)) / (2 * h)
        np.testing.assert_allclose(jacobian(x, p), numeric, atol=1e-8)


def test_e2_coordinates_for_exp1(exp1_params):
    e2 = equilibrium_E2(exp1_params)
    assert e2.s == pytest.approx(1 / 30)
    assert e2.w == pytest.approx(0.058 / 0.063)
    assert e2.r == pytest.approx(0.0029 / 0.063)
    assert abs(sum(e2.as_array()) - 1.0) < 1e-12


def test_e2_undefined_cases(exp1_params):
    with pytest.raises(UndefinedEquilibriumError):
        e2_coordinates(exp1_params.with_updates(k=0.0))
    with pytest.raises(UndefinedEquilibriumError):
        equilibrium_E2(exp1_params.with_updates(k=0.005))
    report = analyze_E2(exp1_params.with_updates(k=0.005))
    assert not report.in_simplex


def test_e1_closed_form_matches_eigensolver(rng):
    for _ in range(100):
        p = random_params(rng)
        report = analyze_E1(p)
        assert report.closed_form_variants["closed_form"].matches_numerical
        assert spectrum_distance(report.closed_form_eigs, report.eigenvalues) <= 1e-8


def test_e1_conditions(exp1_params, stable_params):
    report = analyze_E1(exp1_params)
    assert [c.satisfied for c in report.proposition_conditions] == [False, False, False]
    assert report.classification == "unstable"
    assert report.has_zero_eigenvalue

    stable = analyze_E1(stable_params)
    assert stable.proposition_satisfied
    assert stable.simplex_classification == "asymptotically-stable"
    assert stable.classification == "marginal"


def test_e2_spectrum_has_zero_and_matches_derived_forms(rng):
    for _ in range(100):
        p = random_params(rng, gamma=rng.uniform(0.05, 0.5))
        if p.k <= p.sigma3:
            p = p.with_updates(k=p.sigma3 + rng.uniform(0.01, 0.5))
        report = analyze_E2(p)
        assert np.min(np.abs(report.eigenvalues)) <= 1e-10
        assert report.closed_form_variants["printed_pq_derived_pair"].matches_numerical
        assert report.closed_form_eigs is not None


def test_e2_derived_conditions_agree_with_simplex_spectrum(rng):
    for _ in range(50):
        p = random_params(rng, gamma=rng.uniform(0.05, 0.5))
        if p.k <= p.sigma3:
            p = p.with_updates(k=p.sigma3 + rng.uniform(0.01, 0.5))
        report = analyze_E2(p)
        margins = [c.margin for c in report.derived_conditions]
        if min(abs(m) for m in margins) < 1e-6:
            continue
        derived_stable = all(c.satisfied for c in report.derived_conditions)
        assert derived_stable == (report.simplex_classification == "asymptotically-stable")


def test_classify():
    assert classify(np.array([-1.0, -0.5])) == "asymptotically-stable"
    assert classify(np.array([-1.0, 0.0])) == "marginal"
    assert classify(np.array([-1.0, 1e-3])) == "unstable"


def test_reports_serialize(exp1_params):
    data = analyze_E2(exp1_params).to_json_dict()
    text = json.dumps(data)
    assert data["label"] == "E2"
    assert isinstance(data["eigenvalues"][0], list)
    assert "printed" in json.loads(text)["closed_form_variants"]


def test_lyapunov_derivative_is_sum_of_rhs(rng):
    for _ in range(50):
        p = random_params(rng)
        x = random_state(rng)
        d = rhs(x, None, p)
        assert lyapunov_derivative(x, p) == pytest.approx(d[1] + d[2] + d[3], abs=1e-14)
    assert lyapunov_value([0.5, 0.1, 0.2, 0.1, 0.1]) == pytest.approx(0.4)


def test_lyapunov_conditions_at_s1(exp1_params, stable_params):
    assert lyapunov_conditions(equilibrium_E1(), stable_params).satisfied
    report = lyapunov_conditions(equilibrium_E1(), exp1_params)
    assert not report.satisfied
    assert all(m < 0 for m in report.margins)


def test_lyapunov_function_decreases_along_trajectories(rng):
    grid = TimeGrid(t_end=200.0, n_steps=4000)
    checked = 0
    while checked < 20:
        p = random_params(rng)
        # a margin of 0.05 gives W + I1 + I2 a decay of at least exp(-10) by T = 200
        if min(lyapunov_conditions(equilibrium_E1(), p).margins) < 0.05:
            continue
        traj = integrate(random_state(rng), ControlTrajectory.zeros(grid), p, grid)
        holds, rise = check_lyapunov_trajectory(traj, p)
        assert holds
        assert rise <= 1e-9
        assert traj.final.i1 + traj.final.i2 < 1e-4
        checked += 1


def test_stability_service(exp1_params):
    result = StabilityService().analyze(exp1_params)
    assert result["success"]
    assert set(result["reports"]) == {"E1", "E2"}

    no_e2 = StabilityService().analyze(exp1_params.with_updates(k=0.0))
    assert set(no_e2["reports"]) == {"E1"}


def test_default_costs_are_ordered():
    costs = CostSpec()
    assert costs.h3.value(1.0) <= min(costs.h1.value(1.0), costs.h2.value(1.0))


def test_e2_meets_e1_when_warning_balances_forgetting(rng):
    for _ in range(20):
        p = random_params(rng)
        p = p.with_updates(sigma3=p.k)
        np.testing.assert_array_equal(equilibrium_E2(p).as_array(), equilibrium_E1().as_array())
        assert spectrum_distance(analyze_E2(p).eigenvalues, analyze_E1(p).eigenvalues) <= 1e-12
