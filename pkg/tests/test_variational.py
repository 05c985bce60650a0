import json
import math

import numpy as np
import pytest

from rwrp_lab.env import (Bernoulli, directed_polymer, linear_potential, make_periodic_environment, make_step_set,
                          zero_potential)
from rwrp_lab.spectral import build_operator, log_spectral_radius
from rwrp_lab.variational import (CertificationError, CocycleField, DivergenceError, PositiveField, dump_minimizer,
                                  first_settled_index, fixed_point_residual, g_lambda_kprime_series,
                                  g_lambda_truncated, k_functional, log_gradient, minimize_kprime, rearranged_lambda,
                                  smoothed_objective, verify_cocycle, w_recursion_residual)
from rwrp_lab.transfer import _torus_tables

S2 = make_step_set(2)
BETA1 = linear_potential(1.0, 2)
ONE_SITE = make_periodic_environment([0.0], (1, 1))
TWO_SITE = make_periodic_environment([0.0, 1.0], (2, 1))


def _torus(seed, periods=(4, 4)):
    rng = np.random.default_rng(seed)
    return make_periodic_environment(rng.uniform(-1, 1, int(np.prod(periods))), periods)


def _log_rho(env, pot=BETA1, steps=S2):
    return log_spectral_radius(build_operator(env, pot, steps)).log_rho


# --- functionals -----------------------------------------------------------------


def test_k_zero_everything():
    F = CocycleField(np.zeros((1, 2)))
    assert k_functional(ONE_SITE, zero_potential(2), S2, F) == pytest.approx(0.0, abs=1e-15)


def test_k_at_perron_vector_equalizes_sites():
    env = _torus(0)
    res = log_spectral_radius(build_operator(env, BETA1, S2))
    assert k_functional(env, BETA1, S2, PositiveField(np.log(res.eigvec))) == pytest.approx(res.log_rho, abs=1e-10)


def test_k_gauge_invariant():
    env = _torus(1)
    g = PositiveField(np.random.default_rng(1).normal(size=16))
    assert k_functional(env, BETA1, S2, g) == pytest.approx(k_functional(env, BETA1, S2, g.shifted(3.7)), abs=1e-13)


def test_k_upper_bounds_log_rho():
    env = _torus(2)
    lr = _log_rho(env)
    rng = np.random.default_rng(2)
    for _ in range(1000):
        g = PositiveField(rng.normal(scale=rng.uniform(0.01, 3), size=16))
        assert k_functional(env, BETA1, S2, g) >= lr - 1e-10


def test_k_field_shape_checked():
    with pytest.raises(ValueError):
        k_functional(TWO_SITE, BETA1, S2, CocycleField(np.zeros((3, 2))))


def test_positive_field_bounds():
    with pytest.raises(ValueError):
        PositiveField([0.0, 1.0], floor=1.5)
    with pytest.raises(ValueError):
        PositiveField([0.0, np.inf])


# --- log-gradient and cocycles -------------------------------------------------------


def test_log_gradient_constant():
    F = log_gradient(PositiveField(np.full(16, 2.0)), _torus(0), S2)
    assert np.all(F.values == 0)


def test_log_gradient_two_site():
    F = log_gradient(PositiveField([0.0, 1.0]), TWO_SITE, S2)
    np.testing.assert_array_equal(F.values[:, 0], [1.0, -1.0])
    assert F.centered_means[0] == 0.0


def test_random_log_gradients_are_cocycles():
    rng = np.random.default_rng(3)
    env = _torus(3, (3, 5))
    for _ in range(100):
        assert verify_cocycle(log_gradient(PositiveField(rng.normal(size=15)), env, S2), env, S2).ok


def test_symmetric_steps_log_gradient_is_cocycle():
    steps = make_step_set(2, "symmetric-nn")
    env = _torus(4, (3, 3))
    F = log_gradient(PositiveField(np.random.default_rng(4).normal(size=9)), env, steps)
    assert verify_cocycle(F, env, steps).ok


def test_zero_field_is_cocycle():
    assert verify_cocycle(CocycleField(np.zeros((16, 2))), _torus(0), S2).ok


def test_constant_one_not_centered():
    rep = verify_cocycle(CocycleField(np.ones((16, 2))), _torus(0), S2)
    assert not rep.ok and not rep.centering_ok


def test_perturbed_log_gradient_reports_cycle():
    env = _torus(5)
    F = log_gradient(PositiveField(np.random.default_rng(5).normal(size=16)), env, S2).values.copy()
    F[6, 1] += 1e-3
    rep = verify_cocycle(CocycleField(F), env, S2, tol=1e-6)
    assert not rep.ok
    assert rep.cycle_violations
    assert all(abs(abs(v) - 1e-3) < 1e-9 for _, _, v in rep.cycle_violations)


# --- minimization ---------------------------------------------------------------------


def test_minimize_zero_potential():
    res = minimize_kprime(_torus(0, (3, 3)), zero_potential(2), S2)
    assert abs(res.value) < 1e-9
    assert np.ptp(res.field.log_g) < 1e-6


def test_minimize_two_site():
    field, value = minimize_kprime(TWO_SITE, BETA1, S2)
    assert value == pytest.approx(math.log((1 + math.e) / 2), abs=1e-9)
    assert field.log_g[0] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_minimize_matches_spectral(seed):
    env = _torus(seed)
    res = minimize_kprime(env, BETA1, S2)
    assert abs(res.value - _log_rho(env)) < 1e-6
    assert np.max(np.abs(res.slack)) < 1e-8


def test_minimize_gauge_invariance():
    env = _torus(7, (3, 4))
    rng = np.random.default_rng(7)
    u0 = rng.normal(size=12)
    a = minimize_kprime(env, BETA1, S2, u0=u0)
    b = minimize_kprime(env, BETA1, S2, u0=u0 + 5.0)
    assert abs(a.value - b.value) <= 1e-9


def test_certification_failure_is_loud():
    env = _torus(8, (3, 3))
    with pytest.raises(CertificationError):
        # one coarse temperature, no polish and a tiny iteration cap cannot reach the Perron root
        minimize_kprime(env, linear_potential(4.0, 2), S2, taus=[1.0], max_iter=1, tol=1e-6,
                        u0=np.arange(9.0) * 3, polish=False)


def test_smoothed_gradient_finite_differences():
    rng = np.random.default_rng(9)
    env = _torus(9, (3, 3))
    logw, nb = _torus_tables(env, BETA1, S2, 0.0)
    h = 1e-6
    for _ in range(100):
        u = rng.normal(size=9)
        tau = float(rng.choice([1.0, 0.1, 0.03]))
        _, g = smoothed_objective(u, logw, nb, tau)
        fd = np.array([(smoothed_objective(u + h * e, logw, nb, tau)[0] - smoothed_objective(u - h * e, logw, nb, tau)[0])
                       / (2 * h) for e in np.eye(9)])
        assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(g), 1e-3)


def test_dump_minimizer(tmp_path):
    res = minimize_kprime(TWO_SITE, BETA1, S2)
    data = json.loads(dump_minimizer(res, tmp_path / "m.json").read_text())
    assert set(data) >= {"value", "u", "slack", "certification_delta"}
    assert abs(data["certification_delta"]) < 1e-6


# --- g_lambda ------------------------------------------------------------------------------


def test_g_lambda_geometric_series():
    g = g_lambda_truncated(ONE_SITE, zero_potential(2), S2, 0.1, 2000)
    assert g.g[0] == pytest.approx(1 / (1 - math.exp(-0.1)), rel=1e-12)
    assert rearranged_lambda(g, ONE_SITE, zero_potential(2), S2, 0.1)[0] == pytest.approx(0.1, abs=1e-12)
    assert k_functional(ONE_SITE, zero_potential(2), S2, g) == pytest.approx(0.0, abs=1e-14)


def test_g_lambda_at_least_one():
    env = _torus(10)
    g = g_lambda_truncated(env, BETA1, S2, _log_rho(env) + 0.2, 50)
    assert np.all(g.g >= 1.0)


def test_g_lambda_diverges_below_free_energy():
    env = _torus(11)
    lr = _log_rho(env)
    with pytest.raises(DivergenceError):
        g_lambda_truncated(env, BETA1, S2, lr - 0.05, 100)
    with pytest.raises(DivergenceError):
        g_lambda_truncated(env, BETA1, S2, lr - 0.05, 100, lambda_q=lr - 0.1)


@pytest.mark.parametrize("seed", range(4))
def test_g_lambda_eventually_feasible(seed):
    env = _torus(seed + 20)
    lam = _log_rho(env) + 0.1
    series = g_lambda_kprime_series(env, BETA1, S2, lam, 300)
    n0 = first_settled_index(series, lam)
    assert n0 is not None and n0 <= 200


def test_g_lambda_monotone_in_lambda():
    env = _torus(30)
    lr = _log_rho(env)
    vals = []
    for eps in (0.4, 0.2, 0.1, 0.05):
        g = g_lambda_truncated(env, BETA1, S2, lr + eps, 3000, lambda_q=lr)
        k = k_functional(env, BETA1, S2, g)
        assert k <= lr + eps + 1e-12
        vals.append(k)
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
    assert vals[-1] - lr < vals[0] - lr


# --- fixed point residuals --------------------------------------------------------------------


def test_fixed_point_perron_vector():
    env = _torus(12)
    res = log_spectral_radius(build_operator(env, BETA1, S2))
    assert fixed_point_residual(PositiveField(np.log(res.eigvec)), env, BETA1, S2, res.log_rho) <= 1e-10


def test_fixed_point_generic_nonsolution():
    env = _torus(13)
    g = PositiveField(np.random.default_rng(13).normal(size=16))
    assert fixed_point_residual(g, env, BETA1, S2, 0.3) > 1e-3


def test_w_recursion_residual():
    model = directed_polymer(Bernoulli(0.5, 0, 1), 1.0, 2)
    env = model.environment(5, 120)
    assert w_recursion_residual(env, model.potential, model.steps, 120).max() <= 1e-12
