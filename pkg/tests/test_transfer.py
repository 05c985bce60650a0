import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import comb, logsumexp

from rwrp_lab.env import (Bernoulli, Box, BoxEnvironment, OutsideBoxError, TruncatedGaussian, all_bernoulli_configurations,
                          directed_polymer, linear_potential, make_periodic_environment, make_step_set,
                          sample_iid_environment, zero_potential)
from rwrp_lab.freeenergy import annealed_free_energy
from rwrp_lab.report import read_csv
from rwrp_lab.transfer import (BATCH_COLUMNS, HorizonError, batch_row, bridge_log_H, endpoint_stats, enumerate_oracle,
                               level_recursion, martingale_W, partition_function, torus_log_partition, write_batch_csv)

S2 = make_step_set(2)


def _random_instance(seed, d, n):
    rng = np.random.default_rng(seed)
    steps = make_step_set(d)
    pot = linear_potential(rng.uniform(-2, 2), d, rng.uniform(-1, 1, d))
    env = sample_iid_environment(TruncatedGaussian(0, 1, 3), Box.cube(-1, n + 2, d), seed)
    return env, pot, steps


def test_zero_potential_multinomial():
    env = sample_iid_environment(Bernoulli(), Box.cube(0, 8, 2), 0)
    k = level_recursion(env, zero_potential(2), S2, 6)
    assert abs(k.log_total) < 1e-14
    for x, lv in k.as_dict().items():
        assert math.exp(lv) == pytest.approx(comb(6, x[0]) / 64, rel=1e-13)


def test_hand_example_two_steps():
    vals = np.zeros((3, 3))
    vals[1, 0] = 1.0
    env = BoxEnvironment(Box((0, 0), (3, 3)), vals)
    pot = linear_potential(1.0, 2)
    k = level_recursion(env, pot, S2, 2)
    # both paths starting with e1 leave from the marked site
    assert math.exp(k.log_total) == pytest.approx((2 * math.e + 2) / 4, rel=1e-15)
    assert k.log_total == pytest.approx(enumerate_oracle(env, pot, S2, 2).log_Z, rel=1e-15)


def test_log_values_sum_to_total():
    env, pot, steps = _random_instance(3, 3, 7)
    k = level_recursion(env, pot, steps, 7)
    assert logsumexp(k.log_values) == pytest.approx(k.log_total, rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), lam=st.floats(-3, 3), n=st.integers(1, 12))
def test_lambda_shift(seed, lam, n):
    env, pot, steps = _random_instance(seed, 2, n)
    a = level_recursion(env, pot, steps, n, 0.0)
    b = level_recursion(env, pot, steps, n, lam)
    assert b.log_total == pytest.approx(a.log_total - lam * n, abs=1e-11)
    np.testing.assert_allclose(b.log_values, a.log_values - lam * n, atol=1e-11)


def test_constant_potential():
    env = sample_iid_environment(Bernoulli(), Box.cube(0, 12, 2), 2)
    pot = linear_potential(0.0, 2, [0.37, 0.37])
    assert partition_function(env, pot, S2, 10) == pytest.approx(3.7, rel=1e-14)


def test_n_zero_is_zero():
    env, pot, steps = _random_instance(1, 2, 1)
    assert partition_function(env, pot, steps, 0) == 0.0


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("d", [2, 3])
def test_matches_oracle(seed, d):
    n = 8 if d == 2 else 6
    env, pot, steps = _random_instance(seed, d, n)
    assert partition_function(env, pot, steps, n) == pytest.approx(enumerate_oracle(env, pot, steps, n).log_Z,
                                                                   rel=1e-12, abs=1e-12)


def test_symmetric_step_set_matches_oracle():
    steps = make_step_set(2, "symmetric-nn")
    env = sample_iid_environment(TruncatedGaussian(0, 1, 3), Box.cube(-7, 8, 2), 5)
    pot = linear_potential(0.8, 4)
    assert partition_function(env, pot, steps, 6) == pytest.approx(enumerate_oracle(env, pot, steps, 6).log_Z,
                                                                   rel=1e-12)


def test_custom_step_set_matches_oracle():
    steps = make_step_set(2, "custom", [(1, 0), (0, 1), (1, 1)])
    env = sample_iid_environment(TruncatedGaussian(0, 1, 3), Box.cube(-1, 14, 2), 6)
    pot = linear_potential(-0.6, 3, [0.1, 0.0, -0.2])
    assert partition_function(env, pot, steps, 6) == pytest.approx(enumerate_oracle(env, pot, steps, 6).log_Z,
                                                                   rel=1e-12)


def test_horizon_error():
    env = sample_iid_environment(Bernoulli(), Box.cube(0, 4, 2), 1)
    with pytest.raises(HorizonError):
        level_recursion(env, zero_potential(2), S2, 5)
    assert issubclass(HorizonError, OutsideBoxError)


def test_shift_covariance():
    env, pot, steps = _random_instance(8, 2, 20)
    a = partition_function(env, pot, steps, 20)
    b = partition_function(env, pot.shifted(0.7), steps, 20)
    assert b - 20 * 0.7 == pytest.approx(a, abs=1e-12)


def test_long_horizon_no_overflow():
    model = directed_polymer(Bernoulli(0.5, 0, 1), 3.0, 2)
    env = model.environment(1, 1500)
    lz = partition_function(env, model.potential, model.steps, 1500)
    assert math.isfinite(lz) and lz > 1000


# --- bridge and endpoint -----------------------------------------------------


def test_bridge_zero_potential_n2():
    env = sample_iid_environment(Bernoulli(), Box.cube(0, 4, 2), 0)
    assert bridge_log_H(env, zero_potential(2), S2, 2, 0.0) == pytest.approx(-math.log(2), rel=1e-15)


def test_bridge_matches_pinned_oracle():
    env, pot, steps = _random_instance(11, 2, 4)
    assert bridge_log_H(env, pot, steps, 4, 0.3) == pytest.approx(
        enumerate_oracle(env, pot, steps, 4, pin=(2, 2)).log_Z - 4 * 0.3, rel=1e-12)


def test_bridge_below_total():
    for seed in range(5):
        env, pot, steps = _random_instance(seed, 3, 9)
        assert bridge_log_H(env, pot, steps, 9, 0.1) <= level_recursion(env, pot, steps, 9, 0.1).log_total


def test_bridge_errors():
    env, pot, steps = _random_instance(1, 2, 5)
    with pytest.raises(ValueError):
        bridge_log_H(env, pot, steps, 3, 0.0)
    sym = make_step_set(2, "symmetric-nn")
    with pytest.raises(ValueError):
        bridge_log_H(env, linear_potential(1.0, 4), sym, 2, 0.0)


def test_oracle_pin_zero_potential():
    env = sample_iid_environment(Bernoulli(), Box.cube(0, 4, 2), 0)
    assert math.exp(enumerate_oracle(env, zero_potential(2), S2, 2, pin=(1, 1)).log_Z) == pytest.approx(0.5)
    assert enumerate_oracle(env, zero_potential(2), S2, 3).log_Z == pytest.approx(0.0, abs=1e-15)


def test_oracle_path_cap():
    env, pot, steps = _random_instance(0, 2, 3)
    with pytest.raises(ValueError):
        enumerate_oracle(env, pot, steps, 30)


def test_oracle_per_path_consistent():
    env, pot, steps = _random_instance(2, 2, 5)
    res = enumerate_oracle(env, pot, steps, 5, keep_paths=True)
    assert len(res.per_path) == 32
    assert logsumexp([w for _, w in res.per_path]) == pytest.approx(res.log_Z, rel=1e-14)


def test_endpoint_zero_potential():
    env = sample_iid_environment(Bernoulli(), Box.cube(0, 4, 2), 0)
    stats = endpoint_stats(env, zero_potential(2), S2, 2)
    order = np.argsort(stats.sites[:, 0])
    np.testing.assert_allclose(stats.mu[order], [0.25, 0.5, 0.25], rtol=1e-15)
    assert stats.overlap == pytest.approx(0.375, rel=1e-15)


def test_endpoint_lambda_independent():
    env, pot, steps = _random_instance(5, 2, 10)
    mus = [endpoint_stats(env, pot, steps, 10, lam=lam).mu for lam in (0.0, 1.0, -2.0)]
    for mu in mus[1:]:
        np.testing.assert_allclose(mu, mus[0], rtol=1e-12)
    assert abs(mus[0].sum() - 1) < 1e-12


def test_overlap_bounds():
    env, pot, steps = _random_instance(4, 2, 10)
    st_ = endpoint_stats(env, pot, steps, 10)
    assert 0 < st_.overlap <= 1
    forced = linear_potential(0.0, 2, [60.0, -60.0])
    assert endpoint_stats(env, forced, steps, 10).overlap == pytest.approx(1.0, abs=1e-12)


# --- martingale ---------------------------------------------------------------


def test_W_zero_and_constant_potential():
    env = sample_iid_environment(Bernoulli(), Box.cube(0, 30, 2), 3)
    assert martingale_W(env, zero_potential(2), S2, 25) == pytest.approx(1.0, rel=1e-13)
    assert martingale_W(env, linear_potential(0.0, 2, [0.4, 0.4]), S2, 25) == pytest.approx(1.0, rel=1e-13)


def test_W_needs_directed():
    steps = make_step_set(2, "symmetric-nn")
    env = sample_iid_environment(Bernoulli(), Box.cube(-5, 5, 2), 3)
    with pytest.raises(ValueError):
        martingale_W(env, zero_potential(4), steps, 3)


def test_W20_mean_one():
    model = directed_polymer(Bernoulli(0.5, 0, 1), 0.5, 2)
    lam_a = annealed_free_energy(model.dist, model.potential, model.steps).value
    w = np.array([martingale_W(model.environment(s, 20), model.potential, model.steps, 20, lam_a)
                  for s in range(1000)])
    assert abs(w.mean() - 1) <= 3 * w.std(ddof=1) / math.sqrt(len(w))


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_annealed_identity_exact(n):
    # every configuration of the sites the n-step walk can leave from
    dist = Bernoulli(0.3, 0.0, 1.0)
    pot = linear_potential(0.9, 2, [0.2, -0.1])
    cone = [(i, j) for i in range(n) for j in range(n) if i + j < n]
    lam_a = annealed_free_energy(dist, pot, S2).value
    total = 0.0
    for values, prob in all_bernoulli_configurations(dist, len(cone)):
        vals = np.zeros((n + 1, n + 1))
        for (i, j), v in zip(cone, values):
            vals[i, j] = v
        env = BoxEnvironment(Box((0, 0), (n + 1, n + 1)), vals)
        total += prob * math.exp(enumerate_oracle(env, pot, S2, n).log_Z)
    assert total == pytest.approx(math.exp(n * lam_a), rel=1e-12)


# --- torus ----------------------------------------------------------------------


def _torus(seed):
    rng = np.random.default_rng(seed)
    return make_periodic_environment(rng.uniform(-1, 1, 12), (3, 4)), linear_potential(1.0, 2)


def test_torus_matches_lattice_recursion():
    env, pot = _torus(0)
    per_site = torus_log_partition(env, pot, S2, 9, 0.2)
    for i, x in enumerate(env.sites()):
        assert per_site[i] == pytest.approx(level_recursion(env, pot, S2, 9, 0.2, start=x).log_total, rel=1e-12)


@pytest.mark.parametrize("m,n", [(1, 1), (2, 5), (6, 6), (3, 0)])
def test_markov_decomposition(m, n):
    env, pot = _torus(1)
    lam = 0.15
    first = level_recursion(env, pot, S2, m, lam)
    rest = torus_log_partition(env, pot, S2, n, lam)
    idx = env.site_index(first.sites)
    combined = logsumexp(first.log_values + rest[idx])
    assert combined == pytest.approx(level_recursion(env, pot, S2, m + n, lam).log_total, rel=1e-12, abs=1e-12)


def test_one_step_residual():
    env, pot = _torus(2)
    lam = -0.3
    prev = torus_log_partition(env, pot, S2, 14, lam)
    nxt = torus_log_partition(env, pot, S2, 15, lam)
    nb = env.site_index(env.sites()[:, None, :] + S2.array[None])
    V = pot(env.values.ravel())
    rhs = logsumexp(V + S2.log_p - lam + prev[nb], axis=1)
    assert np.max(np.abs(np.expm1(rhs - nxt))) < 1e-12


def test_partition_function_periodic_uses_torus():
    env, pot = _torus(3)
    assert partition_function(env, pot, S2, 40) == pytest.approx(
        level_recursion(env, pot, S2, 40).log_total, rel=1e-12)


# --- batch CSV -------------------------------------------------------------------


def test_batch_csv_columns(tmp_path):
    env, pot, steps = _random_instance(1, 2, 6)
    rows = [batch_row(env, pot, steps, n, seed=1, lam=0.1, lambda_q=0.1) for n in (2, 4, 6)]
    path = write_batch_csv(rows, tmp_path / "b.csv", config_hash="abc")
    chash, header, body = read_csv(path)
    assert chash == "abc" and tuple(header) == BATCH_COLUMNS and len(body) == 3
