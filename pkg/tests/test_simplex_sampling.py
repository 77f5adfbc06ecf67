import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from conftest import cauchy_poe, random_poe, skew_heavy_tail_poe, two_point_poe
from poevi.errors import EmptyModelError, NonFiniteError, NormalizabilityError
from poevi.poe_model import Expert, MixtureComponent, PoEDensity, poe_unnorm_log_density
from poevi.simplex_sampling import (
    WeightedBatch,
    draw_weighted_batch,
    effective_sample_size,
    estimate_log_normalizer,
    expectation,
    halton_points,
    sample_dirichlet,
    sample_student_t,
)


def quad_moments(poe, lo=-np.inf, hi=np.inf):
    f = lambda x: np.exp(poe_unnorm_log_density(poe, [x]))
    z0, _ = integrate.quad(f, lo, hi, limit=400)
    z1, _ = integrate.quad(lambda x: x * f(x), lo, hi, limit=400)
    return z0, z1 / z0


# --- Dirichlet


def test_dirichlet_single_component():
    np.testing.assert_array_equal(sample_dirichlet([2.5], 0, size=5), np.ones((5, 1)))
    np.testing.assert_array_equal(sample_dirichlet([2.5], 0), [1.0])


def test_dirichlet_mean():
    w = sample_dirichlet([1.0, 1.0], 1, size=100_000)
    np.testing.assert_allclose(w.mean(axis=0), [0.5, 0.5], atol=0.01)


def test_dirichlet_simplex_invariants():
    w = sample_dirichlet([2.0, 2.0, 2.0], 2, size=10_000)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_dirichlet_prunes_tiny_weights():
    w = sample_dirichlet([1.0, 1e-12, 2.0], 3, size=1000)
    np.testing.assert_array_equal(w[:, 1], 0.0)


def test_dirichlet_all_pruned():
    with pytest.raises(EmptyModelError):
        sample_dirichlet([1e-12, 0.0], 0)


# --- Student-t


def _t_component(d, nu):
    return MixtureComponent(np.zeros(d), np.eye(d), nu, 0.0, 0.0)


def test_student_t_moments():
    gen = np.random.default_rng(4)
    z = np.array([sample_student_t(_t_component(2, 5.0), gen) for _ in range(100_000)])
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=0.05)
    np.testing.assert_allclose(np.cov(z.T), 5 / 3 * np.eye(2), atol=0.1 * 5 / 3)


def test_student_t_cauchy_median():
    gen = np.random.default_rng(5)
    z = np.array([sample_student_t(_t_component(1, 1.0), gen) for _ in range(20_000)])
    assert abs(np.median(z)) < 0.05


def test_student_t_respects_scale():
    comp = MixtureComponent(np.array([1.0, -2.0]), np.array([[4.0, 1.0], [1.0, 2.0]]), 50.0, 0.0, 0.0)
    gen = np.random.default_rng(6)
    z = np.array([sample_student_t(comp, gen) for _ in range(40_000)])
    cov = np.linalg.inv(comp.omega_w) * 50 / 48
    np.testing.assert_allclose(np.cov(z.T), cov, atol=0.03)


# --- ESS


def test_ess_examples():
    r = effective_sample_size(np.full(100, 0.01))
    assert r.ess == pytest.approx(100.0)
    assert r.relative_ess == pytest.approx(1.0)
    assert effective_sample_size([1.0, 0.0, 0.0, 0.0]).ess == pytest.approx(1.0)
    assert effective_sample_size([0.5, 0.25, 0.25]).ess == pytest.approx(1 / 0.375)
    with pytest.raises(ValueError):
        effective_sample_size([])


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=50).filter(lambda v: sum(v) > 0))
def test_ess_bounds(v):
    pi = np.array(v) / np.sum(v)
    r = effective_sample_size(pi)
    assert 1.0 <= r.ess <= len(v) + 1e-9


# --- weighted batches


def test_single_expert_batch_has_uniform_weights():
    b = draw_weighted_batch(PoEDensity([Expert([0.0, 1.0], np.eye(2))], [2.0]), 1000, 0)
    np.testing.assert_allclose(b.pi, 1e-3, rtol=1e-12)
    assert b.ess().relative_ess == pytest.approx(1.0)


def test_batch_invariants(rng):
    b = draw_weighted_batch(random_poe(rng, 4, 3), 5000, 1)
    assert b.pi.sum() == pytest.approx(1.0, abs=1e-10)
    assert np.all(b.pi >= 0)
    assert np.all(np.isfinite(b.z))
    np.testing.assert_allclose(b.w.sum(axis=1), 1.0, atol=1e-12)
    assert len(list(b.records())) == 5000


def test_skew_example_ess():
    assert draw_weighted_batch(skew_heavy_tail_poe(), 100_000, 0).ess().relative_ess > 0.8


def test_batches_reproducible_and_worker_independent():
    poe = skew_heavy_tail_poe()
    a = draw_weighted_batch(poe, 20_000, 7)
    b = draw_weighted_batch(poe, 20_000, 7, workers=4)
    c = draw_weighted_batch(poe, 20_000, 7, workers=2)
    np.testing.assert_array_equal(a.z, b.z)
    np.testing.assert_array_equal(a.z, c.z)
    np.testing.assert_array_equal(a.pi, b.pi)


def test_batch_prefix_stable_across_sizes():
    poe = skew_heavy_tail_poe()
    small = draw_weighted_batch(poe, 8192, 3)
    big = draw_weighted_batch(poe, 3 * 8192, 3)
    np.testing.assert_array_equal(small.z, big.z[:8192])


def test_non_normalizable_refused():
    with pytest.raises(NormalizabilityError):
        draw_weighted_batch(PoEDensity([Expert([0.0, 0.0], np.eye(2))], [0.8]), 10, 0)


def test_batch_csv(tmp_path):
    b = draw_weighted_batch(two_point_poe(), 5, 0)
    path = b.to_csv(tmp_path / "s.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["w_1", "w_2", "z_1", "log_c", "pi"]
    assert len(rows) == 6
    assert float(rows[1][2]) == b.z[0, 0]


def test_resample_shape():
    b = draw_weighted_batch(two_point_poe(), 1000, 0)
    assert b.resample(50, 1).shape == (50, 1)


# --- normalizer


def test_normalizer_single_expert_exact():
    for seed in range(3):
        assert estimate_log_normalizer(cauchy_poe(), 10, seed) == pytest.approx(np.log(np.pi), abs=1e-12)


def test_normalizer_two_point_quadrature():
    z0, _ = quad_moments(two_point_poe())
    est = estimate_log_normalizer(two_point_poe(), 1_000_000, 11)
    assert np.exp(est) == pytest.approx(z0, rel=0.01)


def test_normalizer_stderr_reported():
    est, se = estimate_log_normalizer(two_point_poe(), 10_000, 1, return_stderr=True)
    assert 0 < se < 0.05


def test_normalized_density_integrates_to_one_in_1d():
    poe = PoEDensity([Expert([-0.5], [[2.0]]), Expert([1.5], [[0.5]])], [0.8, 0.9])
    c = estimate_log_normalizer(poe, 1_000_000, 2)
    val, _ = integrate.quad(lambda x: np.exp(poe_unnorm_log_density(poe, [x]) - c), -np.inf, np.inf, limit=400)
    assert val == pytest.approx(1.0, abs=0.01)


def test_normalizer_error_shrinks_with_batch_size():
    poe = skew_heavy_tail_poe()
    ref = estimate_log_normalizer(poe, 5_000_000, 99)
    errs = []
    for b in [10, 1000, 100_000]:
        errs.append(np.mean([abs(estimate_log_normalizer(poe, b, s) - ref) for s in range(10)]))
    assert errs[0] > errs[1] > errs[2]


# --- expectations


def test_expectation_of_constant():
    b = draw_weighted_batch(two_point_poe(), 1000, 0)
    assert expectation(b, lambda z: 1.0) == pytest.approx(1.0)


def test_expectation_symmetric_mean():
    b = draw_weighted_batch(PoEDensity([Expert([0.0], [[1.0]])], [1.5]), 100_000, 1)
    assert abs(expectation(b, lambda z: z, vectorized=True)) <= 0.05


def test_expectation_matches_quadrature():
    poe = PoEDensity([Expert([-1.0], [[1.0]]), Expert([1.0], [[1.0]])], [1.0, 1.5])
    _, mean = quad_moments(poe)
    b = draw_weighted_batch(poe, 1_000_000, 3)
    est = expectation(b, lambda z: z[:, 0], vectorized=True)
    assert est == pytest.approx(mean, rel=0.02, abs=5e-3)


def test_expectation_vector_valued():
    b = draw_weighted_batch(two_point_poe(), 100, 0)
    out = expectation(b, lambda z: np.array([1.0, 2.0]))
    np.testing.assert_allclose(out, [1.0, 2.0])


def test_expectation_reports_nonfinite_index():
    b = draw_weighted_batch(two_point_poe(), 10, 0)
    target = 6

    def h(z):
        return np.inf if z[0] == b.z[target, 0] else 0.0

    with pytest.raises(NonFiniteError) as info:
        expectation(b, h)
    assert info.value.index == target


def test_from_draws_normalizes_in_log_domain():
    b = WeightedBatch.from_draws(np.ones((3, 1)), np.zeros((3, 1)), np.array([-1000.0, -1000.0, -1000.0 + np.log(2)]))
    np.testing.assert_allclose(b.pi, [0.25, 0.25, 0.5])


# --- Halton


def test_halton_base_two():
    np.testing.assert_allclose(halton_points(3, 1)[:, 0], [0.5, 0.25, 0.75])


def test_halton_two_dims():
    np.testing.assert_allclose(halton_points(2, 2), [[0.5, 1 / 3], [0.25, 2 / 3]])


@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 50))
def test_halton_scrambled_in_unit_cube(seed, d):
    pts = halton_points(64, d, seed)
    assert pts.shape == (64, d)
    assert np.all((pts >= 0) & (pts < 1))


def test_halton_deterministic_given_seed():
    np.testing.assert_array_equal(halton_points(10, 3, 5), halton_points(10, 3, 5))
    assert not np.array_equal(halton_points(10, 3, 5), halton_points(10, 3, 6))


def test_halton_dimension_limit():
    with pytest.raises(ValueError):
        halton_points(4, 51)
