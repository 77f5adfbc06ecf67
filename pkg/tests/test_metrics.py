import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import cauchy_poe
from poevi.errors import NonFiniteError
from poevi.metrics import (
    EvaluationReport,
    evaluate,
    fisher_under_p,
    forward_kl,
    gaussian_baseline,
    neg_llh,
)
from poevi.poe_model import Expert, PoEDensity, poe_unnorm_log_density
from poevi.score_match import FitConfig, fit
from poevi.targets import ReferenceSamples, TargetModel, gaussian_target, poe_example_density, poe_target


def cauchy_target():
    return TargetModel(1, log_density=lambda z: -np.log(np.pi * (1 + z[:, 0] ** 2)),
                       score=lambda z: -2 * z / (1 + z**2), normalized=True, name="cauchy")


def cauchy_samples(n, seed=0):
    return stats.cauchy.rvs(size=(n, 1), random_state=seed)


class Shifted:
    def __init__(self, target, c):
        self.target, self.c = target, np.asarray(c)

    def score(self, z):
        return self.target.score(z) + self.c


# --- Fisher divergence


def test_fisher_self_is_zero():
    assert fisher_under_p(cauchy_samples(1000), cauchy_poe(), cauchy_target()) == pytest.approx(0.0, abs=1e-28)


@given(c=st.lists(st.floats(-10, 10), min_size=2, max_size=2), seed=st.integers(0, 1000))
def test_fisher_constant_shift(c, seed):
    p = gaussian_target([0.0, 1.0], [[1.0, 0.2], [0.2, 2.0]])
    z = p.sample(200, seed)
    assert fisher_under_p(z, Shifted(p, c), p) == pytest.approx(np.dot(c, c), rel=1e-9, abs=1e-9)


def test_fisher_after_well_specified_fit():
    target = poe_target(poe_example_density(), 100_000)
    trace = fit(poe_example_density().pool, target, FitConfig(batch_size=10_000, iterations=20, learning_rates=1.0))
    q = PoEDensity(poe_example_density().pool, trace.final_alpha)
    assert fisher_under_p(target.sample(1000, 0), q, target) <= 1e-3


def test_fisher_reports_nonfinite_count():
    p = gaussian_target([0.0], [[1.0]])
    bad = TargetModel(1, score=lambda z: np.where(z > 0, np.inf, z))
    with pytest.raises(NonFiniteError, match="non-finite"):
        fisher_under_p(np.array([[-1.0], [1.0], [2.0]]), bad, p)


# --- forward KL


def test_kl_self_is_zero():
    kl = forward_kl(cauchy_samples(1000), cauchy_target(), cauchy_poe(), 10)
    assert abs(kl) <= 0.02


def test_kl_broadened_is_larger():
    p = cauchy_target()
    z = cauchy_samples(1000, 1)
    broad = PoEDensity(cauchy_poe().pool, [0.6])
    self_kl = forward_kl(z, p, cauchy_poe(), 10)
    kl = forward_kl(z, p, broad, 200_000)
    assert kl > self_kl
    # quadrature oracle for the same quantity
    log_c = np.log(integrate.quad(lambda x: np.exp(poe_unnorm_log_density(broad, [x])), -np.inf, np.inf,
                                  limit=500)[0])
    ref = np.mean(p.log_density(z) - (poe_unnorm_log_density(broad, z) - log_c))
    assert kl == pytest.approx(ref, abs=0.02)


def test_kl_gaussian_baseline_closed_form():
    p = gaussian_target([0.0], [[1.0]])
    base = gaussian_baseline(gaussian_target([1.0], [[4.0]]).sample(10_000, 0))
    m, s2 = base.mean[0], base.cov[0, 0]
    exact = 0.5 * np.log(s2) + (1 + m**2) / (2 * s2) - 0.5
    kl = forward_kl(p.sample(100_000, 1), p, base)
    assert kl == pytest.approx(exact, rel=0.05)


def test_kl_needs_normalized_target():
    with pytest.raises(ValueError):
        forward_kl(np.zeros((3, 1)), TargetModel(1, log_density=lambda z: -z[:, 0] ** 2), cauchy_poe())


# --- negative log-likelihood


def test_neg_llh_cauchy_peak():
    assert neg_llh(np.zeros((5, 1)), cauchy_poe(), 10) == pytest.approx(np.log(np.pi), abs=1e-12)


def test_neg_llh_duplicates():
    z = cauchy_samples(50, 2)
    assert neg_llh(np.vstack([z, z]), cauchy_poe(), 10) == pytest.approx(neg_llh(z, cauchy_poe(), 10), rel=1e-12)


def test_neg_llh_grows_with_distance():
    z = cauchy_samples(200, 3)
    vals = [neg_llh(z, PoEDensity([Expert([m], [[1.0]])], [1.0]), 10) for m in [0.0, 5.0, 20.0, 100.0]]
    assert all(a < b for a, b in zip(vals, vals[1:]))


# --- baseline


def test_baseline_consistency():
    z = np.random.default_rng(0).standard_normal((10_000, 3))
    base = gaussian_baseline(ReferenceSamples(z))
    np.testing.assert_allclose(base.mean, 0.0, atol=0.05)
    np.testing.assert_allclose(base.cov, np.eye(3), atol=0.1)
    assert base.normalized


def test_baseline_degenerate():
    with pytest.raises(np.linalg.LinAlgError):
        gaussian_baseline(np.ones((10, 2)))
    with pytest.raises(ValueError):
        gaussian_baseline(np.zeros((2, 2)))


@given(seed=st.integers(0, 10_000))
def test_baseline_affine_equivariance(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(50, 2))
    a = rng.normal(size=(2, 2)) + 3 * np.eye(2)
    b = rng.normal(size=2)
    base, moved = gaussian_baseline(z), gaussian_baseline(z @ a.T + b)
    np.testing.assert_allclose(moved.mean, a @ base.mean + b, atol=1e-10)
    np.testing.assert_allclose(moved.cov, a @ (base.cov - 1e-9 * np.eye(2)) @ a.T + 1e-9 * np.eye(2), atol=1e-9)


# --- reports


def test_evaluate_deterministic_and_serializable(tmp_path):
    target = poe_target(poe_example_density(), 20_000)
    z = target.sample(500, 0)
    a = evaluate(z, target, poe_example_density(), 20_000, seed=4)
    b = evaluate(z, target, poe_example_density(), 20_000, seed=4)
    assert a == b
    assert a.n_samples == 500
    assert a.fisher_under_p == pytest.approx(0.0, abs=1e-20)
    doc = json.loads(a.save(tmp_path / "e.json").read_text())
    assert set(doc) == {"forward_kl", "fisher_under_p", "neg_llh", "n_samples", "log_normalizer", "seed"}


def test_evaluate_unnormalized_target_skips_kl():
    p = TargetModel(1, log_density=lambda z: -np.log1p(z[:, 0] ** 2))
    rep = evaluate(cauchy_samples(100), p, cauchy_poe(), 10)
    assert rep.forward_kl is None
    assert rep.neg_llh is not None


def test_report_rejects_negative_fisher():
    with pytest.raises(ValueError):
        EvaluationReport(fisher_under_p=-1.0, n_samples=1)
