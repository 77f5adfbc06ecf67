import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import ECHO_SERVER
from poevi.errors import DimensionError, NonFiniteError, ProtocolError, TransportError
from poevi.poe_model import poe_score
from poevi.targets import (
    ReferenceSamples,
    TargetModel,
    diamond_density,
    external_target,
    finite_diff_score,
    funnel_target,
    gaussian_mixture_example,
    gaussian_mixture_target,
    gaussian_target,
    load_reference_samples,
    make_zoo_target,
    poe_example_density,
    poe_target,
    rosenbrock_target,
    save_reference_samples,
    sinh_arcsinh_target,
)


# --- Gaussian mixtures


def test_single_component_peak():
    cov = np.array([[2.0, 0.3], [0.3, 0.5]])
    g = gaussian_target([1.0, -1.0], cov)
    assert g.log_density([1.0, -1.0]) == pytest.approx(-0.5 * np.linalg.slogdet(2 * np.pi * cov)[1], abs=1e-12)


def test_mixture_example_direct_sum():
    t = gaussian_mixture_example()
    means = [[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]
    covs = [0.5 * np.eye(2), 0.5 * np.eye(2), [[1.0, 0.5], [0.5, 1.0]]]
    direct = sum(w * stats.multivariate_normal(m, c).pdf([0.0, 0.0]) for w, m, c in zip([0.3, 0.4, 0.3], means, covs))
    assert t.log_density([0.0, 0.0]) == pytest.approx(np.log(direct), abs=1e-12)


def test_mixture_sampler_mean():
    z = gaussian_mixture_example().sample(100_000, 0)
    np.testing.assert_allclose(z.mean(axis=0), [0.1, 0.3], atol=0.02)


def test_mixture_rejects_bad_inputs():
    with pytest.raises(ValueError):
        gaussian_mixture_target([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
    with pytest.raises(ValueError):
        gaussian_mixture_target([1.0], [[0.0, 0.0]], [[[1.0, 2.0], [2.0, 1.0]]])


# --- PoE targets


def test_poe_example_constructs_and_score():
    t = poe_target(poe_example_density(), 20_000)
    fd = finite_diff_score(t, np.zeros(2))
    np.testing.assert_allclose(t.score(np.zeros(2)), fd, atol=1e-5)
    assert t.normalized


def test_diamond_constructs():
    poe = diamond_density()
    assert poe.nu == pytest.approx(2.8)
    t = poe_target(poe, 20_000)
    np.testing.assert_allclose(t.score(np.zeros(2)), 0.0, atol=1e-15)


def test_poe_target_normalized_in_2d():
    t = poe_target(diamond_density(), 200_000, seed=1)
    val, _ = integrate.dblquad(lambda y, x: np.exp(t.log_density(np.array([x, y]))), -60, 60, -60, 60,
                               epsabs=1e-6)
    assert val == pytest.approx(1.0, abs=0.03)


def test_poe_sampler_matches_quadrature():
    # nu = 2 here, so compare a bounded statistic rather than the mean
    t = poe_target(poe_example_density(), 200_000)
    z = t.sample(20_000, 3)
    f = lambda y, x: np.tanh(x) * np.exp(t.unnorm_log_density(np.array([x, y])))
    num, _ = integrate.dblquad(f, -80, 80, -80, 80, epsabs=1e-7)
    den, _ = integrate.dblquad(lambda y, x: np.exp(t.unnorm_log_density(np.array([x, y]))), -80, 80, -80, 80,
                               epsabs=1e-7)
    est = np.tanh(z[:, 0])
    assert est.mean() == pytest.approx(num / den, abs=4 * est.std() / np.sqrt(len(est)) + 0.01)


# --- funnel


def test_funnel_values():
    t = funnel_target(1.1, 2)
    assert t.log_density([0.0, 0.0]) == pytest.approx(-0.5 * np.log(2 * np.pi * 1.1) - 0.5 * np.log(2 * np.pi))
    assert t.log_density([0.0, 0.0]) == pytest.approx(-1.88554, abs=1e-5)
    assert t.score([0.0, 0.0])[0] == pytest.approx(-0.25)


def test_funnel_sampler_variance():
    z = funnel_target(1.1, 3).sample(100_000, 1)
    assert np.var(z[:, 0]) == pytest.approx(1.1, rel=0.05)


def test_funnel_normalized_by_quadrature():
    t = funnel_target(1.1, 2)
    val, _ = integrate.dblquad(lambda y, x: np.exp(t.log_density(np.array([x, y]))), -10, 10, -60, 60)
    assert val == pytest.approx(1.0, abs=1e-4)


def test_funnel_needs_two_dims():
    with pytest.raises(DimensionError):
        funnel_target(1.1, 1)


# --- sinh-arcsinh


def test_sinh_arcsinh_identity(rng):
    cov = np.array([[1.0, 0.4], [0.4, 2.0]])
    t = sinh_arcsinh_target(0.0, 1.0, 2, base_cov=cov)
    z = rng.normal(size=(100, 2))
    np.testing.assert_allclose(t.log_density(z), stats.multivariate_normal(np.zeros(2), cov).logpdf(z), atol=1e-10)


def test_sinh_arcsinh_round_trip(rng):
    t = sinh_arcsinh_target(0.3, 0.7, 5)
    x = rng.normal(size=(100, 5))
    np.testing.assert_allclose(t.inverse(t.forward(x)), x, atol=1e-10)


def test_sinh_arcsinh_normalized_in_1d():
    t = sinh_arcsinh_target(0.3, 0.7, 1)
    val, _ = integrate.quad(lambda x: np.exp(t.log_density(np.array([x]))), -np.inf, np.inf, limit=200)
    assert val == pytest.approx(1.0, abs=1e-6)


# --- Rosenbrock


def test_rosenbrock_values():
    t = rosenbrock_target()
    assert t.log_density([1.0, 1.0]) == 0.0
    assert t.log_density([0.0, 0.0]) == -1.0
    np.testing.assert_array_equal(t.score([1.0, 1.0]), [0.0, 0.0])
    assert not t.normalized
    assert not t.has_sampler
    with pytest.raises(NotImplementedError):
        t.sample(3)


def test_rosenbrock_normalized_by_grid():
    t = rosenbrock_target(normalize=True, grid_nodes=801)
    val, _ = integrate.dblquad(lambda y, x: np.exp(t.log_density(np.array([x, y]))), -6, 6, -6, 6)
    assert val == pytest.approx(1.0, abs=1e-3)


# --- scores and finite differences


ZOO_WITH_SCORE = [
    gaussian_mixture_example(),
    funnel_target(1.1, 3),
    sinh_arcsinh_target(0.3, 0.7, 4),
    rosenbrock_target(),
    poe_target(poe_example_density(), 10_000),
]


@pytest.mark.parametrize("target", ZOO_WITH_SCORE, ids=lambda t: t.name)
def test_score_matches_finite_differences(target):
    z = np.random.default_rng(0).normal(size=(100, target.dim))
    analytic = target.score(z)
    fd = finite_diff_score(target, z)
    np.testing.assert_allclose(fd, analytic, rtol=1e-5, atol=1e-5)


@pytest.mark.parametrize("target", [t for t in ZOO_WITH_SCORE if t.has_hessian], ids=lambda t: t.name)
def test_hessian_matches_score_differences(target):
    z = np.random.default_rng(1).normal(size=(3, target.dim))
    h = target.hessian(z)
    eps = 1e-6
    for i in range(target.dim):
        e = np.zeros(target.dim)
        e[i] = eps
        col = (target.score(z + e) - target.score(z - e)) / (2 * eps)
        np.testing.assert_allclose(h[:, :, i], col, rtol=1e-4, atol=1e-4)


def test_finite_diff_examples():
    g = gaussian_target(np.zeros(2), np.eye(2))
    np.testing.assert_allclose(finite_diff_score(g, [1.0, 0.0]), [-1.0, 0.0], atol=1e-6)
    a = np.array([0.3, -2.0, 1.5])
    lin = TargetModel(3, log_density=lambda z: z @ a)
    np.testing.assert_allclose(lin.score([0.2, 0.1, -0.4]), a, atol=1e-10)


def test_finite_diff_step_tradeoff():
    g = TargetModel(1, log_density=lambda z: np.sin(3 * z[:, 0]))
    exact = 3 * np.cos(3 * 0.7)
    errs = [abs(finite_diff_score(g, [0.7], h)[0] - exact) for h in [1e-1, 1e-2, 1e-3, 1e-4]]
    assert errs[0] > errs[1] > errs[2] > errs[3]
    tiny = abs(finite_diff_score(g, [0.7], 1e-12)[0] - exact)
    assert tiny > errs[3]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_finite_diff_nonfinite():
    t = TargetModel(1, log_density=lambda z: np.log(z[:, 0]))
    with pytest.raises(NonFiniteError):
        finite_diff_score(t, [0.0])


def test_score_only_target_has_no_log_density():
    t = TargetModel(1, score=lambda z: -z)
    assert t.capabilities["score"]
    assert not t.normalized
    with pytest.raises(NotImplementedError):
        t.log_density([0.0])


def test_sampler_consistency_with_entropy():
    # -E_p[log p] equals the differential entropy for a 2-D Gaussian
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    g = gaussian_target([0.0, 0.0], cov)
    z = g.sample(50_000, 2)
    ent = stats.multivariate_normal(np.zeros(2), cov).entropy()
    lp = g.log_density(z)
    assert -lp.mean() == pytest.approx(ent, abs=4 * lp.std() / np.sqrt(len(lp)))


def test_zoo_factory():
    assert make_zoo_target("funnel", sigma2=1.1, D=2).dim == 2
    with pytest.raises(ValueError):
        make_zoo_target("banana")


# --- reference samples


def test_reference_samples_roundtrip(tmp_path):
    p = tmp_path / "s.csv"
    p.write_text("z_1,z_2\n1,2\n3,4\n5,6\n")
    ref = load_reference_samples(p)
    assert (ref.n, ref.dim) == (3, 2)
    save_reference_samples(tmp_path / "t.csv", ref.samples)
    np.testing.assert_array_equal(load_reference_samples(tmp_path / "t.csv").samples, ref.samples)
    with pytest.raises(DimensionError):
        ref.check_dim(3)


@pytest.mark.parametrize("body,line", [
    ("z_1,z_2\n1,2\n3\n", ":3:"),
    ("z_1,z_2\n1,2\n \n", ":3:"),
    ("z_1,z_2\n1,x\n", ":2:"),
    ("a,b\n1,2\n", ":1:"),
])
def test_reference_parse_errors_name_line(tmp_path, body, line):
    p = tmp_path / "bad.csv"
    p.write_text(body)
    with pytest.raises(ValueError, match=line):
        load_reference_samples(p)


def test_reference_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    with pytest.raises(ValueError):
        load_reference_samples(p)
    with pytest.raises(ValueError):
        ReferenceSamples(np.array([[np.nan]]))


# --- external targets


def test_external_round_trip():
    with external_target(ECHO_SERVER) as t:
        assert t.dim == 2
        assert not t.normalized
        np.testing.assert_array_equal(t.score([1.0, 0.0]), [-1.0, 0.0])


@given(pts=st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1, max_size=8))
def test_external_matches_in_process(pts):
    z = np.array(pts)
    t = _shared_echo()
    np.testing.assert_allclose(t.score(z), -z, rtol=1e-12)
    np.testing.assert_allclose(t.log_density(z), -0.5 * np.sum(z**2, axis=1), rtol=1e-12)


_ECHO = {}


def _shared_echo():
    if "t" not in _ECHO:
        _ECHO["t"] = external_target(ECHO_SERVER)
    return _ECHO["t"]


def test_external_batch_alignment(rng):
    z = rng.normal(size=(64, 2))
    with external_target(ECHO_SERVER) as t:
        np.testing.assert_allclose(t.score(z), -z, rtol=1e-12)
        assert t.log_density(z).shape == (64,)


def test_external_dimension_check():
    with pytest.raises(DimensionError):
        external_target(ECHO_SERVER, D=3)


def test_external_malformed_reply():
    with external_target(ECHO_SERVER + ["2", "malformed"]) as t:
        with pytest.raises(ProtocolError) as info:
            t.score([1.0, 0.0])
    assert "not json" in info.value.payload


def test_external_wrong_id():
    with external_target(ECHO_SERVER + ["2", "badid"]) as t:
        with pytest.raises(ProtocolError):
            t.score([1.0, 0.0])


def test_external_timeout():
    t = external_target(ECHO_SERVER + ["2", "hang"], timeout=0.5)
    with pytest.raises(TransportError, match="timed out"):
        t.score([1.0, 0.0])
    t.close()


def test_external_subprocess_exit():
    with external_target(ECHO_SERVER + ["2", "die"]) as t:
        with pytest.raises(TransportError):
            t.score([1.0, 0.0])


def test_external_missing_command():
    with pytest.raises(TransportError):
        external_target(["/nonexistent/binary"])


def test_poe_score_reused_by_target():
    poe = poe_example_density()
    t = poe_target(poe, 10_000)
    z = np.array([[0.5, -0.2], [3.0, 1.0]])
    np.testing.assert_array_equal(t.score(z), poe_score(poe, z))
