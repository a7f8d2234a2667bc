import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from aninfonce.errors import DegenerateInputError, EnvelopeTooLooseError, InvalidArgumentError
from aninfonce.rng import RngStream, as_generator
from aninfonce.sphere import (
    CONDITIONAL_METHODS,
    ConcentrationMatrix,
    VmfParams,
    conditional_density_unnorm,
    cosine_similarities,
    gaussian_envelope_log_bound,
    gaussian_envelope_rate,
    log_radial_integral,
    pole,
    project_to_sphere,
    sample_conditional,
    sample_marginal,
    sample_uniform_sphere,
    sample_vmf,
    vmf_envelope_rate,
)


def unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v)


def vmf_cosine_cdf(kappa, d):
    """CDF of t = <x, mu> under vMF on S^(d-1), by quadrature of
    exp(kappa t) (1 - t^2)^((d-3)/2), shifted by kappa for stability."""
    dens = lambda t: np.exp(kappa * (t - 1.0)) * (1.0 - t * t) ** ((d - 3) / 2.0)
    z = integrate.quad(dens, -1, 1, limit=200, points=[1 - 10 / max(kappa, 1)])[0]

    def cdf(x):
        x = np.atleast_1d(x)
        grid = np.linspace(-1, 1, 4001)
        pdf = dens(grid) / z
        c = integrate.cumulative_trapezoid(pdf, grid, initial=0.0)
        return np.interp(x, grid, c / c[-1])

    return cdf


# --- rng -----------------------------------------------------------------------


def test_rng_stream_reproducible_and_distinct():
    a = RngStream(7, 3).generator().random(5)
    b = RngStream(7, 3).generator().random(5)
    c = RngStream(7, 4).generator().random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert RngStream(7).split(1, 2) == RngStream(7).split(1, 2)
    assert RngStream(7).split(1, 2) != RngStream(7).split(2, 1)


def test_as_generator_rejects_garbage():
    with pytest.raises(TypeError):
        as_generator("seed")


# --- uniform -------------------------------------------------------------------


def test_uniform_d1_is_plus_minus_one():
    x = sample_uniform_sphere(1, 4, RngStream(0))
    assert x.shape == (4, 1)
    assert set(np.unique(x)) <= {-1.0, 1.0}


def test_uniform_mean_near_zero():
    x = sample_uniform_sphere(10, 100_000, RngStream(1))
    assert np.linalg.norm(x.mean(axis=0)) < 0.02


def test_uniform_s2_coordinate_is_uniform_on_interval():
    x = sample_uniform_sphere(3, 200_000, RngStream(2))
    for k in range(3):
        assert stats.kstest(x[:, k], stats.uniform(-1, 2).cdf).statistic < 0.01


@pytest.mark.parametrize("d,n", [(0, 3), (3, 0)])
def test_uniform_rejects_empty(d, n):
    with pytest.raises(InvalidArgumentError):
        sample_uniform_sphere(d, n, RngStream(0))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(1, 50), st.integers(0, 2**32))
def test_uniform_points_have_unit_norm(d, n, seed):
    x = sample_uniform_sphere(d, n, RngStream(seed))
    assert np.all(np.abs(np.linalg.norm(x, axis=1) - 1) < 1e-9)


# --- densities and projection ----------------------------------------------------


def test_density_examples():
    z = unit([1, 2, 3])
    assert conditional_density_unnorm(z, z, [1, 2, 3]) == 1.0
    assert conditional_density_unnorm(z, -z, ConcentrationMatrix.isotropic(0.7, 3)) == pytest.approx(np.exp(-4 * 0.7))
    assert conditional_density_unnorm([1, 0], [0, 1], [2, 3]) == pytest.approx(np.exp(-5))


def test_density_dimension_mismatch():
    with pytest.raises(InvalidArgumentError):
        conditional_density_unnorm([1, 0], [0, 0, 1], [1, 1])


def test_projection_examples():
    np.testing.assert_allclose(project_to_sphere([3, 4]), [0.6, 0.8])
    u = unit([1, -2, 2])
    np.testing.assert_allclose(project_to_sphere(u), u, atol=1e-15)
    with pytest.raises(DegenerateInputError):
        project_to_sphere(np.zeros(4))


def test_concentration_validation():
    with pytest.raises(InvalidArgumentError):
        ConcentrationMatrix([1.0, 0.0])
    with pytest.raises(InvalidArgumentError):
        ConcentrationMatrix([1.0, np.inf])
    assert ConcentrationMatrix([0.0, 1.0], allow_zero=True).d == 2
    assert ConcentrationMatrix.isotropic(3, 4).is_isotropic()


# --- vMF -------------------------------------------------------------------------


def test_vmf_kappa_zero_is_uniform():
    x = sample_vmf(VmfParams(pole(5), 0.0), 100_000, RngStream(3))
    y = sample_uniform_sphere(5, 100_000, RngStream(4))
    assert stats.ks_2samp(x[:, 0], y[:, 0]).statistic < 0.01


def test_vmf_mean_cosine_matches_quadrature():
    d, kappa = 10, 50.0
    x = sample_vmf(VmfParams(pole(d), kappa), 100_000, RngStream(5))
    dens = lambda t: np.exp(kappa * (t - 1)) * (1 - t * t) ** ((d - 3) / 2)
    expected = integrate.quad(lambda t: t * dens(t), -1, 1)[0] / integrate.quad(dens, -1, 1)[0]
    assert abs(x[:, 0].mean() - expected) < 0.005


def test_vmf_deterministic():
    p = VmfParams(unit([1, 1, 0, 0]), 10.0)
    assert np.array_equal(sample_vmf(p, 1, RngStream(9)), sample_vmf(p, 1, RngStream(9)))


def test_vmf_params_validation():
    with pytest.raises(InvalidArgumentError):
        VmfParams(np.array([1.0, 1.0]), 1.0)
    with pytest.raises(InvalidArgumentError):
        VmfParams(pole(3), -1.0)


# --- anisotropic conditional -------------------------------------------------------


def test_isotropic_mh_matches_vmf_cosine_law():
    d, lam = 6, 4.0
    z = pole(d)
    x = sample_conditional(z, ConcentrationMatrix.isotropic(lam, d), 50_000, "exact_mh", RngStream(10))
    assert stats.kstest(x @ z, vmf_cosine_cdf(2 * lam, d)).statistic < 0.02


@pytest.mark.parametrize("method", ["exact_mh", "exact", "exact_vmf_rejection", "exact_gaussian_rejection"])
def test_isotropic_conditional_matches_sample_vmf(method):
    d, lam = 5, 3.0
    z = unit(np.arange(1.0, d + 1))
    x = sample_conditional(z, np.full(d, lam), 50_000, method, RngStream(11))
    y = sample_vmf(VmfParams(z, 2 * lam), 50_000, RngStream(12))
    assert stats.ks_2samp(x @ z, y @ z).statistic < 0.02


def _s2_cell_probabilities(anchor, lam, n_u, n_phi, sub=12):
    """Cell masses of the conditional on an equal-area (u = cos theta, phi)
    grid of S^2 by midpoint quadrature inside each cell."""
    u_edges = np.linspace(-1, 1, n_u + 1)
    p_edges = np.linspace(-np.pi, np.pi, n_phi + 1)
    uf = (np.arange(n_u * sub) + 0.5) / (n_u * sub) * 2 - 1
    pf = (np.arange(n_phi * sub) + 0.5) / (n_phi * sub) * 2 * np.pi - np.pi
    U, P = np.meshgrid(uf, pf, indexing="ij")
    r = np.sqrt(1 - U * U)
    pts = np.stack([r * np.cos(P), r * np.sin(P), U], axis=-1)
    dens = conditional_density_unnorm(anchor, pts, lam)  # area element is du dphi
    mass = dens.reshape(n_u, sub, n_phi, sub).sum(axis=(1, 3))
    return mass / mass.sum(), u_edges, p_edges


@pytest.mark.parametrize("method", ["exact_mh", "exact_vmf_rejection", "exact_gaussian_rejection"])
def test_anisotropic_s2_chi_square(method):
    lam = np.array([5.0, 15.0, 25.0])
    anchor = unit([1.0, -2.0, 2.0])
    n = 200_000
    x = sample_conditional(anchor, lam, n, method, RngStream(13))
    probs, ue, pe = _s2_cell_probabilities(anchor, lam, 40, 80)
    counts, _, _ = np.histogram2d(x[:, 2], np.arctan2(x[:, 1], x[:, 0]), bins=[ue, pe])
    expected = probs * n
    big = expected >= 5
    obs = np.append(counts[big], counts[~big].sum())
    exp = np.append(expected[big], expected[~big].sum())
    p = stats.chisquare(obs, exp).pvalue
    assert p > 0.01, p


def test_mh_and_rejection_agree_for_small_lambda():
    lam = np.array([1.0, 3.0, 5.0, 2.0])
    z = unit([1, 1, -1, 0.5])
    a = sample_conditional(z, lam, 50_000, "exact_mh", RngStream(14))
    b = sample_conditional(z, lam, 50_000, "exact_rejection", RngStream(15))
    assert stats.ks_2samp(a @ z, b @ z).statistic < 0.02


def test_vmf_envelope_agrees_with_rejection():
    lam = np.array([1.0, 3.0, 5.0, 2.0])
    z = unit([1, 1, -1, 0.5])
    a = sample_conditional(z, lam, 50_000, "exact_vmf_rejection", RngStream(16))
    b = sample_conditional(z, lam, 50_000, "exact_rejection", RngStream(17))
    for k in range(4):
        assert stats.ks_2samp(a[:, k], b[:, k]).statistic < 0.02


def test_gaussian_envelope_agrees_with_mh_in_d10():
    lam = np.r_[np.full(5, 5.0), np.full(5, 25.0)]
    z = unit(np.arange(1.0, 11.0) * (-1.0) ** np.arange(10))
    a = sample_conditional(z, lam, 50_000, "exact_gaussian_rejection", RngStream(18))
    b = sample_conditional(z, lam, 50_000, "exact_mh", RngStream(19))
    for k in (0, 5, 9):
        assert stats.ks_2samp(a[:, k], b[:, k]).statistic < 0.02


def test_projected_gaussian_is_measurably_biased():
    # the uncorrected proposal is tighter than the conditional
    lam = np.r_[np.full(5, 5.0), np.full(5, 25.0)]
    z = unit(np.ones(10))
    a = sample_conditional(z, lam, 50_000, "exact_gaussian_rejection", RngStream(20))
    b = sample_conditional(z, lam, 50_000, "projected_gaussian", RngStream(21))
    assert np.mean(b @ z) > np.mean(a @ z) + 0.005


def _radial_quad(a, b, n):
    peak = max(b / a, 0.0)
    f = lambda r: np.exp(n * np.log(r) - a * r * r + 2 * b * r - (2 * b * peak - a * peak * peak)) if r > 0 else 0.0
    top = peak + 40 / np.sqrt(a) + 10
    w = 5 / np.sqrt(a)
    grid = sorted({0.0, max(peak - w, 0.0), peak, peak + w, top})
    val = sum(integrate.quad(f, lo, hi, limit=400, epsabs=0, epsrel=1e-10)[0] for lo, hi in zip(grid, grid[1:]))
    return np.log(val) + 2 * b * peak - a * peak * peak


@settings(max_examples=60, deadline=None)
@given(st.floats(0.05, 500), st.floats(-500, 500), st.integers(1, 25))
def test_log_radial_integral_matches_quadrature(a, b, n):
    assert log_radial_integral(a, b, n) == pytest.approx(_radial_quad(a, b, n), rel=1e-7, abs=1e-7)


def test_log_radial_integral_closed_forms():
    # n = 1, b = 0 gives 1/(2a); n = 2, b = 0 gives sqrt(pi)/(4 a^1.5)
    np.testing.assert_allclose(log_radial_integral([2.0, 8.0], 0.0, 1), -np.log([4.0, 16.0]), rtol=1e-14)
    np.testing.assert_allclose(log_radial_integral(3.0, 0.0, 2), np.log(np.sqrt(np.pi) / (4 * 3.0**1.5)), rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10**6))
def test_gaussian_envelope_bound_dominates_proposals(d, seed):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(0.5, 60.0, d)
    z = sample_uniform_sphere(d, 8, RngStream(seed))
    bound = gaussian_envelope_log_bound(lam, z)
    mu = np.repeat(z, 500, axis=0)
    u = project_to_sphere(mu + rng.normal(size=mu.shape) / np.sqrt(2 * lam))
    a = np.einsum("nd,d,nd->n", u, lam, u)
    b = np.einsum("nd,nd->n", u, mu * lam)
    log_r = 2 * b - a - log_radial_integral(a, b, d - 1)
    assert np.all(log_r <= np.repeat(bound, 500))


def test_gaussian_rate_estimates():
    assert gaussian_envelope_rate(np.r_[np.full(5, 5.0), np.full(5, 25.0)]) > 0.3
    assert gaussian_envelope_rate(np.r_[np.full(10, 15.0), np.full(10, 400.0)]) > 0.1


def test_rejection_envelope_too_loose():
    with pytest.raises(EnvelopeTooLooseError):
        sample_conditional(pole(20), np.full(20, 400.0), 10, "exact_rejection", RngStream(0))


@pytest.mark.parametrize("method", CONDITIONAL_METHODS)
def test_conditional_deterministic_and_unit_norm(method):
    lam = np.array([2.0, 4.0, 3.0])
    anchors = sample_uniform_sphere(3, 4, RngStream(1))
    a = sample_conditional(anchors, lam, 7, method, RngStream(2))
    b = sample_conditional(anchors, lam, 7, method, RngStream(2))
    assert a.shape == (4, 7, 3)
    assert np.array_equal(a, b)
    assert np.all(np.abs(np.linalg.norm(a, axis=-1) - 1) < 1e-9)


def test_conditional_validation():
    with pytest.raises(InvalidArgumentError):
        sample_conditional(pole(3), [1, 1, 1], 3, "nope", RngStream(0))
    with pytest.raises(InvalidArgumentError):
        sample_conditional(np.array([1.0, 1.0, 0.0]), [1, 1, 1], 3, "exact", RngStream(0))


def test_envelope_rate_estimate():
    assert vmf_envelope_rate([4.0, 4.0]) == 1.0
    assert vmf_envelope_rate([1.0, 4.0]) == pytest.approx(0.5)


# --- marginal mixture ----------------------------------------------------------------


def test_mixture_alpha_zero_is_uniform():
    x = sample_marginal(10, 100_000, RngStream(20), VmfParams(pole(10), 20.0), alpha=0.0)
    y = sample_uniform_sphere(10, 100_000, RngStream(21))
    assert stats.ks_2samp(x[:, 0], y[:, 0]).statistic < 0.01


def test_mixture_concentrates_at_pole():
    x = sample_marginal(10, 20_000, RngStream(22), VmfParams(pole(10), 50.0), alpha=1.0)
    assert x[:, 0].mean() > 0.7


def test_cosine_similarities():
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    np.testing.assert_allclose(cosine_similarities(a, a), [1.0, 1.0])
