import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from aninfonce.errors import InsufficientDataError, InvalidArgumentError
from aninfonce.evaluation import (
    EvalReport,
    compare_lambda,
    content_style_dims,
    domain_classifier_accuracy,
    evaluate_latents,
    fit_linear_map,
    lambda_blocks,
    orthogonality_residual,
    overlap_histogram,
)
from aninfonce.rng import RngStream
from aninfonce.sphere import ConcentrationMatrix, VmfParams, pole, sample_conditional, sample_uniform_sphere, sample_vmf


def block_orthogonal(sizes, seed):
    d = sum(sizes)
    q = np.zeros((d, d))
    pos = 0
    for i, s in enumerate(sizes):
        q[pos : pos + s, pos : pos + s] = ortho_group.rvs(s, random_state=seed + i) if s > 1 else np.array([[-1.0]])
        pos += s
    return q


# --- linear R^2 -----------------------------------------------------------------


def test_orthogonal_map_gives_perfect_r2():
    z = sample_uniform_sphere(10, 5000, RngStream(0))
    o = ortho_group.rvs(10, random_state=1)
    fit = fit_linear_map(z @ o, z)
    assert np.all(fit.per_dim_r2 > 0.999)
    assert fit.n_fit == 4000 and fit.n_eval == 1000


def test_independent_prediction_gives_zero_r2():
    z = sample_uniform_sphere(10, 10_000, RngStream(2))
    w = sample_uniform_sphere(10, 10_000, RngStream(3))
    assert abs(fit_linear_map(w, z).mean_r2) < 0.05


def test_collapsed_dimension():
    z = sample_uniform_sphere(10, 10_000, RngStream(4))
    pred = z.copy()
    pred[:, 3] = 0.7
    with pytest.warns(UserWarning):
        fit = fit_linear_map(pred, z)
    assert abs(fit.per_dim_r2[3]) < 0.01
    assert np.all(np.delete(fit.per_dim_r2, 3) > 0.999)


def test_r2_on_held_out_split_only():
    # a fit that memorises the fitting rows cannot score on the eval rows
    rng = np.random.default_rng(5)
    y = rng.normal(size=(200, 1))
    x = np.zeros((200, 20))
    x[np.arange(160), np.arange(160) % 20] = y[:160, 0]
    fit = fit_linear_map(x, y, with_intercept=False)
    assert fit.mean_r2 < 0.1


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_r2_invariant_under_invertible_affine_maps(seed):
    rng = np.random.default_rng(seed)
    z = sample_uniform_sphere(10, 10_000, RngStream(seed))
    pred = np.tanh(z @ rng.normal(size=(10, 10)))
    a = rng.normal(size=(10, 10)) + 3 * np.eye(10)
    b = rng.normal(size=10) * 4
    r1 = fit_linear_map(pred, z).per_dim_r2
    r2 = fit_linear_map(pred @ a + b, z).per_dim_r2
    assert np.max(np.abs(r1 - r2)) < 1e-3


def test_fit_validation():
    with pytest.raises(InsufficientDataError):
        fit_linear_map(np.ones((50, 10)), np.ones((50, 10)))
    with pytest.raises(InvalidArgumentError):
        fit_linear_map(np.ones((50, 2)), np.ones((49, 2)))


def test_content_style_split():
    c, s = content_style_dims([5, 25, 5, 25])
    assert c.tolist() == [1, 3] and s.tolist() == [0, 2]
    c, s = content_style_dims(np.full(3, 2.0))
    assert c.tolist() == s.tolist() == [0, 1, 2]
    c, s = content_style_dims([1.0, 4.0, 3.0, 2.0])
    assert c.tolist() == [1, 2] and s.tolist() == [0, 3]


# --- concentration matching -----------------------------------------------------------


def test_permuted_truth_matches_exactly():
    truth = np.array([5.0, 25.0, 10.0, 1.0])
    m = compare_lambda(truth[[2, 0, 3, 1]], truth)
    np.testing.assert_array_equal(m.raw_errors, 0.0)


def test_doubled_learned_values():
    truth = np.array([5.0, 25.0, 7.0])
    m = compare_lambda(2 * truth, truth)
    np.testing.assert_allclose(m.raw_errors, 1.0)
    np.testing.assert_allclose(m.scaled_errors, 0.0, atol=1e-15)
    assert m.scale == pytest.approx(0.5)


def test_matched_relative_errors_arithmetic():
    m = compare_lambda(ConcentrationMatrix([24.0, 5.2]), [5.0, 25.0])
    np.testing.assert_allclose(m.raw_errors, [0.04, 0.04])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10**6))
def test_compare_lambda_symmetric_under_joint_permutation(d, seed):
    rng = np.random.default_rng(seed)
    learned, truth = rng.uniform(0.5, 30, d), rng.uniform(0.5, 30, d)
    perm = rng.permutation(d)
    a, b = compare_lambda(learned, truth), compare_lambda(learned[perm], truth[perm])
    np.testing.assert_array_equal(a.raw_errors, b.raw_errors)
    assert a.scale == b.scale


def test_lambda_blocks_tolerance():
    blocks = lambda_blocks([5.0, 25.0, 5.04, 25.2, 30.0])
    assert [b.tolist() for b in blocks] == [[0, 2], [1, 3], [4]]


# --- block-orthogonal residual -----------------------------------------------------------


def test_block_orthogonal_transform_has_zero_residual():
    lam = np.r_[np.full(5, 5.0), np.full(5, 25.0)]
    z = sample_uniform_sphere(10, 2000, RngStream(6))
    q = block_orthogonal([5, 5], 7)
    assert orthogonality_residual(z, z @ q, lam).residual < 1e-10


def test_identity_residual_and_fitted_blocks():
    lam = np.r_[np.full(3, 1.0), np.full(4, 9.0)]
    z = sample_uniform_sphere(7, 1000, RngStream(8))
    fit = orthogonality_residual(z, z, lam)
    assert fit.residual < 1e-20
    np.testing.assert_allclose(fit.rotation, np.eye(7), atol=1e-12)


def test_non_orthogonal_map_has_positive_residual():
    d, n = 10, 10_000
    rng = np.random.default_rng(9)
    u, v = ortho_group.rvs(d, random_state=10), ortho_group.rvs(d, random_state=11)
    m = u @ np.diag(np.geomspace(1.0, 10.0, d)) @ v
    m /= np.sqrt(np.mean(np.geomspace(1.0, 10.0, d) ** 2))  # keep the overall scale comparable
    z = sample_uniform_sphere(d, n, RngStream(12))
    assert orthogonality_residual(z, z @ m, np.ones(d)).residual > 0.01


def test_residual_matches_brute_force_rotation_search():
    # d = 2, one block: scan all rotations and reflections on a fine grid
    rng = np.random.default_rng(13)
    z = sample_uniform_sphere(2, 500, RngStream(14))
    h = z @ rng.normal(size=(2, 2)) + 0.05 * rng.normal(size=(500, 2))
    best = np.inf
    for t in np.linspace(0, 2 * np.pi, 20001):
        c, s = np.cos(t), np.sin(t)
        for q in (np.array([[c, -s], [s, c]]), np.array([[c, s], [s, -c]])):
            best = min(best, np.mean(np.sum((h - z @ q) ** 2, axis=1)))
    fit = orthogonality_residual(z, h, [1.0, 1.0])
    assert fit.residual <= best + 1e-12
    assert fit.residual == pytest.approx(best, rel=1e-6)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10**6))
def test_residual_invariant_under_extra_block_orthogonal_map(seed):
    lam = np.r_[np.full(4, 2.0), np.full(3, 8.0)]
    rng = np.random.default_rng(seed)
    z = sample_uniform_sphere(7, 2000, RngStream(seed))
    h = np.tanh(z @ (np.eye(7) + 0.3 * rng.normal(size=(7, 7))))
    q = block_orthogonal([4, 3], seed % 1000)
    a = orthogonality_residual(z, h, lam).residual
    b = orthogonality_residual(z @ q.T, h, lam).residual
    assert abs(a - b) < 1e-8


def test_residual_needs_enough_samples():
    with pytest.raises(InsufficientDataError):
        orthogonality_residual(np.ones((3, 5)), np.ones((3, 5)), np.ones(5))


# --- overlap histograms ------------------------------------------------------------------


def _latent_batch(lam, d, n, seed):
    a = sample_uniform_sphere(d, n, RngStream(seed, 0))
    p = sample_conditional(a, np.full(d, lam), 1, "exact", RngStream(seed, 1))[:, 0]
    return a, p


def test_sharp_conditional_histograms_are_disjoint():
    a, p = _latent_batch(400.0, 20, 512, 15)
    h = overlap_histogram(a, p)
    assert h.disjoint
    assert h.positive_counts.sum() == 512 and h.negative_counts.sum() == 512 * 511


def test_broad_conditional_histograms_overlap():
    a, p = _latent_batch(1.0, 10, 512, 16)
    assert not overlap_histogram(a, p).disjoint


def test_identical_positives_land_in_top_bin():
    a = sample_uniform_sphere(5, 100, RngStream(17))
    h = overlap_histogram(a, a)
    assert h.positive_counts[-1] == 100 and h.positive_counts[:-1].sum() == 0
    assert len(h.bin_edges) == 101


def test_explicit_negatives_histogram():
    a = np.eye(3)
    n = -a[:, None, :]
    h = overlap_histogram(a, a, n)
    assert h.negative_counts[0] == 3 and h.max_negative == -1.0


# --- domain classifier ----------------------------------------------------------------------


def test_identical_distributions_are_indistinguishable():
    x = sample_uniform_sphere(10, 5000, RngStream(18))
    y = sample_uniform_sphere(10, 5000, RngStream(19))
    assert abs(domain_classifier_accuracy(x, y) - 0.5) < 0.03


def test_separated_clusters_are_classified():
    rng = np.random.default_rng(20)
    x = rng.normal(size=(1000, 4)) + 10
    y = rng.normal(size=(1000, 4)) - 10
    assert domain_classifier_accuracy(x, y) > 0.99


def test_opposite_vmf_latents_are_distinguishable():
    x = sample_vmf(VmfParams(pole(10), 20.0), 5000, RngStream(21))
    y = sample_vmf(VmfParams(-pole(10), 20.0), 5000, RngStream(22))
    assert domain_classifier_accuracy(x, y) > 0.95


def test_domain_classifier_validation():
    with pytest.raises(InvalidArgumentError):
        domain_classifier_accuracy(np.ones((1, 3)), np.ones((5, 3)))
    with pytest.raises(InvalidArgumentError):
        domain_classifier_accuracy(np.ones((5, 3)), np.ones((5, 2)))


# --- reports -----------------------------------------------------------------------------


def test_report_json_roundtrip(tmp_path):
    lam = np.r_[np.full(2, 5.0), np.full(2, 25.0)]
    z = sample_uniform_sphere(4, 500, RngStream(23))
    rep = evaluate_latents(z, z @ block_orthogonal([2, 2], 3), lam, lam_hat=lam[::-1] * 1.1)
    rep.loss = float("nan")
    text = rep.to_json(tmp_path / "r.json")
    back = EvalReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
    assert json.loads(text) == back.to_dict()
    assert back.r2_all == rep.r2_all and back.loss is None
    np.testing.assert_allclose(back.lambda_raw_errors, 0.1)
    assert rep.ortho_residual < 1e-10 and rep.n_eval == 100


def test_report_schema_version_checked():
    with pytest.raises(InvalidArgumentError):
        EvalReport.from_dict({"schema_version": 99})
