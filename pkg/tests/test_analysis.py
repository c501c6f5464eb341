import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from tapm.analysis import (AnalysisError, ExplainedVarianceCurve, cosine_group_matrix,
                           dims_for_threshold, pca_explained_variance, per_sample_curves,
                           perturbations, power_eigenvalues, write_curves_csv,
                           write_group_matrix_csv)


def marchenko_pastur_curve(d, n):
    """Expected cumulative explained variance of isotropic Gaussian data, from MP quantiles."""
    g = d / n
    lo, hi = (1 - np.sqrt(g)) ** 2, (1 + np.sqrt(g)) ** 2
    grid = np.linspace(lo, hi, 200_001)
    dens = np.sqrt(np.clip((hi - grid) * (grid - lo), 0, None)) / (2 * np.pi * g * grid)
    cdf = np.cumsum(dens)
    cdf /= cdf[-1]
    q = np.interp(1 - (np.arange(d) + 0.5) / d, cdf, grid)  # largest first
    return np.cumsum(q) / q.sum()


def test_identical_within_group_and_orthogonal_across():
    e = np.eye(4)
    deltas = np.stack([e[0], 2 * e[0], e[1], 3 * e[1]])[None]
    res = cosine_group_matrix(deltas, ["a", "a", "b", "b"])
    np.testing.assert_allclose(res.matrix, [[1.0, 0.0], [0.0, 1.0]], atol=1e-12)
    assert res.groups == ("a", "b")


def test_self_pairs_are_excluded():
    rng = np.random.default_rng(0)
    deltas = rng.normal(size=(5, 4, 50))
    res = cosine_group_matrix(deltas, ["a", "a", "b", "b"])
    assert abs(res.matrix[0, 0]) < 0.5  # would be pulled toward 1 if self-pairs counted


def test_zero_norm_perturbations_are_counted_and_dropped():
    deltas = np.array([[[1.0, 0], [1.0, 0], [0, 0], [0, 1.0], [0, 1.0]]])
    res = cosine_group_matrix(deltas, ["a", "a", "a", "b", "b"])
    assert res.excluded == 1
    assert res.matrix[0, 0] == pytest.approx(1.0)


def test_group_needs_two_members():
    with pytest.raises(AnalysisError):
        cosine_group_matrix(np.ones((1, 3, 2)), ["a", "a", "b"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 4))
def test_group_matrix_symmetric_and_bounded(seed, samples):
    rng = np.random.default_rng(seed)
    deltas = rng.normal(size=(samples, 6, 8))
    res = cosine_group_matrix(deltas, ["x", "y", "x", "z", "y", "z"])
    np.testing.assert_allclose(res.matrix, res.matrix.T, atol=0)
    assert np.all(np.abs(res.matrix) <= 1)


def test_perturbations_shape():
    clean = np.zeros((3, 1, 2, 2))
    attacks = {"a": np.ones((3, 1, 2, 2)), "b": -np.ones((3, 1, 2, 2))}
    d = perturbations(attacks, clean, ["a", "b"])
    assert d.shape == (3, 2, 4)
    assert d[0, 1, 0] == -1


@pytest.mark.parametrize("method", ["power", "eigh"])
def test_rank_one_curve(method):
    v = np.random.default_rng(1).normal(size=20)
    rows = np.outer(np.arange(1.0, 7.0), v)
    curve = pca_explained_variance(rows, method)
    assert curve.fractions[0] == pytest.approx(1.0, abs=1e-9)
    assert dims_for_threshold(curve, 0.95) == 1


def test_isotropic_curve_follows_marchenko_pastur():
    d, n = 32, 512
    x = np.random.default_rng(2).normal(size=(n, d))
    curve = pca_explained_variance(x)
    np.testing.assert_allclose(curve.fractions, marchenko_pastur_curve(d, n), atol=0.03)


def test_isotropic_curve_is_linear_with_many_samples():
    d, n = 32, 20_000
    x = np.random.default_rng(3).normal(size=(n, d))
    curve = pca_explained_variance(x)
    k = np.arange(1, d + 1)
    np.testing.assert_allclose(curve.fractions, k / d, rtol=0.10)


def test_trace_identity():
    x = np.random.default_rng(4).normal(size=(10, 30)) * np.linspace(0.1, 3, 30)
    curve = pca_explained_variance(x)
    xc = x - x.mean(axis=0)
    total = np.sum(xc ** 2) / (len(x) - 1)
    assert curve.eigenvalues.sum() == pytest.approx(total, rel=1e-8)
    assert curve.total_variance == pytest.approx(total, rel=1e-12)


@pytest.mark.parametrize("size", [2, 8, 33, 64])
def test_power_iteration_matches_eigendecomposition(size):
    rng = np.random.default_rng(size)
    B = rng.normal(size=(size, size))
    A = B @ B.T
    ref = np.sort(np.linalg.eigvalsh(A))[::-1]
    got = power_eigenvalues(A)
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-9 * ref[0])


def test_identical_rows_are_degenerate():
    curve = pca_explained_variance(np.ones((5, 4)))
    assert curve.degenerate
    with pytest.raises(AnalysisError):
        dims_for_threshold(curve, 0.9)
    with pytest.raises(AnalysisError):
        pca_explained_variance(np.ones((1, 4)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 8), st.integers(1, 12)),
              elements=st.floats(-1, 1)))
def test_curves_nondecreasing_ending_at_one(x):
    curve = pca_explained_variance(x)
    if curve.degenerate:
        return
    assert np.all(np.diff(curve.fractions) >= -1e-12)
    assert curve.fractions[-1] == pytest.approx(1.0, abs=1e-9)
    assert curve.fractions[0] > 0


def test_dims_for_threshold_examples():
    curve = ExplainedVarianceCurve(np.array([0.5, 0.8, 0.95, 1.0]), np.ones(4), 4.0)
    assert dims_for_threshold(curve, 0.9) == 3
    assert dims_for_threshold(curve, 0.95) == 3
    with pytest.raises(AnalysisError):
        dims_for_threshold(curve, 1.0 + 1e-12)


def test_pooled_mode_gives_one_curve():
    deltas = np.random.default_rng(5).normal(size=(4, 6, 10))
    assert len(per_sample_curves(deltas)) == 4
    assert len(per_sample_curves(deltas, pooled=True)) == 1


def test_csv_exports(tmp_path):
    res = cosine_group_matrix(np.eye(4)[None], ["a", "a", "b", "b"])
    text = write_group_matrix_csv(tmp_path / "c.csv", res).read_text().splitlines()
    assert text[0] == "group,a,b"
    curves = per_sample_curves(np.random.default_rng(0).normal(size=(2, 3, 5)))
    curves.append(pca_explained_variance(np.zeros((3, 5))))
    lines = write_curves_csv(tmp_path / "p.csv", curves).read_text().splitlines()
    assert len(lines) == 4 and "degenerate" in lines[-1]
