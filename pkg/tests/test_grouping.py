import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jointmc.core import DataError, Dataset, LinearPredictor
from jointmc.discretize import LevelPartition
from jointmc.grouping import (
    GroupingBasis,
    build_env_basis,
    build_jtt_basis,
    constant_basis,
    density_ratio_columns,
    env_basis,
    eval_pseudolabels,
    fit_on_levelsets,
    jtt_basis,
    linear_basis,
)
from jointmc.oracles import EnvClassifier, fit_env_classifier
from jointmc.synth import ScmConfig, generate_gaussian, generate_scm
from jointmc.gaussian import BlockCov

from conftest import random_partition


def dense_per_bin(A, y, part, ridge=0.0, intercept=False):
    """Per-bin lstsq with an explicit (unpenalized) intercept column."""
    out = []
    for k in range(part.m):
        rows = part.assignment == k
        Ak = A[rows]
        if intercept:
            Ak = np.column_stack([Ak, np.ones(rows.sum())])
        pen = np.eye(Ak.shape[1])
        if intercept:
            pen[-1, -1] = 0.0
        G = Ak.T @ Ak + ridge * pen
        out.append(np.linalg.solve(G, Ak.T @ y[rows]))
    return np.array(out)


class TestFitOnLevelsets:
    def test_intercept_only_gives_bin_means(self, rng):
        part = random_partition(rng, 100, 4)
        y = rng.normal(size=100)
        fit = fit_on_levelsets(np.zeros((100, 0)), y, part, include_constant=True)
        means = [y[part.assignment == k].mean() for k in range(4)]
        np.testing.assert_allclose(fit.intercepts, means, atol=1e-12)
        np.testing.assert_allclose(eval_pseudolabels(fit, np.zeros((100, 0)), part), np.array(means)[part.assignment])

    def test_ones_column_without_intercept(self, rng):
        part = random_partition(rng, 80, 3)
        y = rng.normal(size=80)
        fit = fit_on_levelsets(np.ones((80, 1)), y, part)
        np.testing.assert_allclose(fit.coefs[:, 0], [y[part.assignment == k].mean() for k in range(3)], atol=1e-12)

    def test_exact_linear_fit(self, rng):
        part = random_partition(rng, 90, 3)
        A = rng.normal(size=(90, 2))
        lam = rng.normal(size=(3, 2))
        y = np.einsum("ij,ij->i", A, lam[part.assignment]) + np.array([0.5, -1, 2])[part.assignment]
        fit = fit_on_levelsets(A, y, part, include_constant=True)
        np.testing.assert_allclose(eval_pseudolabels(fit, A, part), y, atol=1e-10)
        np.testing.assert_allclose(fit.coefs, lam, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), ridge=st.sampled_from([0.0, 0.1, 5.0]), intercept=st.booleans())
    def test_dense_solver_oracle(self, seed, ridge, intercept):
        r = np.random.default_rng(seed)
        part = random_partition(r, 200, 4)
        part = LevelPartition(np.where(part.assignment < 4, part.assignment, 0), part.values)
        # guarantee enough rows per bin for a unique solution
        part = LevelPartition(np.arange(200) % 4, part.values)
        A, y = r.normal(size=(200, 3)), r.normal(size=200)
        fit = fit_on_levelsets(A, y, part, ridge, intercept)
        ref = dense_per_bin(A, y, part, ridge, intercept)
        np.testing.assert_allclose(fit.coefs, ref[:, :3], atol=1e-9)
        if intercept:
            np.testing.assert_allclose(fit.intercepts, ref[:, 3], atol=1e-9)
        assert np.all(np.isfinite(fit.cond))

    def test_singular_bin_min_norm(self):
        part = LevelPartition(np.zeros(5, dtype=int), [0.0])
        A = np.column_stack([np.arange(5.0), np.arange(5.0)])
        y = 2 * np.arange(5.0)
        fit = fit_on_levelsets(A, y, part)
        np.testing.assert_allclose(fit.coefs[0], [1.0, 1.0], atol=1e-10)
        assert not np.isfinite(fit.cond[0])

    def test_empty_bin_emits_value(self, rng):
        train = LevelPartition([0, 0, 0, 2, 2, 2], [0.1, 0.5, 0.9])
        A = rng.normal(size=(6, 1))
        fit = fit_on_levelsets(A, rng.normal(size=6), train, include_constant=True)
        assert list(fit.fitted) == [True, False, True] and fit.lambdas[1] is None
        other = LevelPartition([1, 1, 0], [0.1, 0.5, 0.9])
        out = eval_pseudolabels(fit, rng.normal(size=(3, 1)), other)
        np.testing.assert_array_equal(out[:2], [0.5, 0.5])

    def test_rowwise_oracle(self, rng):
        part = random_partition(rng, 60, 5)
        A, y = rng.normal(size=(60, 2)), rng.normal(size=60)
        fit = fit_on_levelsets(A, y, part, include_constant=True)
        manual = np.array([A[i] @ fit.coefs[part.assignment[i]] + fit.intercepts[part.assignment[i]] for i in range(60)])
        np.testing.assert_allclose(eval_pseudolabels(fit, A, part), manual, atol=1e-12)

    def test_mismatch(self, rng):
        part = random_partition(rng, 10, 2)
        with pytest.raises(DataError):
            fit_on_levelsets(np.ones((9, 1)), np.ones(10), part)
        with pytest.raises(DataError):
            fit_on_levelsets(np.ones((10, 1)), np.ones(10), part, ridge_lambda=-1)
        fit = fit_on_levelsets(np.ones((10, 1)), np.ones(10), part)
        with pytest.raises(DataError):
            eval_pseudolabels(fit, np.ones((10, 2)), part)

    def test_lambdas_serializable(self, rng):
        part = random_partition(rng, 30, 3)
        fit = fit_on_levelsets(rng.normal(size=(30, 2)), rng.normal(size=30), part, include_constant=True)
        d = fit.to_dict()
        assert len(d["lambdas"]) == 3 and len(d["lambdas"][0]) == 3


class TestBases:
    def test_env_zero_coefficients_uniform(self, rng):
        clf = EnvClassifier(np.zeros((3, 3)), np.zeros(2), np.ones(2), "linear")
        data = Dataset(rng.normal(size=(7, 1)), rng.normal(size=7))
        np.testing.assert_allclose(build_env_basis(clf, data), 1 / 3)

    def test_env_separable_one_hot(self):
        r = np.random.default_rng(1)
        envs = np.repeat([0, 1], 200)
        x = np.where(envs == 0, -6.0, 6.0) + r.uniform(-1, 1, 400)
        data = Dataset(x[:, None], np.zeros(400), envs)
        H = build_env_basis(fit_env_classifier(data, l2=1e-3, feature_map="linear"), data)
        np.testing.assert_allclose(H, np.eye(2)[envs], atol=0.02)

    def test_env_rows_sum_to_one(self, rng):
        clf = EnvClassifier(rng.normal(size=(6, 2)), np.zeros(2), np.ones(2), "quadratic")
        H = build_env_basis(clf, Dataset(rng.normal(size=(40, 1)), rng.normal(size=40)))
        assert H.shape == (40, 2) and np.all((H >= 0) & (H <= 1))
        np.testing.assert_allclose(H.sum(axis=1), 1.0, atol=1e-12)
        assert env_basis(clf).spans_constant

    def test_env_posteriors_on_scm(self):
        data = generate_scm(ScmConfig(n_per_env=5000, seed=3))
        clf = fit_env_classifier(data)
        P = clf.predict_proba(data.features, data.targets)
        for e in range(2):
            assert P[data.envs == e, e].mean() > 0.5

    def test_density_ratio(self, rng):
        clf = EnvClassifier(np.zeros((3, 2)), np.zeros(2), np.ones(2), "linear")
        data = Dataset(rng.normal(size=(4, 1)), rng.normal(size=4), [0, 1, 1, 1])
        np.testing.assert_allclose(density_ratio_columns(clf, data, np.array([0.25, 0.75])),
                                   np.tile([2.0, 2 / 3], (4, 1)))

    def test_jtt_perfect_model(self, rng):
        X = rng.normal(size=(20, 2))
        data = Dataset(X, X @ [1.0, 2.0] + 0.5)
        H = build_jtt_basis(LinearPredictor([1.0, 2.0], 0.5), data)
        np.testing.assert_allclose(H[:, 0], 0.0, atol=1e-24)
        np.testing.assert_array_equal(H[:, 1], 1.0)

    def test_jtt_constant_residual(self):
        data = Dataset(np.ones((5, 1)), np.full(5, 0.5))
        np.testing.assert_array_equal(build_jtt_basis(LinearPredictor([0.0]), data)[:, 0], 0.25)

    def test_jtt_recompute(self, rng):
        f = LinearPredictor(rng.normal(size=3), 0.2)
        data = Dataset(rng.normal(size=(30, 3)), rng.normal(size=30))
        expected = [(sum(f.coeffs[j] * data.features[i, j] for j in range(3)) + 0.2 - data.targets[i]) ** 2
                    for i in range(30)]
        np.testing.assert_allclose(build_jtt_basis(f, data)[:, 0], expected, rtol=1e-12)

    def test_linear_basis_residuals_orthogonal(self, rng):
        cov = BlockCov(np.array([[1, 0.3, 0.5], [0.3, 1, 0.6], [0.5, 0.6, 1.0]]), 1, 1)
        data = generate_gaussian(cov, None, 2000, 0)
        basis = linear_basis(data, 1)
        H = basis.evaluate(data.features, data.targets)
        Z = np.column_stack([data.features[:, :1], data.targets, np.ones(2000)])
        np.testing.assert_allclose(Z.T @ H[:, 0], 0.0, atol=1e-8)
        pop = linear_basis(data, 1, cov).evaluate(data.features, data.targets)
        assert np.corrcoef(H[:, 0], pop[:, 0])[0, 1] > 0.99

    def test_linear_basis_bad_split(self, rng):
        data = Dataset(rng.normal(size=(10, 2)), rng.normal(size=10))
        with pytest.raises(DataError):
            linear_basis(data, 2)

    @pytest.mark.parametrize("kind", ["constant", "environment", "hard_sample", "raw_linear"])
    def test_dict_roundtrip(self, rng, kind):
        X, y = rng.normal(size=(50, 3)), rng.normal(size=50)
        data = Dataset(X, y, np.arange(50) % 2)
        basis = {
            "constant": constant_basis,
            "environment": lambda: env_basis(fit_env_classifier(data, feature_map="linear")),
            "hard_sample": lambda: jtt_basis(LinearPredictor([1.0, 0.0, -1.0], 0.3)),
            "raw_linear": lambda: linear_basis(data, 1),
        }[kind]()
        back = GroupingBasis.from_dict(basis.to_dict())
        assert back.kind == kind and back.include_constant == basis.include_constant
        np.testing.assert_allclose(back.matrix(X, y), basis.matrix(X, y), atol=1e-12)

    def test_unknown_kind(self):
        with pytest.raises(DataError):
            GroupingBasis.from_dict({"kind": "nope"})
