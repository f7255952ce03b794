"""
Tests for the L1-penalized logistic regression: solver, path and cross-validation.
"""

import json

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from cad_predictor.config.models import ImputeConfig, LassoConfig
from cad_predictor.core.exceptions import (
    FoldTooSmallError,
    GridEmptyError,
    NoClassVariationError,
)
from cad_predictor.glm import fit_logistic, with_intercept
from cad_predictor.impute import mice_pmm
from cad_predictor.lasso import (
    assign_folds,
    cd_fit,
    coordinate_descent,
    cv_select,
    fit_path,
    kkt_violation,
    lambda_max,
    lambda_path,
    lasso_across_imputations,
    lasso_penalty_mask,
    penalized_objective,
)
from cad_predictor.synth import generate
from cad_predictor.transform import fit_standardizer, log1p_matrix
from tests.factories import LassoConfigFactory, SynthConfigFactory


def _problem(n: int, p: int, seed: int):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n, p))
    X = fit_standardizer(raw).apply(raw)
    signal = X[:, 0] - 0.5 * X[:, min(1, p - 1)]
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-signal))).astype(float)
    return X, y


def _grid_minimum(X: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Brute-force objective minimum over slopes, optimizing the intercept exactly."""

    def profile(slopes: np.ndarray) -> float:
        eta = X @ slopes
        loss = minimize_scalar(lambda a: np.mean(np.logaddexp(0.0, a + eta) - y * (a + eta))).fun
        return float(loss + lam * np.abs(slopes).sum())

    p = X.shape[1]
    best = np.zeros(p)
    best_value = profile(best)
    for span, points in [(3.0, 31), (0.2, 21), (0.02, 21)]:
        axes = [np.linspace(b - span, b + span, points) for b in best]
        for slopes in np.array(np.meshgrid(*axes)).reshape(p, -1).T:
            value = profile(slopes)
            if value < best_value:
                best, best_value = slopes, value
    return best_value


class TestLambdaMax:
    def test_formula_without_unpenalized_columns(self):
        X, y = _problem(80, 4, 0)
        expected = np.abs(X.T @ (y - y.mean())).max() / 80
        assert lambda_max(X, y) == pytest.approx(expected, rel=1e-10)

    def test_all_zero_at_and_above(self):
        X, y = _problem(80, 4, 1)
        top = lambda_max(X, y)

        at_top = cd_fit(X, y, top)
        below = cd_fit(X, y, 0.9 * top)

        assert not at_top.coefficients[1:].any()
        assert at_top.coefficients[0] == pytest.approx(np.log(y.mean() / (1 - y.mean())), abs=1e-6)
        assert below.coefficients[1:].any()

    def test_no_penalized_columns(self):
        X, y = _problem(30, 2, 2)
        with pytest.raises(GridEmptyError):
            lambda_max(X, y, penalty_mask=[False, False])

    def test_single_class(self):
        X, _ = _problem(30, 2, 2)
        with pytest.raises(NoClassVariationError):
            lambda_max(X, np.ones(30))


ONE_SLOPE_PROBLEMS = [(n, seed) for seed, n in enumerate([30, 45, 60, 80, 100] * 2 + [60, 90])]
TWO_SLOPE_PROBLEMS = [(n, seed) for seed, n in enumerate([40, 60, 80, 100, 70, 50], start=20)]
THREE_SLOPE_PROBLEMS = [(60, 40), (100, 41)]


class TestCdFit:
    @pytest.mark.parametrize("n,seed", ONE_SLOPE_PROBLEMS)
    def test_matches_brute_force_one_slope(self, n, seed):
        X, y = _problem(n, 1, seed)
        lam = 0.3 * lambda_max(X, y)

        result = cd_fit(X, y, lam)
        grid = _grid_minimum(X, y, lam)

        assert result.converged
        assert result.objective <= grid + 1e-9
        assert grid - result.objective < 1e-3
        assert kkt_violation(X, y, result.coefficients, lam) < 1e-4

    @pytest.mark.slow
    @pytest.mark.parametrize("n,seed", TWO_SLOPE_PROBLEMS)
    def test_matches_brute_force_two_slopes(self, n, seed):
        X, y = _problem(n, 2, seed)
        lam = 0.2 * lambda_max(X, y)

        result = cd_fit(X, y, lam)
        grid = _grid_minimum(X, y, lam)

        assert result.objective <= grid + 1e-9
        assert grid - result.objective < 1e-2
        assert kkt_violation(X, y, result.coefficients, lam) < 1e-4

    @pytest.mark.slow
    @pytest.mark.parametrize("n,seed", THREE_SLOPE_PROBLEMS)
    def test_matches_brute_force_three_slopes(self, n, seed):
        X, y = _problem(n, 3, seed)
        lam = 0.2 * lambda_max(X, y)

        result = cd_fit(X, y, lam)
        grid = _grid_minimum(X, y, lam)

        assert result.objective <= grid + 1e-9
        assert grid - result.objective < 1e-2
        assert kkt_violation(X, y, result.coefficients, lam) < 1e-4

    def test_tiny_penalty_matches_unpenalized_fit(self):
        X, y = _problem(200, 3, 5)

        lasso = cd_fit(X, y, 1e-10)
        glm = fit_logistic(with_intercept(X), y)

        np.testing.assert_allclose(lasso.coefficients, glm.coefficients, atol=1e-3)

    def test_objective_reported(self):
        X, y = _problem(50, 3, 6)
        lam = 0.5 * lambda_max(X, y)
        result = cd_fit(X, y, lam)
        assert result.objective == pytest.approx(penalized_objective(X, y, result.coefficients, lam))

    def test_unpenalized_columns_always_fitted(self):
        X, y = _problem(100, 3, 7)
        mask = [True, True, False]
        result = cd_fit(X, y, 10.0, penalty_mask=mask)
        assert not result.coefficients[1:3].any()
        assert result.coefficients[3] != 0.0
        assert kkt_violation(X, y, result.coefficients, 10.0, mask) < 1e-4


class TestCoordinateDescent:
    def test_objective_never_increases(self):
        rng = np.random.default_rng(8)
        A = rng.normal(size=(20, 6))
        H = A.T @ A / 20
        c = rng.normal(size=6)
        penalized = np.r_[False, np.ones(5, dtype=bool)]
        trace = []

        solution = coordinate_descent(H, c, np.zeros(6), 0.1, penalized, 1e-10, 1000, objective_trace=trace)

        assert solution.converged
        assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


class TestPath:
    def test_grid_shape(self):
        X, y = _problem(80, 5, 9)
        config = LassoConfigFactory(lambda_grid_size=15, lambda_min_ratio=0.01)

        lambdas = lambda_path(X, y, config)

        assert lambdas.size == 15
        assert lambdas[0] == pytest.approx(lambda_max(X, y))
        assert lambdas[-1] / lambdas[0] == pytest.approx(0.01)
        assert np.all(np.diff(lambdas) < 0)

    def test_kkt_along_path(self):
        X, y = _problem(120, 8, 10)
        config = LassoConfigFactory(lambda_grid_size=12)
        lambdas = lambda_path(X, y, config)

        path = fit_path(X, y, lambdas, config)

        assert not path.coefficients[0, 1:].any()
        for lam, coefficients in zip(path.lambdas, path.coefficients):
            assert kkt_violation(X, y, coefficients, lam) < 1e-4
        counts = path.active_counts()
        assert counts[0] == 0
        assert counts[-1] > 0


class TestFolds:
    def test_near_equal_sizes(self):
        folds = assign_folds(23, 5, seed=0)
        assert sorted(np.bincount(folds).tolist()) == [4, 4, 5, 5, 5]

    def test_seeded(self):
        np.testing.assert_array_equal(assign_folds(40, 4, 3), assign_folds(40, 4, 3))
        assert not np.array_equal(assign_folds(40, 4, 3), assign_folds(40, 4, 4))

    def test_more_folds_than_rows(self):
        with pytest.raises(FoldTooSmallError):
            assign_folds(3, 4, 0)


class TestCvSelect:
    def test_single_positive_leaves_a_one_class_complement(self):
        X, _ = _problem(10, 2, 11)
        y = np.zeros(10)
        y[3] = 1.0
        with pytest.raises(FoldTooSmallError):
            cv_select(X, y, LassoConfigFactory(n_folds=5))

    def test_leave_one_out_ignores_fold_seed(self):
        X, y = _problem(30, 3, 12)
        first = cv_select(X, y, LassoConfigFactory(n_folds=30, lambda_grid_size=8, seed=1))
        second = cv_select(X, y, LassoConfigFactory(n_folds=30, lambda_grid_size=8, seed=2))

        np.testing.assert_allclose(first.cv_mean, second.cv_mean, rtol=1e-9)
        np.testing.assert_allclose(first.coefficients, second.coefficients)

    @pytest.mark.slow
    def test_recovers_planted_support(self):
        config = SynthConfigFactory(
            n_rows=400,
            n_metabolites=20,
            n_true_metabolites=3,
            effect_size=1.0,
            confounder_strength=0.0,
            block_structure=[],
            missing_rate=0.0,
            prevalence=0.5,
            seed=31,
        )
        table, truth = generate(config)
        names = table.schema.metabolite_names

        fit = cv_select(
            log1p_matrix(table.metabolites),
            table.outcome,
            LassoConfigFactory(n_folds=5, lambda_grid_size=30),
            feature_names=names,
        )

        assert set(truth.true_names) <= set(fit.selected_features)
        assert fit.lambdas[fit.selected_index] == fit.lambda_selected
        assert fit.cv_mean.shape == fit.cv_se.shape == (30,)

    def test_report_views(self):
        X, y = _problem(100, 4, 13)
        fit = cv_select(X, y, LassoConfigFactory(n_folds=4, lambda_grid_size=10), feature_names=["a", "b", "c", "d"])

        frame = fit.coefficient_frame()
        associations = fit.top_associations()

        assert list(frame["name"]) == ["(intercept)", "a", "b", "c", "d"]
        assert all(value > 0 for _, value in associations["positive"])
        assert all(value < 0 for _, value in associations["negative"])
        assert fit.to_dict()["n_selected"] == len(fit.selected_features)
        # Every column is penalized here.
        assert fit.active_set == fit.selected_features
        assert fit.predict_proba(X).shape == (100,)


class TestAcrossImputations:
    @pytest.fixture
    def imputed(self):
        table, _ = generate(SynthConfigFactory(n_rows=200, n_metabolites=8, block_structure=[], missing_rate=0.05))
        return mice_pmm(table, ImputeConfig(m_imputations=2, chain_iterations=2, seed=3))

    def test_penalty_mask_layout(self):
        assert lasso_penalty_mask(3, 2, False).tolist() == [True, True, True, False, False]
        assert lasso_penalty_mask(2, 1, True).all()

    def test_adjusted_report(self, imputed, tmp_path):
        config = LassoConfigFactory(n_folds=4, lambda_grid_size=10)

        report = lasso_across_imputations(imputed, config, adjusted=True, rows=range(150))

        schema = imputed.schema
        assert len(report.fits) == 2
        for fit in report.fits:
            assert fit.feature_names == schema.metabolite_names + schema.covariate_names
            assert set(fit.selected_features) <= set(schema.metabolite_names)
        assert set(report.intersection) <= set(report.union)

        report.save(tmp_path / "lasso")
        summary = json.loads((tmp_path / "lasso" / "active_sets.json").read_text())
        assert summary["selected_counts"] == report.selected_counts
        assert (tmp_path / "lasso" / "coefficients_imp2.csv").exists()
        assert (tmp_path / "lasso" / "cv_curve_imp1.csv").exists()
