import numpy as np
import pandas as pd
import pytest

from hierforecast.errors import DataError
from hierforecast.forest import ForestConfig, fit_forest
from hierforecast.metrics import (
    ale,
    lasso_coordinate_descent,
    lasso_select,
    mape,
    pinball,
    rmse,
    score_window,
)

rng = np.random.default_rng(31)


class TestLosses:
    def test_perfect_forecast(self):
        a = rng.uniform(1, 2, 50)
        assert mape(a, a) == 0.0
        assert rmse(a, a) == 0.0

    def test_hand_example(self):
        a = np.array([100.0, 100.0])
        f = np.array([110.0, 90.0])
        assert abs(mape(a, f) - 10.0) < 1e-12
        assert abs(rmse(a, f) - 10.0) < 1e-12

    def test_against_direct_formula(self):
        a = rng.uniform(0.5, 3, 1000)
        f = a + rng.normal(0, 0.3, 1000)
        assert abs(mape(a, f) - 100 * np.mean(np.abs(a - f) / np.abs(a))) < 1e-10
        assert abs(rmse(a, f) - np.sqrt(np.mean((a - f) ** 2))) < 1e-10

    def test_zero_actual_error_lists_positions(self):
        idx = pd.date_range("2021-01-01", periods=3, freq="30min")
        a = pd.Series([1.0, 0.0, 2.0], index=idx)
        with pytest.raises(DataError, match="zero actuals"):
            mape(a, np.ones(3))

    def test_permutation_invariance(self):
        a = rng.uniform(1, 2, 200)
        f = a + rng.normal(0, 0.1, 200)
        perm = rng.permutation(200)
        assert abs(mape(a, f) - mape(a[perm], f[perm])) < 1e-12
        assert abs(rmse(a, f) - rmse(a[perm], f[perm])) < 1e-12

    def test_scaling(self):
        a = rng.uniform(1, 2, 100)
        f = a + rng.normal(0, 0.1, 100)
        assert abs(rmse(3 * a, 3 * f) - 3 * rmse(a, f)) < 1e-10
        assert abs(mape(3 * a, 3 * f) - mape(a, f)) < 1e-10

    def test_usable_mask(self):
        a = np.array([1.0, 0.0, 2.0])
        f = np.array([1.0, 5.0, 2.0])
        usable = np.array([True, False, True])
        assert mape(a, f, usable=usable) == 0.0

    def test_pinball_half_mae(self):
        a = rng.normal(size=300)
        f = a + rng.normal(0, 1, 300)
        assert abs(pinball(a, f, 0.5) - 0.5 * np.mean(np.abs(a - f))) < 1e-12

    def test_pinball_single_point(self):
        assert abs(pinball([10.0], [8.0], 0.9) - 1.8) < 1e-12

    def test_pinball_minimizer_is_quantile(self):
        y = rng.normal(size=4000)
        q = 0.8
        grid = np.linspace(-3, 3, 601)
        losses = [pinball(y, np.full_like(y, c), q) for c in grid]
        best = grid[int(np.argmin(losses))]
        assert abs(best - np.quantile(y, q)) < 0.05

    def test_score_window(self):
        a = rng.uniform(1, 2, 50)
        f = a + 0.1
        rep = score_window(a, f, "w", quantile_forecasts={0.5: f})
        assert rep.window == "w" and rep.rmse > 0 and 0.5 in rep.pinball


class TestAle:
    def test_ignored_variable_flat(self):
        n = 500
        x = rng.normal(size=n)
        dead = rng.normal(size=n)
        df = pd.DataFrame({"y": 3 * x + rng.normal(0, 0.1, n), "x": x, "dead": dead})
        # the forest never sees "dead", so every local effect is exactly zero
        forest = fit_forest(df, "y", ForestConfig(n_trees=30, seed=1), features=["x"])
        curve = ale(forest, df, "dead", n_bins=10)
        assert np.max(np.abs(curve.effect)) < 1e-8

    def test_additive_recovery(self):
        n = 5000
        x1 = rng.uniform(-1, 1, n)
        x2 = rng.uniform(-1, 1, n)
        g = np.sin(np.pi * x1)
        h = x2 ** 2
        df = pd.DataFrame({"y": g + h + rng.normal(0, 0.05, n), "x1": x1, "x2": x2})
        forest = fit_forest(df, "y", ForestConfig(n_trees=100, mtry=2, seed=3))
        curve = ale(forest, df, "x1", n_bins=30)
        centers = curve.bin_centers
        truth = np.sin(np.pi * centers)
        truth_centered = truth - np.sum(truth * curve.counts) / curve.counts.sum()
        assert np.sqrt(np.mean((curve.effect - truth_centered) ** 2)) < 0.1

    def test_centering(self):
        n = 800
        x = rng.uniform(0, 1, n)
        df = pd.DataFrame({"y": x ** 2 + rng.normal(0, 0.05, n), "x": x})
        forest = fit_forest(df, "y", ForestConfig(n_trees=30, seed=4))
        curve = ale(forest, df, "x", n_bins=15)
        weighted_mean = np.sum(curve.effect * curve.counts) / curve.counts.sum()
        assert abs(weighted_mean) < 1e-8

    def test_quantile_readout(self):
        n = 600
        x = rng.uniform(0, 1, n)
        df = pd.DataFrame({"y": x + (1 + x) * rng.normal(0, 0.2, n), "x": x})
        forest = fit_forest(df, "y", ForestConfig(n_trees=40, seed=5))
        hi = ale(forest, df, "x", quantile_level=0.9, n_bins=10)
        assert hi.quantile_level == 0.9
        assert hi.effect.max() > hi.effect.min()

    def test_constant_variable_rejected(self):
        df = pd.DataFrame({"y": rng.normal(size=50), "x": rng.normal(size=50), "c": np.ones(50)})
        forest = fit_forest(df, "y", ForestConfig(n_trees=5, seed=6))
        with pytest.raises(DataError, match="constant"):
            ale(forest, df, "c")


class TestLasso:
    def test_orthonormal_single_pick(self):
        n = 400
        X = rng.normal(size=(n, 4))
        y = 3.0 * X[:, 0] + rng.normal(0, 0.1, n)
        df = pd.DataFrame(X, columns=["x1", "x2", "x3", "x4"])
        df["y"] = y
        assert lasso_select(df, "y", 1) == {"x1"}

    def test_lambda_above_max_gives_empty_model(self):
        n = 200
        X = rng.normal(size=(n, 5))
        X = (X - X.mean(axis=0)) / X.std(axis=0)
        y = X[:, 1] + rng.normal(0, 0.2, n)
        y = y - y.mean()
        lam_max = np.max(np.abs(X.T @ y)) / n
        beta = lasso_coordinate_descent(X, y, lam_max * 1.01)
        assert np.all(beta == 0.0)

    def test_objective_non_increasing_over_sweeps(self):
        n, p = 150, 8
        X = rng.normal(size=(n, p))
        X = (X - X.mean(axis=0)) / X.std(axis=0)
        y = X[:, 0] - 2 * X[:, 3] + rng.normal(0, 0.3, n)
        y = y - y.mean()
        lam = 0.05

        def objective(b):
            r = y - X @ b
            return 0.5 * np.mean(r ** 2) + lam * np.abs(b).sum()

        prev = objective(np.zeros(p))
        for sweeps in (1, 2, 3, 5, 10):
            b = lasso_coordinate_descent(X, y, lam, max_sweeps=sweeps)
            cur = objective(b)
            assert cur <= prev + 1e-12
            prev = cur

    def test_kkt_at_convergence(self):
        n, p = 300, 10
        X = rng.normal(size=(n, p))
        X = (X - X.mean(axis=0)) / X.std(axis=0)
        y = 2 * X[:, 0] - X[:, 4] + rng.normal(0, 0.2, n)
        y = y - y.mean()
        lam = 0.1
        beta = lasso_coordinate_descent(X, y, lam)
        grad = X.T @ (y - X @ beta) / n
        for j in range(p):
            if beta[j] == 0.0:
                assert abs(grad[j]) <= lam + 1e-6
            else:
                assert abs(grad[j] - lam * np.sign(beta[j])) <= 1e-6

    def test_planted_support_recovery(self):
        hits = 0
        trials = 20
        for seed in range(trials):
            r = np.random.default_rng(seed)
            n, p, k = 500, 30, 5
            X = r.normal(size=(n, p))
            support = np.arange(k)
            beta_true = np.zeros(p)
            beta_true[support] = np.array([3.0, -2.5, 2.0, -3.5, 2.8])
            signal = X @ beta_true
            noise_sd = np.std(signal) / np.sqrt(10.0)  # SNR 10
            y = signal + r.normal(0, noise_sd, n)
            df = pd.DataFrame(X, columns=[f"v{j}" for j in range(p)])
            df["y"] = y
            picked = lasso_select(df, "y", k)
            if picked == {f"v{j}" for j in support}:
                hits += 1
        assert hits >= 0.95 * trials

    def test_one_hot_group_counts_once(self):
        n = 400
        g = rng.integers(0, 3, n)
        x = rng.normal(size=n)
        y = np.where(g == 0, 3.0, -1.0) + 0.01 * x + rng.normal(0, 0.1, n)
        df = pd.DataFrame({"g": pd.Categorical(g), "x": x, "y": y})
        picked = lasso_select(df, "y", 1)
        assert picked == {"g"}

    def test_n_wanted_validation(self):
        df = pd.DataFrame({"x": rng.normal(size=30), "y": rng.normal(size=30)})
        with pytest.raises(ValueError):
            lasso_select(df, "y", 0)
        with pytest.raises(ValueError):
            lasso_select(df, "y", 5)
