"""Lagged ridge baseline: design construction, projection, exact LOOCV."""

import numpy as np
import pytest
from sklearn.base import clone

from layergate.features import generate_planted_dataset
from layergate.ridge import (
    LinearEncodingBaseline,
    RidgeDesign,
    build_lagged_design,
    default_lambda_grid,
    fit_ridge_loocv,
    fit_window_ridge,
    projection_matrix,
    run_linear_baseline,
    score_window_ridge,
    sparse_project,
)

from conftest import tiny_planted_spec


class TestLambdaGrid:
    def test_frozen_shape(self):
        grid = default_lambda_grid()
        assert grid.size == 99
        assert grid[0] == pytest.approx(1e-2)
        assert grid[-1] == pytest.approx(1e7)
        assert np.allclose(np.diff(np.log10(grid)), 9 / 98)


class TestLaggedDesign:
    def test_frozen_negative_lag(self):
        feats = np.arange(4, dtype=np.float64)[:, None]
        out = build_lagged_design(feats, (-1, 0))
        assert out.tolist() == [[0, 0], [0, 1], [1, 2], [2, 3]]

    def test_frozen_positive_lag(self):
        feats = np.arange(4, dtype=np.float64)[:, None]
        out = build_lagged_design(feats, (0, 1))
        assert out.tolist() == [[0, 1], [1, 2], [2, 3], [3, 0]]

    def test_loop_oracle(self, rng):
        feats = rng.standard_normal((7, 3))
        lags = (-2, 0, 1)
        out = build_lagged_design(feats, lags)
        assert out.shape == (7, 9)
        for t in range(7):
            for j, lag in enumerate(lags):
                src = t + lag
                block = out[t, j * 3 : (j + 1) * 3]
                if 0 <= src < 7:
                    assert np.array_equal(block, feats[src])
                else:
                    assert np.array_equal(block, np.zeros(3))

    def test_lag_larger_than_window_is_all_zero(self, rng):
        feats = rng.standard_normal((3, 2))
        out = build_lagged_design(feats, (-5, 5))
        assert np.all(out == 0)

    def test_design_validation(self):
        with pytest.raises(ValueError):
            RidgeDesign(lags=())
        with pytest.raises(ValueError):
            RidgeDesign(lags=(0, -1))
        with pytest.raises(ValueError):
            RidgeDesign(lags=(0, 0))
        with pytest.raises(ValueError):
            RidgeDesign(projection_dim=0)
        with pytest.raises(ValueError):
            RidgeDesign(grid=[1.0, 0.5])
        with pytest.raises(ValueError):
            RidgeDesign(grid=[-1.0, 1.0])


class TestProjection:
    def test_entry_values_and_density(self):
        d_in, k = 400, 1024
        design = RidgeDesign(projection_dim=k, projection_seed=3)
        mat = projection_matrix(d_in, design)
        density = 1 / np.sqrt(d_in)  # 0.05
        scale = np.sqrt(1 / (density * k))
        values = np.unique(mat)
        assert np.allclose(sorted(values), [-scale, 0.0, scale])
        frac_nonzero = np.count_nonzero(mat) / mat.size
        assert abs(frac_nonzero - density) < 0.005
        # Signs balance out.
        assert abs((mat > 0).sum() - (mat < 0).sum()) / mat.size < 0.005

    def test_norm_preserved_in_expectation(self, rng):
        d_in = 300
        x = rng.standard_normal(d_in)
        ratios = []
        for seed in range(30):
            design = RidgeDesign(projection_dim=1024, projection_seed=seed)
            y = x @ projection_matrix(d_in, design)
            ratios.append((y @ y) / (x @ x))
        assert abs(np.mean(ratios) - 1.0) < 0.1

    def test_seed_determinism(self):
        a = projection_matrix(64, RidgeDesign(projection_seed=5))
        b = projection_matrix(64, RidgeDesign(projection_seed=5))
        c = projection_matrix(64, RidgeDesign(projection_seed=6))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_narrow_input_passes_through(self, rng):
        X = rng.standard_normal((10, 32))
        design = RidgeDesign(projection_dim=1024)
        assert np.array_equal(sparse_project(X, design), X)
        assert sparse_project(X, RidgeDesign(projection_dim=None)).shape == (10, 32)

    def test_wide_input_is_projected(self, rng):
        X = rng.standard_normal((5, 80))
        out = sparse_project(X, RidgeDesign(projection_dim=16))
        assert out.shape == (5, 16)
        assert np.allclose(out, X @ projection_matrix(80, RidgeDesign(projection_dim=16)))


def brute_force_loo_mse(X, Y, lam):
    """Delete-one-row refits under the fixed full-data centering convention."""
    x_mean, y_mean = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - x_mean, Y - y_mean
    n, d = Xc.shape
    errs = np.empty_like(Yc)
    for i in range(n):
        mask = np.arange(n) != i
        A, B = Xc[mask], Yc[mask]
        coef = np.linalg.solve(A.T @ A + lam * np.eye(d), A.T @ B)
        errs[i] = Yc[i] - Xc[i] @ coef
    return np.mean(errs**2, axis=0)


class TestLoocv:
    def test_matches_brute_force(self, rng):
        X = rng.standard_normal((12, 5))
        Y = rng.standard_normal((12, 3))
        grid = np.array([0.1, 1.0, 10.0])
        result = fit_ridge_loocv(X, Y, grid)
        for g, lam in enumerate(grid):
            expected = brute_force_loo_mse(X, Y, lam)
            assert np.allclose(result.loo_mse[g], expected, rtol=1e-8, atol=1e-12)

    def test_coefficients_match_direct_solve(self, rng):
        X = rng.standard_normal((20, 6))
        Y = rng.standard_normal((20, 4))
        grid = np.array([0.5, 5.0, 50.0])
        result = fit_ridge_loocv(X, Y, grid)
        Xc = X - X.mean(axis=0)
        Yc = Y - Y.mean(axis=0)
        for p in range(4):
            lam = result.chosen_lambda[p]
            direct = np.linalg.solve(Xc.T @ Xc + lam * np.eye(6), Xc.T @ Yc[:, p])
            assert np.allclose(result.coef[:, p], direct, atol=1e-10)
        # The chosen penalty minimizes each parcel's LOO curve.
        assert np.array_equal(result.chosen_lambda, grid[np.argmin(result.loo_mse, axis=0)])

    def test_intercept_restores_means(self, rng):
        X = rng.standard_normal((15, 4)) + 3.0
        Y = rng.standard_normal((15, 2)) - 1.0
        result = fit_ridge_loocv(X, Y)
        assert np.allclose(result.predict(X.mean(axis=0)[None, :]), Y.mean(axis=0)[None, :], atol=1e-10)

    def test_noiseless_linear_map_selects_smallest_penalty(self, rng):
        X = rng.standard_normal((60, 8))
        W = rng.standard_normal((8, 5))
        result = fit_ridge_loocv(X, X @ W)
        assert np.all(result.chosen_lambda == result.grid[0])
        from layergate.scoring import pearson_per_parcel

        scores = pearson_per_parcel(result.predict(X), X @ W)
        assert scores.min() > 0.999

    def test_pure_noise_selects_large_penalty(self, rng):
        X = rng.standard_normal((25, 20))
        Y = rng.standard_normal((25, 6))
        result = fit_ridge_loocv(X, Y)
        assert np.median(result.chosen_lambda) > 1.0

    def test_validation(self, rng):
        with pytest.raises(ValueError):
            fit_ridge_loocv(np.zeros((3, 2)), np.zeros((4, 2)))
        with pytest.raises(ValueError):
            fit_ridge_loocv(np.zeros((1, 2)), np.zeros((1, 2)))
        bad = np.zeros((5, 2))
        bad[0, 0] = np.inf
        with pytest.raises(ValueError):
            fit_ridge_loocv(bad, np.zeros((5, 2)))


class TestWindowPipeline:
    def test_lags_do_not_leak_across_windows(self, rng):
        a = rng.standard_normal((6, 3))
        b = rng.standard_normal((6, 3))
        design = RidgeDesign(lags=(-1, 0), projection_dim=None, grid=[1.0])
        fit = fit_window_ridge([a, b], [rng.standard_normal((6, 2)) for _ in range(2)], design)
        stacked = fit.transform([a, b])
        # Window b starts fresh: its first row's lag block is zero padding,
        # not the last row of a.
        assert np.array_equal(stacked[6, :3], np.zeros(3))
        assert np.array_equal(stacked[6, 3:], b[0])
        assert np.array_equal(stacked[:6], build_lagged_design(a, (-1, 0)))

    def test_projection_engages_on_wide_designs(self, rng):
        reps = [rng.standard_normal((8, 10)) for _ in range(3)]
        targets = [rng.standard_normal((8, 2)) for _ in range(3)]
        narrow = fit_window_ridge(reps, targets, RidgeDesign(lags=(0,), projection_dim=16))
        assert narrow.projection is None  # width 10 < 16
        wide = fit_window_ridge(reps, targets, RidgeDesign(lags=(-1, 0), projection_dim=16))
        assert wide.projection is not None  # width 20 >= 16
        assert wide.projection.shape == (20, 16)
        assert wide.result.coef.shape == (16, 2)

    def test_score_stacks_windows(self, rng):
        reps = [rng.standard_normal((5, 4)) for _ in range(2)]
        targets = [rng.standard_normal((5, 3)) for _ in range(2)]
        design = RidgeDesign(lags=(0,), projection_dim=None, grid=[0.1])
        fit = fit_window_ridge(reps, targets, design)
        pred = score_window_ridge(fit, reps)
        assert pred.shape == (10, 3)
        single = np.vstack([score_window_ridge(fit, [r]) for r in reps])
        assert np.allclose(pred, single)


class TestEstimator:
    def test_sklearn_conventions(self):
        est = LinearEncodingBaseline(lags=(0,), projection_dim=None)
        params = est.get_params()
        assert params["lags"] == (0,)
        cloned = clone(est)
        assert cloned.get_params() == params

    def test_fit_recovers_linear_map(self, rng):
        X = rng.standard_normal((40, 6))
        W = rng.standard_normal((6, 3))
        est = LinearEncodingBaseline(lags=(0,), projection_dim=None)
        est.fit(X, X @ W)
        assert est.coef_.shape == (6, 3)
        assert est.alpha_per_target_.shape == (3,)
        assert est.score(X, X @ W) > 0.999

    def test_matches_functional_path(self, rng):
        X = rng.standard_normal((24, 5))
        Y = rng.standard_normal((24, 2))
        groups = np.repeat([0, 1, 2], 8)
        est = LinearEncodingBaseline(lags=(-1, 0), projection_dim=None, alphas=[0.5, 5.0])
        est.fit(X, Y, groups=groups)
        design = RidgeDesign(lags=(-1, 0), projection_dim=None, grid=[0.5, 5.0])
        segments = [X[:8], X[8:16], X[16:]]
        targets = [Y[:8], Y[8:16], Y[16:]]
        fit = fit_window_ridge(segments, targets, design)
        assert np.array_equal(est.predict(X, groups=groups), score_window_ridge(fit, segments))
        assert set(est.alpha_per_target_) <= {0.5, 5.0}

    def test_groups_must_be_contiguous(self, rng):
        X = rng.standard_normal((6, 2))
        Y = rng.standard_normal((6, 2))
        est = LinearEncodingBaseline(lags=(0,), projection_dim=None)
        with pytest.raises(ValueError):
            est.fit(X, Y, groups=np.array([0, 1, 0, 1, 0, 1]))
        with pytest.raises(ValueError):
            est.fit(X, Y, groups=np.array([0, 0, 1]))


class TestFullBaseline:
    def test_runs_on_planted_windows(self):
        ds = generate_planted_dataset(tiny_planted_spec(), 8, seed=17)
        train_w, val_w = ds.windows[:6], ds.windows[6:]
        design = RidgeDesign(lags=(-1, 0), projection_dim=None)
        table, fits = run_linear_baseline(train_w, val_w, design)
        assert table.subjects == [0, 1]
        assert set(fits) == {0, 1}
        assert np.isfinite(table.scores).all()

    def test_on_train_scores_train_split(self):
        # Single-layer features make the layer mean equal the planted layer,
        # so noiseless targets are an exact linear function of the design.
        spec = tiny_planted_spec(
            layer_counts={"vision": 1, "audio": 1, "text": 1},
            planted_layers={"vision": 0, "audio": 0, "text": 0},
            kernel=(1.0,),
            noise_std=0.0,
        )
        ds = generate_planted_dataset(spec, 6, seed=18)
        train_w, val_w = ds.windows[:4], ds.windows[4:]
        design = RidgeDesign(lags=(0,), projection_dim=None)
        table, _ = run_linear_baseline(train_w, val_w, design, on_train=True)
        assert table.mean_score() > 0.99

    def test_missing_subject_rejected(self):
        ds = generate_planted_dataset(tiny_planted_spec(), 5, seed=19)
        with pytest.raises(ValueError):
            run_linear_baseline(ds.windows[:4], [ds.windows[4]], RidgeDesign(projection_dim=None))
