"""Lagged ridge baseline with closed-form leave-one-out model selection.

Pipeline: layer-mean features on the TR grid -> finite temporal lags
(zero-padded at each window start) -> optional sparse sign random projection
-> multi-output ridge whose per-parcel penalty is chosen by exact leave-one-out
cross-validation.  The LOO residuals for the whole penalty grid come from a
single eigendecomposition of X^T X via the hat-matrix identity
e_i = (y_i - yhat_i) / (1 - h_ii).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .features import MODALITIES, StimulusWindow, pool_to_tr
from .validation import as_float_array, check_finite

__all__ = [
    "default_lambda_grid",
    "RidgeDesign",
    "build_lagged_design",
    "projection_matrix",
    "sparse_project",
    "RidgeResult",
    "fit_ridge_loocv",
    "WindowRidgeFit",
    "fit_window_ridge",
    "score_window_ridge",
    "LinearEncodingBaseline",
    "baseline_features",
    "run_linear_baseline",
]


def default_lambda_grid() -> np.ndarray:
    """99 log-spaced penalties spanning exactly [1e-2, 1e7]."""
    return np.logspace(-2.0, 7.0, 99)


@dataclass
class RidgeDesign:
    """Structural choices of the baseline: lags, projection, penalty grid."""

    lags: tuple[int, ...] = (-4, -3, -2, -1, 0)
    projection_dim: Optional[int] = 1024
    projection_seed: int = 0
    grid: np.ndarray = field(default_factory=default_lambda_grid)

    def __post_init__(self):
        self.lags = tuple(int(l) for l in self.lags)
        if not self.lags:
            raise ValueError("lags must be non-empty")
        if len(set(self.lags)) != len(self.lags) or list(self.lags) != sorted(self.lags):
            raise ValueError(f"lags must be strictly ascending, got {self.lags}")
        if self.projection_dim is not None and self.projection_dim < 1:
            raise ValueError(f"projection_dim must be positive or None, got {self.projection_dim}")
        self.grid = np.asarray(self.grid, dtype=np.float64).ravel()
        if self.grid.size < 1 or np.any(self.grid <= 0) or np.any(np.diff(self.grid) <= 0):
            raise ValueError("penalty grid must be positive and strictly increasing")


def build_lagged_design(features: np.ndarray, lags) -> np.ndarray:
    """Concatenate shifted copies of the rows: block j holds features[t + lags[j]].

    Shifts that fall before the first or past the last row contribute zeros,
    so the design never borrows samples from outside the sequence.
    """
    features = as_float_array(features, "features", ndim=2)
    n, d = features.shape
    lags = tuple(int(l) for l in lags)
    out = np.zeros((n, len(lags) * d), dtype=np.float64)
    for j, lag in enumerate(lags):
        block = out[:, j * d:(j + 1) * d]
        if lag == 0:
            block[:] = features
        elif lag < 0:
            block[-lag:] = features[:lag]
        else:
            block[:-lag or None] = features[lag:] if lag < n else 0.0
    return out


def projection_matrix(d_in: int, design: RidgeDesign) -> np.ndarray:
    """Sparse sign matrix (d_in, projection_dim): entries {-s, 0, +s}.

    Each entry is non-zero with probability 1/sqrt(d_in), sign-balanced, with
    s chosen so squared norms are preserved in expectation.  Deterministic in
    the design's projection seed.
    """
    k = design.projection_dim
    density = 1.0 / np.sqrt(d_in)
    scale = np.sqrt(1.0 / (density * k))
    rng = np.random.default_rng(design.projection_seed)
    u = rng.random((d_in, k))
    return scale * ((u < density / 2).astype(np.float64) - ((u >= density / 2) & (u < density)))


def sparse_project(X: np.ndarray, design: RidgeDesign) -> np.ndarray:
    """Project columns down to ``projection_dim``; pass through narrower inputs."""
    X = as_float_array(X, "X", ndim=2)
    if design.projection_dim is None or X.shape[1] < design.projection_dim:
        return X
    return X @ projection_matrix(X.shape[1], design)


@dataclass
class RidgeResult:
    coef: np.ndarray  # (features, parcels)
    intercept: np.ndarray  # (parcels,)
    x_mean: np.ndarray  # (features,)
    chosen_lambda: np.ndarray  # (parcels,)
    loo_mse: np.ndarray  # (grid, parcels)
    grid: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept


def fit_ridge_loocv(X: np.ndarray, Y: np.ndarray, grid=None) -> RidgeResult:
    """Multi-output ridge with per-parcel exact LOOCV over a penalty grid.

    X and Y are centered internally; the stored intercept restores the means.
    Centering is estimated once on the full matrix and treated as fixed
    preprocessing, and the hat-matrix identity makes the returned LOO errors
    exact under that convention.  Ties on the LOO curve resolve to the
    smallest penalty.
    """
    X = check_finite(as_float_array(X, "X", ndim=2), "X")
    Y = check_finite(as_float_array(Y, "Y", ndim=2), "Y")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X and Y disagree on sample count: {X.shape[0]} vs {Y.shape[0]}")
    if X.shape[0] < 2:
        raise ValueError("need at least two samples")
    grid = np.asarray(default_lambda_grid() if grid is None else grid, dtype=np.float64).ravel()

    x_mean = X.mean(axis=0)
    y_mean = Y.mean(axis=0)
    Xc = X - x_mean
    Yc = Y - y_mean

    eigvals, eigvecs = np.linalg.eigh(Xc.T @ Xc)
    eigvals = np.maximum(eigvals, 0.0)
    rotated = Xc @ eigvecs  # (N, F)
    rotated_sq = rotated**2
    cross = rotated.T @ Yc  # (F, P)

    loo_mse = np.empty((grid.size, Y.shape[1]))
    for g, lam in enumerate(grid):
        inv = 1.0 / (eigvals + lam)
        hat_diag = rotated_sq @ inv
        resid = Yc - rotated @ (inv[:, None] * cross)
        loo = resid / (1.0 - hat_diag)[:, None]
        loo_mse[g] = np.mean(loo**2, axis=0)

    best = np.argmin(loo_mse, axis=0)
    chosen = grid[best]
    coef = np.empty((X.shape[1], Y.shape[1]))
    for g in np.unique(best):
        cols = best == g
        inv = 1.0 / (eigvals + grid[g])
        coef[:, cols] = eigvecs @ (inv[:, None] * cross[:, cols])
    intercept = y_mean - x_mean @ coef
    return RidgeResult(
        coef=coef,
        intercept=intercept,
        x_mean=x_mean,
        chosen_lambda=chosen,
        loo_mse=loo_mse,
        grid=grid,
    )


# ---------------------------------------------------------------------------
# Window-level pipeline (lag per window, stack, project, fit)
# ---------------------------------------------------------------------------

@dataclass
class WindowRidgeFit:
    design: RidgeDesign
    result: RidgeResult
    projection: Optional[np.ndarray]  # (lagged width, projection_dim) or None

    def transform(self, pooled_reps: list[np.ndarray]) -> np.ndarray:
        lagged = np.concatenate(
            [build_lagged_design(rep, self.design.lags) for rep in pooled_reps], axis=0
        )
        return lagged if self.projection is None else lagged @ self.projection


def fit_window_ridge(
    pooled_reps: list[np.ndarray],
    targets: list[np.ndarray],
    design: RidgeDesign | None = None,
) -> WindowRidgeFit:
    """Fit the lagged ridge on per-window TR-grid representations."""
    design = design or RidgeDesign()
    if len(pooled_reps) != len(targets) or not pooled_reps:
        raise ValueError("need matching, non-empty representation and target lists")
    lagged = np.concatenate([build_lagged_design(rep, design.lags) for rep in pooled_reps], axis=0)
    projection = None
    if design.projection_dim is not None and lagged.shape[1] >= design.projection_dim:
        projection = projection_matrix(lagged.shape[1], design)
        lagged = lagged @ projection
    stacked_targets = np.concatenate([np.asarray(t, dtype=np.float64) for t in targets], axis=0)
    result = fit_ridge_loocv(lagged, stacked_targets, design.grid)
    return WindowRidgeFit(design=design, result=result, projection=projection)


def score_window_ridge(fit: WindowRidgeFit, pooled_reps: list[np.ndarray]) -> np.ndarray:
    """Stacked (sum K, parcels) predictions for a list of windows."""
    return fit.result.predict(fit.transform(pooled_reps))


# ---------------------------------------------------------------------------
# sklearn-style estimator and the full baseline from stimulus windows
# ---------------------------------------------------------------------------

class LinearEncodingBaseline(BaseEstimator):
    """Lagged, optionally projected, LOOCV-selected ridge on feature rows.

    Parameters mirror :class:`RidgeDesign`.  ``groups`` marks window
    membership of the rows so lagging can zero-pad at each window start; with
    ``groups=None`` the rows are treated as one continuous sequence.
    """

    def __init__(self, lags=(-4, -3, -2, -1, 0), projection_dim: Optional[int] = 1024,
                 projection_seed: int = 0, alphas=None):
        self.lags = lags
        self.projection_dim = projection_dim
        self.projection_seed = projection_seed
        self.alphas = alphas

    def _design(self) -> RidgeDesign:
        grid = default_lambda_grid() if self.alphas is None else np.asarray(self.alphas, dtype=np.float64)
        return RidgeDesign(
            lags=tuple(self.lags),
            projection_dim=self.projection_dim,
            projection_seed=self.projection_seed,
            grid=grid,
        )

    @staticmethod
    def _split_groups(X, groups):
        X = check_finite(as_float_array(X, "X", ndim=2), "X")
        if groups is None:
            return [X]
        groups = np.asarray(groups)
        if groups.shape != (X.shape[0],):
            raise ValueError("groups must label every row of X")
        # Preserve row order: groups must be contiguous runs.
        boundaries = np.flatnonzero(np.diff(groups) != 0) + 1
        if len(np.unique(groups)) != len(boundaries) + 1:
            raise ValueError("groups must be contiguous runs of equal labels")
        return np.split(X, boundaries)

    def fit(self, X, Y, groups=None):
        Y = check_finite(as_float_array(Y, "Y", ndim=2), "Y")
        design = self._design()
        segments = self._split_groups(X, groups)
        targets = np.split(Y, np.cumsum([len(s) for s in segments])[:-1])
        fit = fit_window_ridge(segments, targets, design)
        self.fit_ = fit
        self.coef_ = fit.result.coef
        self.intercept_ = fit.result.intercept
        self.alpha_per_target_ = fit.result.chosen_lambda
        return self

    def predict(self, X, groups=None):
        segments = self._split_groups(X, groups)
        return score_window_ridge(self.fit_, segments)

    def score(self, X, Y, groups=None) -> float:
        from .scoring import pearson_per_parcel

        pred = self.predict(X, groups=groups)
        return float(pearson_per_parcel(pred, np.asarray(Y, dtype=np.float64)).mean())


def baseline_features(window: StimulusWindow) -> np.ndarray:
    """Layer-mean features of every modality on the TR grid, concatenated."""
    parts = [window.features[m].data.mean(axis=0) for m in MODALITIES if m in window.features]
    return pool_to_tr(np.concatenate(parts, axis=1), window.k_out)


def run_linear_baseline(
    train_windows: list[StimulusWindow],
    val_windows: list[StimulusWindow],
    design: RidgeDesign | None = None,
    on_train: bool = False,
):
    """Per-subject lagged ridge from layer-mean features; returns (table, fits).

    With ``on_train`` the returned table scores the training split instead of
    the validation split (useful for noiseless recovery checks).
    """
    from .scoring import ScoreTable, pearson_per_parcel

    design = design or RidgeDesign()
    subjects = sorted({w.subject for w in train_windows})
    rows = []
    fits = {}
    score_windows = train_windows if on_train else val_windows
    for s in subjects:
        tr = [w for w in train_windows if w.subject == s]
        va = [w for w in score_windows if w.subject == s]
        if not tr or not va:
            raise ValueError(f"subject {s} missing from a split")
        fit = fit_window_ridge([baseline_features(w) for w in tr], [w.target for w in tr], design)
        pred = score_window_ridge(fit, [baseline_features(w) for w in va])
        truth = np.concatenate([w.target for w in va], axis=0)
        rows.append(pearson_per_parcel(pred, truth))
        fits[s] = fit
    return ScoreTable(scores=np.stack(rows), subjects=subjects), fits
