"""High-level estimator: fit the full encoder on stimulus windows.

``GatedEncodingModel`` wraps network construction, target normalization,
training, and checkpoint selection behind the familiar
``fit`` / ``predict`` / ``score`` surface.  Fitted state lives in
underscore-suffixed attributes; ``get_params``/``set_params`` come from
``sklearn.base.BaseEstimator``.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator

from .encoder import EncoderConfig, ModelSpec, stack_windows
from .features import StimulusWindow
from .pooling import PoolerConfig
from .scoring import build_model, evaluate_model
from .training import TrainConfig, split_windows, train

__all__ = ["GatedEncodingModel", "infer_model_spec"]


def infer_model_spec(
    windows: list[StimulusWindow],
    encoder: EncoderConfig | None = None,
    pooler_kind: str = "xattn",
    pooler: PoolerConfig | None = None,
) -> ModelSpec:
    """Derive channel widths, parcels, subjects and k_out from the data."""
    if not windows:
        raise ValueError("cannot infer a model spec from zero windows")
    first = windows[0]
    channels = {m: f.n_channels for m, f in first.features.items()}
    enc = encoder or EncoderConfig()
    n_subjects = max(w.subject for w in windows) + 1
    if enc.parcels != first.parcels or enc.k_out != first.k_out or enc.n_subjects < n_subjects \
            or enc.max_frames < first.n_frames:
        from dataclasses import replace

        enc = replace(
            enc,
            parcels=first.parcels,
            k_out=first.k_out,
            n_subjects=max(enc.n_subjects, n_subjects),
            max_frames=max(enc.max_frames, first.n_frames),
        )
    return ModelSpec(
        channels=channels,
        encoder=enc,
        pooler_kind=pooler_kind,
        pooler=pooler or PoolerConfig(),
    )


class GatedEncodingModel(BaseEstimator):
    """Cross-attention layer pooling + temporal trunk + per-subject readout.

    Parameters
    ----------
    model_spec : ModelSpec or None
        Full architecture description; inferred from the data when None.
    train_config : TrainConfig or None
        Optimization settings; library defaults when None.
    val_fraction : float
        Tail fraction of ``fit``'s windows held out for checkpoint selection
        when no explicit validation split is passed.
    """

    def __init__(self, model_spec: ModelSpec | None = None,
                 train_config: TrainConfig | None = None, val_fraction: float = 0.2):
        self.model_spec = model_spec
        self.train_config = train_config
        self.val_fraction = val_fraction

    def fit(self, windows: list[StimulusWindow], val_windows: list[StimulusWindow] | None = None):
        cfg = self.train_config or TrainConfig()
        if val_windows is None:
            train_split, val_split = split_windows(windows, self.val_fraction)
        else:
            train_split, val_split = list(windows), list(val_windows)
        spec = self.model_spec or infer_model_spec(train_split)
        model = build_model(spec, cfg.seed)
        result = train(model, train_split, val_split, cfg)
        self.model_ = result.model
        self.result_ = result
        self.spec_ = spec
        self.best_epoch_ = result.best_epoch
        self.val_table_ = evaluate_model(
            result.model, val_split, batch_size=cfg.batch_size,
            active=cfg.modalities,
        )
        return self

    def predict(self, windows: list[StimulusWindow], active=None) -> np.ndarray:
        """(n_windows, k_out, parcels) predictions in target units."""
        if not hasattr(self, "model_"):
            raise RuntimeError("call fit before predict")
        cfg = self.train_config or TrainConfig()
        if active is None:
            active = cfg.modalities
        outs = []
        self.model_.eval()
        with torch.no_grad():
            for start in range(0, len(windows), cfg.batch_size):
                batch = windows[start:start + cfg.batch_size]
                features, subjects, _ = stack_windows(batch)
                if active is not None:
                    features = {m: x for m, x in features.items() if m in active}
                outs.append(self.model_.predict(features, subjects, active=active).numpy())
        return np.concatenate(outs, axis=0)

    def score(self, windows: list[StimulusWindow]) -> float:
        """Mean per-parcel Pearson over all subjects."""
        if not hasattr(self, "model_"):
            raise RuntimeError("call fit before score")
        cfg = self.train_config or TrainConfig()
        table = evaluate_model(
            self.model_, windows, batch_size=cfg.batch_size, active=cfg.modalities
        )
        return table.mean_score()
