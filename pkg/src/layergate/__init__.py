"""layergate: multimodal brain-response encoding with learned layer pooling.

The package turns cached, layer-resolved network activations of a stimulus
into predicted parcel responses: learned queries pool the layer axis, modality
streams are fused and contextualized over time, and per-subject heads read out
parcel time series on the TR grid.  Fixed poolers, a lagged ridge baseline,
validation-weighted ensembling, and attention attribution round out the
toolkit.
"""

from .attribution import AttributionAccumulator, collect_attention
from .encoder import EncoderConfig, EncodingNetwork, ModelSpec, sample_modality_mask
from .ensemble import EnsembleSpec, compute_weights, ensemble_predict, select_top_members
from .estimators import GatedEncodingModel, infer_model_spec
from .features import (
    MODALITIES,
    LayerResolvedFeatures,
    PlantedSpec,
    StimulusWindow,
    generate_planted_dataset,
    load_dataset,
    make_planted_spec,
    pool_to_tr,
    read_features,
    save_dataset,
    write_features,
)
from .pooling import CrossAttentionLayerPooler, PoolerConfig, pool_depth_groups, pool_mean
from .ridge import LinearEncodingBaseline, RidgeDesign, fit_ridge_loocv, run_linear_baseline
from .scoring import (
    ScoreTable,
    ablation_drops,
    dominant_modality,
    evaluate_model,
    pearson_per_parcel,
    stage_probe,
    subset_run,
)
from .training import TrainConfig, TrainResult, lr_at, split_windows, train

__version__ = "0.1.0"

__all__ = [
    "AttributionAccumulator",
    "collect_attention",
    "EncoderConfig",
    "EncodingNetwork",
    "ModelSpec",
    "sample_modality_mask",
    "EnsembleSpec",
    "compute_weights",
    "ensemble_predict",
    "select_top_members",
    "GatedEncodingModel",
    "infer_model_spec",
    "MODALITIES",
    "LayerResolvedFeatures",
    "PlantedSpec",
    "StimulusWindow",
    "generate_planted_dataset",
    "load_dataset",
    "make_planted_spec",
    "pool_to_tr",
    "read_features",
    "save_dataset",
    "write_features",
    "CrossAttentionLayerPooler",
    "PoolerConfig",
    "pool_depth_groups",
    "pool_mean",
    "LinearEncodingBaseline",
    "RidgeDesign",
    "fit_ridge_loocv",
    "run_linear_baseline",
    "ScoreTable",
    "ablation_drops",
    "dominant_modality",
    "evaluate_model",
    "pearson_per_parcel",
    "stage_probe",
    "subset_run",
    "TrainConfig",
    "TrainResult",
    "lr_at",
    "split_windows",
    "train",
    "__version__",
]
