"""Evaluation: per-parcel Pearson scores and the analyses built on them.

Scores concatenate each subject's windows along the TR axis and correlate
predictions with targets per parcel.  On top of that live the
leave-one-modality-out ablation table, per-parcel dominant-modality labels,
modality-subset training runs, and linear probes of intermediate stages.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .encoder import EncodingNetwork, ModelSpec, stack_windows
from .features import MODALITIES, StimulusWindow, pool_to_tr
from .validation import check_in, check_positive_int

__all__ = [
    "pearson_per_parcel",
    "ScoreTable",
    "evaluate_model",
    "ablate_modality",
    "ablation_drops",
    "dominant_modality",
    "build_model",
    "subset_run",
    "PROBE_STAGES",
    "stage_representations",
    "stage_probe",
    "synthetic_network_map",
]

PROBE_STAGES = ("input", "post_pooler", "post_trunk", "output")


def pearson_per_parcel(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Sample Pearson correlation per column; constant columns score 0.

    Constancy is detected exactly (max equals min) so intercept-only
    predictions land on the zero sentinel instead of dividing rounding noise
    by rounding noise.
    """
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 2:
        raise ValueError(f"pred and truth must share a 2-d shape, got {pred.shape} vs {truth.shape}")
    if pred.shape[0] < 2:
        raise ValueError("need at least two samples per column")
    pc = pred - pred.mean(axis=0)
    tc = truth - truth.mean(axis=0)
    num = (pc * tc).sum(axis=0)
    denom = np.sqrt((pc**2).sum(axis=0) * (tc**2).sum(axis=0))
    constant = (pred.max(axis=0) == pred.min(axis=0)) | (truth.max(axis=0) == truth.min(axis=0))
    scores = np.zeros(pred.shape[1])
    valid = ~constant
    scores[valid] = num[valid] / denom[valid]
    return scores


@dataclass
class ScoreTable:
    """Per-parcel scores, one row per subject."""

    scores: np.ndarray  # (n_subjects, parcels)
    subjects: list[int]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.subjects):
            raise ValueError(
                f"scores must be (n_subjects, parcels); got {self.scores.shape} for {len(self.subjects)} subjects"
            )

    def mean_score(self) -> float:
        return float(self.scores.mean())

    def subject_means(self) -> np.ndarray:
        return self.scores.mean(axis=1)

    def network_means(self, network_ids: np.ndarray) -> np.ndarray:
        """Average scores within parcel groups: returns (n_subjects, n_networks)."""
        network_ids = np.asarray(network_ids)
        if network_ids.shape != (self.scores.shape[1],):
            raise ValueError("network_ids must assign one group per parcel")
        groups = np.unique(network_ids)
        return np.stack([self.scores[:, network_ids == g].mean(axis=1) for g in groups], axis=1)

    def to_csv(self, path) -> Path:
        """One row per parcel, one column per subject, plus a mean summary row."""
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parcel"] + [f"subject_{s}" for s in self.subjects])
            for p in range(self.scores.shape[1]):
                writer.writerow([p] + [repr(float(v)) for v in self.scores[:, p]])
            writer.writerow(["mean"] + [repr(float(v)) for v in self.subject_means()])
        return path


def _predict_windows(model: EncodingNetwork, windows, batch_size: int, active) -> list[np.ndarray]:
    preds = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            batch = windows[start:start + batch_size]
            features, subjects, _ = stack_windows(batch)
            if active is not None:
                features = {m: x for m, x in features.items() if m in active}
            out = model.predict(features, subjects, active=active)
            preds.extend(out[i].numpy() for i in range(out.shape[0]))
    return preds


def evaluate_model(
    model: EncodingNetwork,
    windows: list[StimulusWindow],
    batch_size: int = 16,
    active=None,
) -> ScoreTable:
    """Score per parcel across all of each subject's time points."""
    if not windows:
        raise ValueError("cannot evaluate on an empty window list")
    check_positive_int(batch_size, "batch_size")
    if active is None:
        active = tuple(MODALITIES)
    preds = _predict_windows(model, windows, batch_size, active)
    subjects = sorted({w.subject for w in windows})
    rows = []
    for s in subjects:
        idx = [i for i, w in enumerate(windows) if w.subject == s]
        pred = np.concatenate([preds[i] for i in idx], axis=0)
        truth = np.concatenate([windows[i].target for i in idx], axis=0)
        rows.append(pearson_per_parcel(pred, truth))
    return ScoreTable(scores=np.stack(rows), subjects=subjects)


def ablate_modality(
    model: EncodingNetwork,
    windows: list[StimulusWindow],
    modality: str,
    batch_size: int = 16,
    active=None,
) -> ScoreTable:
    """Score with one modality nulled at fusion time."""
    check_in(modality, MODALITIES, "modality")
    if active is None:
        active = tuple(MODALITIES)
    reduced = tuple(m for m in active if m != modality)
    if not reduced:
        raise ValueError(f"ablating {modality!r} would leave no active modality")
    return evaluate_model(model, windows, batch_size=batch_size, active=reduced)


def ablation_drops(
    model: EncodingNetwork,
    windows: list[StimulusWindow],
    batch_size: int = 16,
    active=None,
) -> tuple[ScoreTable, dict[str, ScoreTable], np.ndarray]:
    """Full scores, per-modality ablated scores, and the (3, parcels) drop table.

    Drops are full minus ablated, averaged over subjects, rows in canonical
    modality order.
    """
    full = evaluate_model(model, windows, batch_size=batch_size, active=active)
    ablated = {}
    drops = np.zeros((len(MODALITIES), full.scores.shape[1]))
    for i, m in enumerate(MODALITIES):
        ablated[m] = ablate_modality(model, windows, m, batch_size=batch_size, active=active)
        drops[i] = (full.scores - ablated[m].scores).mean(axis=0)
    return full, ablated, drops


def dominant_modality(drops: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-parcel dominant modality index and dominance strength.

    Dominant is the argmax drop (ties break toward the canonical order
    vision < audio < text); strength is the winning drop divided by the sum of
    positive drops, or 0 when no drop is positive.
    """
    drops = np.asarray(drops, dtype=np.float64)
    if drops.ndim != 2 or drops.shape[0] != len(MODALITIES):
        raise ValueError(f"drops must be ({len(MODALITIES)}, parcels), got {drops.shape}")
    dominant = drops.argmax(axis=0)
    positive = np.clip(drops, 0.0, None).sum(axis=0)
    strength = np.zeros(drops.shape[1])
    has_positive = positive > 0
    strength[has_positive] = drops.max(axis=0)[has_positive] / positive[has_positive]
    return dominant, strength


def build_model(spec: ModelSpec, seed: int) -> EncodingNetwork:
    """Construct a network with seeded parameter initialization."""
    torch.manual_seed(seed)
    return EncodingNetwork(spec)


def subset_run(
    spec: ModelSpec,
    train_windows: list[StimulusWindow],
    val_windows: list[StimulusWindow],
    cfg,
    subset,
):
    """Train a fresh model restricted to a modality subset; returns (result, table).

    The full trimodal subset goes through exactly this code path, so a subset
    equal to all modalities reproduces the standard run bit for bit.
    """
    from dataclasses import replace

    from .training import train

    subset = tuple(m for m in MODALITIES if m in subset)
    if not subset:
        raise ValueError("subset must contain at least one modality")
    cfg = replace(cfg, modalities=subset)
    model = build_model(spec, cfg.seed)
    result = train(model, train_windows, val_windows, cfg)
    table = evaluate_model(result.model, val_windows, batch_size=cfg.batch_size, active=subset)
    return result, table


# ---------------------------------------------------------------------------
# Stage probes
# ---------------------------------------------------------------------------

def stage_representations(
    model: EncodingNetwork,
    windows: list[StimulusWindow],
    stage: str,
    batch_size: int = 16,
) -> list[np.ndarray]:
    """Per-window (frames, width) representations at a pipeline stage."""
    check_in(stage, ("input", "post_pooler", "post_trunk"), "stage")
    reps = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            batch = windows[start:start + batch_size]
            if stage == "input":
                for win in batch:
                    parts = [win.features[m].data.mean(axis=0) for m in MODALITIES if m in win.features]
                    reps.append(np.concatenate(parts, axis=1))
                continue
            features, _, _ = stack_windows(batch)
            streams = model.pool_streams(features)
            if stage == "post_pooler":
                out = torch.cat([streams[m] for m in MODALITIES if m in streams], dim=-1)
            else:
                fused = model.fuse(streams, MODALITIES)
                out = model.trunk_forward(fused)
            reps.extend(out[i].numpy() for i in range(out.shape[0]))
    return reps


def stage_probe(
    model: EncodingNetwork,
    train_windows: list[StimulusWindow],
    val_windows: list[StimulusWindow],
    stage: str,
    design=None,
    batch_size: int = 16,
) -> ScoreTable:
    """Linear read-out of a pipeline stage, fitted per subject.

    Representations are block-averaged to the TR grid and passed to the lagged
    ridge baseline.  By default the probe disables the random projection so
    stages of different widths are compared within the same (unrestricted)
    linear hypothesis class.  ``stage='output'`` scores the model's own
    predictions, with no extra fitting.
    """
    check_in(stage, PROBE_STAGES, "stage")
    if stage == "output":
        return evaluate_model(model, val_windows, batch_size=batch_size)

    from .ridge import RidgeDesign, fit_window_ridge, score_window_ridge

    design = design or RidgeDesign(projection_dim=None)
    k_out = train_windows[0].k_out
    train_reps = stage_representations(model, train_windows, stage, batch_size)
    val_reps = stage_representations(model, val_windows, stage, batch_size)
    train_pooled = [pool_to_tr(r, k_out) for r in train_reps]
    val_pooled = [pool_to_tr(r, k_out) for r in val_reps]

    subjects = sorted({w.subject for w in val_windows})
    rows = []
    for s in subjects:
        tr_idx = [i for i, w in enumerate(train_windows) if w.subject == s]
        va_idx = [i for i, w in enumerate(val_windows) if w.subject == s]
        if not tr_idx or not va_idx:
            raise ValueError(f"subject {s} missing from train or val split")
        fit = fit_window_ridge(
            [train_pooled[i] for i in tr_idx],
            [train_windows[i].target for i in tr_idx],
            design,
        )
        pred = score_window_ridge(fit, [val_pooled[i] for i in va_idx])
        truth = np.concatenate([val_windows[i].target for i in va_idx], axis=0)
        rows.append(pearson_per_parcel(pred, truth))
    return ScoreTable(scores=np.stack(rows), subjects=subjects)


def synthetic_network_map(parcels: int, n_networks: int = 7) -> np.ndarray:
    """Deterministic parcel -> network assignment for grouped reporting."""
    check_positive_int(parcels, "parcels")
    check_positive_int(n_networks, "n_networks")
    return np.arange(parcels) % n_networks
