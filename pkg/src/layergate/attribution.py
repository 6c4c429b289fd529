"""Layer-attribution profiles from captured pooler attention.

The pooler's post-softmax weights have shape (batch, frames, heads, queries,
layers).  The accumulator keeps streaming sums so arbitrarily many batches
reduce to the same profiles as one concatenated pass: a modality profile over
layers, per-head and per-query breakdowns, and a TR-resolved (frame, layer)
map.  All four are exact linear reductions of the same accumulated mean, and
every profile row is a convex combination of softmax rows, so rows sum to 1.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import torch

from .encoder import EncodingNetwork, stack_windows
from .features import StimulusWindow
from .validation import check_positive_int

__all__ = [
    "PROFILE_KINDS",
    "AttributionAccumulator",
    "collect_attention",
    "profile_to_csv",
]

PROFILE_KINDS = ("modality", "per_head", "per_query", "tr_resolved")


class AttributionAccumulator:
    """Streaming reducer over (batch, frames, heads, queries, layers) tensors."""

    def __init__(self):
        self._sum_hql: np.ndarray | None = None  # (heads, queries, layers)
        self._sum_tl: np.ndarray | None = None  # (frames, layers)
        self.n_windows = 0
        self.n_slots = 0  # accumulated batch * frame count

    def add(self, attn) -> "AttributionAccumulator":
        attn = attn.detach().cpu().numpy() if isinstance(attn, torch.Tensor) else np.asarray(attn)
        if attn.ndim != 5:
            raise ValueError(f"expected (batch, frames, heads, queries, layers), got shape {attn.shape}")
        attn = attn.astype(np.float64)
        sum_hql = attn.sum(axis=(0, 1))
        sum_tl = attn.sum(axis=(0, 2, 3))
        if self._sum_hql is None:
            self._sum_hql = sum_hql
            self._sum_tl = sum_tl
        else:
            if sum_hql.shape != self._sum_hql.shape or sum_tl.shape != self._sum_tl.shape:
                raise ValueError(
                    f"attention shape drifted: accumulated {self._sum_hql.shape}/{self._sum_tl.shape}, "
                    f"got {sum_hql.shape}/{sum_tl.shape}"
                )
            self._sum_hql += sum_hql
            self._sum_tl += sum_tl
        self.n_windows += attn.shape[0]
        self.n_slots += attn.shape[0] * attn.shape[1]
        return self

    def merge(self, other: "AttributionAccumulator") -> "AttributionAccumulator":
        """Combine two accumulators (order-insensitive, for parallel workers)."""
        if other._sum_hql is None:
            return self
        if self._sum_hql is None:
            self._sum_hql = other._sum_hql.copy()
            self._sum_tl = other._sum_tl.copy()
        else:
            if other._sum_hql.shape != self._sum_hql.shape or other._sum_tl.shape != self._sum_tl.shape:
                raise ValueError("cannot merge accumulators with different attention shapes")
            self._sum_hql += other._sum_hql
            self._sum_tl += other._sum_tl
        self.n_windows += other.n_windows
        self.n_slots += other.n_slots
        return self

    def _mean_hql(self) -> np.ndarray:
        if self._sum_hql is None or self.n_slots == 0:
            raise ValueError("no attention accumulated yet")
        return self._sum_hql / self.n_slots

    def profile(self, kind: str) -> np.ndarray:
        """One of the four reductions; rows always end in a layer axis."""
        if kind == "modality":
            return self._mean_hql().mean(axis=(0, 1))
        if kind == "per_head":
            return self._mean_hql().mean(axis=1)
        if kind == "per_query":
            return self._mean_hql().mean(axis=0)
        if kind == "tr_resolved":
            heads, queries, _ = self._sum_hql.shape
            return self._sum_tl / (self.n_windows * heads * queries)
        raise ValueError(f"unknown profile kind {kind!r}; expected one of {PROFILE_KINDS}")

    def profiles(self) -> dict[str, np.ndarray]:
        return {kind: self.profile(kind) for kind in PROFILE_KINDS}


def collect_attention(
    model: EncodingNetwork,
    windows: list[StimulusWindow],
    batch_size: int = 16,
    max_batches: int | None = None,
) -> dict[str, AttributionAccumulator]:
    """Run capture-enabled forward passes and accumulate per-modality weights.

    Runs in inference mode (no dropout), so the captured weights are the ones
    the deployed model actually uses.
    """
    check_positive_int(batch_size, "batch_size")
    if model.spec.pooler_kind != "xattn":
        raise ValueError(f"attribution requires the xattn pooler, model uses {model.spec.pooler_kind!r}")
    accumulators: dict[str, AttributionAccumulator] = {}
    model.eval()
    with torch.no_grad():
        for batch_idx, start in enumerate(range(0, len(windows), batch_size)):
            if max_batches is not None and batch_idx >= max_batches:
                break
            batch = windows[start:start + batch_size]
            features, subjects, _ = stack_windows(batch)
            model(features, subjects, capture=True)
            for m, attn in model.captured_attention().items():
                accumulators.setdefault(m, AttributionAccumulator()).add(attn)
    if not accumulators:
        raise ValueError("no attention captured; is the window list empty?")
    return accumulators


def profile_to_csv(profile: np.ndarray, path, row_name: str = "row") -> Path:
    """Write a (rows, layers) or (layers,) profile with one column per layer."""
    profile = np.atleast_2d(np.asarray(profile, dtype=np.float64))
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([row_name] + [f"layer_{l}" for l in range(profile.shape[1])])
        for r in range(profile.shape[0]):
            writer.writerow([r] + [repr(float(v)) for v in profile[r]])
    return path
