"""Validation-weighted prediction ensembling.

Member predictions are combined per subject and parcel with softmax weights
over the members' validation scores at temperature tau; the combination is
convex, so as tau -> 0 it approaches picking each parcel's best member.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation import as_float_array, check_finite, check_positive_int

__all__ = [
    "compute_weights",
    "ensemble_predict",
    "select_top_members",
    "EnsembleSpec",
]


def compute_weights(rho: np.ndarray, tau: float = 0.3) -> np.ndarray:
    """Softmax over the member axis (axis 0) of validation scores.

    Stabilized by subtracting the per-slot maximum before exponentiating, so
    small temperatures saturate cleanly onto the argmax member instead of
    overflowing.
    """
    if not (tau > 0):
        raise ValueError(f"tau must be positive, got {tau}")
    rho = check_finite(np.asarray(rho, dtype=np.float64), "rho")
    if rho.ndim < 1 or rho.shape[0] < 1:
        raise ValueError("rho needs a leading member axis")
    z = (rho - rho.max(axis=0, keepdims=True)) / tau
    w = np.exp(z)
    return w / w.sum(axis=0, keepdims=True)


def ensemble_predict(member_preds: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Convex per-parcel combination: (members, k_out, parcels) -> (k_out, parcels)."""
    member_preds = as_float_array(member_preds, "member_preds", ndim=3)
    weights = as_float_array(weights, "weights", ndim=2)
    if weights.shape != (member_preds.shape[0], member_preds.shape[2]):
        raise ValueError(
            f"weights must be (members, parcels) = ({member_preds.shape[0]}, {member_preds.shape[2]}), "
            f"got {weights.shape}"
        )
    if np.any(weights < 0) or not np.allclose(weights.sum(axis=0), 1.0, atol=1e-8):
        raise ValueError("weights must be non-negative and sum to 1 over members")
    return np.einsum("mkp,mp->kp", member_preds, weights)


def select_top_members(mean_scores: dict[str, float], n: int) -> list[str]:
    """Names of the n best members by mean validation score; ties break by name."""
    check_positive_int(n, "n")
    ranked = sorted(mean_scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [name for name, _ in ranked[:n]]


@dataclass
class EnsembleSpec:
    """Manifest of one ensemble: member checkpoints plus the temperature."""

    members: list[str]
    tau: float = 0.3
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if not (self.tau > 0):
            raise ValueError(f"tau must be positive, got {self.tau}")

    def to_json(self, path) -> Path:
        path = Path(path)
        payload = {"members": list(self.members), "tau": self.tau, **self.extras}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_json(cls, path) -> "EnsembleSpec":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        members = payload.pop("members")
        tau = payload.pop("tau")
        return cls(members=members, tau=tau, extras=payload)
