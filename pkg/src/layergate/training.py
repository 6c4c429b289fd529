"""Training loop: MSE under AdamW with a one-cycle schedule.

The schedule, batching, modality dropout, and checkpoint selection are all
driven by the run seed, and every step is logged, so two runs with identical
inputs produce bit-identical parameters and logs.  Model parameters update
with decoupled weight decay; the learning rate ramps linearly from zero to the
peak over the first tenth of the steps and cosine-anneals back to zero.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import EncodingNetwork, sample_modality_mask, stack_windows
from .features import MODALITIES, StimulusWindow
from .validation import check_in, check_positive_int, check_probability

__all__ = [
    "TrainConfig",
    "TrainResult",
    "NumericalInstabilityError",
    "lr_at",
    "train",
    "split_windows",
]


class NumericalInstabilityError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    peak_lr: float = 1e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 15
    batch_size: int = 16
    warmup_fraction: float = 0.1
    clip_norm: float = 1.0
    seed: int = 33
    precision: str = "full"
    normalize_targets: bool = True
    modalities: tuple[str, ...] | None = None  # restrict training to a subset

    def __post_init__(self):
        if not (self.peak_lr > 0):
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        check_positive_int(self.epochs, "epochs")
        check_positive_int(self.batch_size, "batch_size")
        check_probability(self.warmup_fraction, "warmup_fraction", closed_top=True)
        if not (self.clip_norm > 0):
            raise ValueError(f"clip_norm must be positive, got {self.clip_norm}")
        check_in(self.precision, ("full", "mixed"), "precision")
        if self.modalities is not None:
            self.modalities = tuple(self.modalities)
            for m in self.modalities:
                check_in(m, MODALITIES, "modalities entry")
            if not self.modalities:
                raise ValueError("modalities subset must be non-empty")


@dataclass
class TrainResult:
    model: EncodingNetwork
    best_epoch: int
    best_val_pearson: float
    epoch_scores: list[float]
    log_lines: list[str] = field(repr=False, default_factory=list)
    config: TrainConfig | None = None

    def write_log(self, path) -> Path:
        path = Path(path)
        path.write_text("\n".join(self.log_lines) + "\n", encoding="utf-8")
        return path


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """One-cycle learning rate at a 1-indexed optimizer step.

    Linear ramp 0 -> peak over the first ceil(warmup_fraction * total_steps)
    steps, then cosine from peak back to 0 at ``total_steps``.
    """
    check_positive_int(total_steps, "total_steps")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(cfg.warmup_fraction * total_steps)
    if step <= warmup:
        return cfg.peak_lr * step / warmup if warmup > 0 else cfg.peak_lr
    span = total_steps - warmup
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def split_windows(windows: list[StimulusWindow], val_fraction: float = 0.2):
    """Deterministic tail split: the last ``val_fraction`` of windows validate."""
    check_probability(val_fraction, "val_fraction")
    n_val = int(round(len(windows) * val_fraction))
    n_val = min(max(n_val, 1), len(windows) - 1)
    return windows[:-n_val], windows[-n_val:]


def _target_stats(windows: list[StimulusWindow]) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate([w.target for w in windows], axis=0).astype(np.float64)
    mean = stacked.mean(axis=0)
    std = stacked.std(axis=0)
    std[std == 0] = 1.0
    return mean, std


def _allowed_modalities(cfg: TrainConfig, windows: list[StimulusWindow]) -> tuple[str, ...]:
    present = set(windows[0].features.keys())
    wanted = cfg.modalities if cfg.modalities is not None else MODALITIES
    allowed = tuple(m for m in MODALITIES if m in present and m in wanted)
    if not allowed:
        raise ValueError(f"no overlap between requested modalities {wanted} and available {sorted(present)}")
    return allowed


def train(
    model: EncodingNetwork,
    train_windows: list[StimulusWindow],
    val_windows: list[StimulusWindow],
    cfg: TrainConfig | None = None,
) -> TrainResult:
    """Fit ``model`` in place and return it at its best validation epoch."""
    from .scoring import evaluate_model  # deferred: scoring imports encoder too

    cfg = cfg or TrainConfig()
    if not train_windows or not val_windows:
        raise ValueError("both train and validation splits must be non-empty")
    allowed = _allowed_modalities(cfg, train_windows)

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    mean, std = _target_stats(train_windows)
    if cfg.normalize_targets:
        model.target_mean.copy_(torch.from_numpy(mean).to(model.target_mean.dtype))
        model.target_std.copy_(torch.from_numpy(std).to(model.target_std.dtype))

    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(
        params, lr=cfg.peak_lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay
    )

    n = len(train_windows)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    log_lines: list[str] = []
    epoch_scores: list[float] = []
    best_score = -np.inf
    best_epoch = 0
    best_state = None
    step = 0

    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [train_windows[i] for i in order[start:start + cfg.batch_size]]
            features, subjects, targets = stack_windows(batch)
            features = {m: features[m] for m in allowed if m in features}
            masks = torch.zeros(len(batch), len(MODALITIES), dtype=torch.bool)
            for row, _ in enumerate(batch):
                kept = sample_modality_mask(model.spec.encoder.modality_dropout, rng, allowed)
                for col, m in enumerate(MODALITIES):
                    masks[row, col] = m in kept

            step += 1
            lr = lr_at(step, total_steps, cfg)
            for group in optimizer.param_groups:
                group["lr"] = lr

            if cfg.precision == "mixed":
                with torch.autocast("cpu", dtype=torch.bfloat16):
                    preds = model(features, subjects, active=masks)
            else:
                preds = model(features, subjects, active=masks)
            normalized = (targets - model.target_mean) / model.target_std
            loss = torch.mean((preds.float() - normalized) ** 2)
            if not torch.isfinite(loss):
                raise NumericalInstabilityError(
                    f"non-finite loss at step {step} (epoch {epoch}); "
                    f"lr={lr:.3g}, batch of {len(batch)} windows"
                )

            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
            optimizer.step()
            log_lines.append(f"step\t{step}\t{lr!r}\t{loss.item()!r}")

        model.eval()
        table = evaluate_model(model, val_windows, batch_size=cfg.batch_size, active=allowed)
        score = float(table.mean_score())
        epoch_scores.append(score)
        log_lines.append(f"epoch\t{epoch}\t{score!r}")
        if score > best_score:
            best_score = score
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model,
        best_epoch=best_epoch,
        best_val_pearson=float(best_score),
        epoch_scores=epoch_scores,
        log_lines=log_lines,
        config=cfg,
    )


def train_config_meta(cfg: TrainConfig) -> dict:
    """JSON-safe echo of a train config for checkpoint metadata."""
    meta = asdict(cfg)
    meta["betas"] = list(cfg.betas)
    if cfg.modalities is not None:
        meta["modalities"] = list(cfg.modalities)
    return meta
