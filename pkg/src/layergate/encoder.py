"""Whole-brain encoder: pooled modality streams -> parcel time series.

Per-modality streams are linearly projected to a shared width, concatenated in
a fixed order (vision, audio, text), tagged with learned absolute position
embeddings, contextualized by a pre-norm transformer whose attention uses
rotary phases, and read out by per-subject linear heads followed by
block-averaging from the stimulus grid down to the TR grid.

Dropped or absent modalities are replaced at fusion time by a null embedding
(zero by default, optionally learned).  Because the modality projectors carry
no bias, nulling a modality at fusion is exactly equivalent to feeding it a
zero stream upstream.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .features import MODALITIES, StimulusWindow, pool_matrix
from .pooling import CrossAttentionLayerPooler, PoolerConfig, depth_group_indices, pooled_width
from .validation import check_in, check_positive_int, check_probability

__all__ = [
    "EncoderConfig",
    "ModelSpec",
    "EncodingNetwork",
    "TemporalTransformer",
    "rotary_phases",
    "apply_rotary",
    "sample_modality_mask",
    "stack_windows",
]


@dataclass
class EncoderConfig:
    """Trunk and readout hyperparameters."""

    hidden: int = 128
    depth: int = 2
    heads: int = 4
    ff_mult: int = 4
    inner_dropout: float = 0.0
    modality_dropout: float = 0.3
    n_subjects: int = 2
    parcels: int = 50
    k_out: int = 20
    max_frames: int = 512
    learned_null: bool = False

    def __post_init__(self):
        check_positive_int(self.hidden, "hidden")
        if self.depth < 0:
            raise ValueError(f"depth must be >= 0, got {self.depth}")
        check_positive_int(self.heads, "heads")
        check_positive_int(self.ff_mult, "ff_mult")
        check_probability(self.inner_dropout, "inner_dropout")
        check_probability(self.modality_dropout, "modality_dropout")
        check_positive_int(self.n_subjects, "n_subjects")
        check_positive_int(self.parcels, "parcels")
        check_positive_int(self.k_out, "k_out")
        check_positive_int(self.max_frames, "max_frames")
        width = len(MODALITIES) * self.hidden
        if width % self.heads != 0:
            raise ValueError(f"fused width {width} must be divisible by heads ({self.heads})")
        if self.depth > 0 and (width // self.heads) % 2 != 0:
            raise ValueError(
                f"per-head width {width // self.heads} must be even for the rotary rotation"
            )


@dataclass
class ModelSpec:
    """Everything needed to rebuild a network: architecture plus input widths."""

    channels: dict[str, int]  # per-modality feature channels d_m
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pooler_kind: str = "xattn"
    pooler: PoolerConfig = field(default_factory=PoolerConfig)

    def __post_init__(self):
        check_in(self.pooler_kind, ("xattn", "mean", "depth_groups"), "pooler_kind")
        if not self.channels:
            raise ValueError("channels must name at least one modality")
        for m, d in self.channels.items():
            check_in(m, MODALITIES, "modality")
            check_positive_int(d, f"channels[{m}]")
            if self.pooler_kind == "xattn":
                self.pooler.validate_channels(d)

    def stream_width(self, modality: str) -> int:
        return pooled_width(self.pooler_kind, self.channels[modality], self.pooler)

    def to_dict(self) -> dict:
        return {
            "channels": dict(self.channels),
            "encoder": asdict(self.encoder),
            "pooler_kind": self.pooler_kind,
            "pooler": asdict(self.pooler),
        }

    @classmethod
    def from_dict(cls, spec: dict) -> "ModelSpec":
        return cls(
            channels={m: int(d) for m, d in spec["channels"].items()},
            encoder=EncoderConfig(**spec["encoder"]),
            pooler_kind=spec["pooler_kind"],
            pooler=PoolerConfig(**spec["pooler"]),
        )


# ---------------------------------------------------------------------------
# Rotary phase rotation
# ---------------------------------------------------------------------------

def rotary_phases(n_positions: int, head_dim: int, base: float = 10000.0,
                  dtype=torch.float32, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    """Cos/sin tables of shape (n_positions, head_dim // 2)."""
    if head_dim % 2 != 0:
        raise ValueError(f"head_dim must be even, got {head_dim}")
    inv_freq = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    angles = torch.arange(n_positions, dtype=torch.float64)[:, None] * inv_freq[None, :]
    return angles.cos().to(dtype=dtype, device=device), angles.sin().to(dtype=dtype, device=device)


def apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate interleaved channel pairs of (..., positions, head_dim) by position phase."""
    x_even, x_odd = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = x_even * cos - x_odd * sin
    out[..., 1::2] = x_even * sin + x_odd * cos
    return out


class _SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, dropout: float, rotary: bool):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.rotary = rotary
        self.qkv = nn.Linear(width, 3 * width)
        self.out_proj = nn.Linear(width, width)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, _ = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        shape = (B, T, self.heads, self.head_dim)
        q = q.view(shape).transpose(1, 2)  # (B, h, T, d_h)
        k = k.view(shape).transpose(1, 2)
        v = v.view(shape).transpose(1, 2)
        if self.rotary:
            cos, sin = rotary_phases(T, self.head_dim, dtype=x.dtype, device=x.device)
            q = apply_rotary(q, cos, sin)
            k = apply_rotary(k, cos, sin)
        attn = torch.softmax(q @ k.transpose(-2, -1) / self.head_dim**0.5, dim=-1)
        mixed = self.dropout(attn) @ v
        mixed = mixed.transpose(1, 2).reshape(B, T, -1)
        return self.out_proj(mixed)


class _Block(nn.Module):
    def __init__(self, width: int, heads: int, ff_mult: int, dropout: float, rotary: bool):
        super().__init__()
        self.ln1 = nn.LayerNorm(width)
        self.attn = _SelfAttention(width, heads, dropout, rotary)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(
            nn.Linear(width, ff_mult * width),
            nn.GELU(),
            nn.Linear(ff_mult * width, width),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class TemporalTransformer(nn.Module):
    """Pre-norm residual trunk over the frame axis; no causal mask."""

    def __init__(self, width: int, depth: int, heads: int, ff_mult: int = 4,
                 dropout: float = 0.0, rotary: bool = True):
        super().__init__()
        if width % heads != 0:
            raise ValueError(f"width {width} must be divisible by heads {heads}")
        if rotary and depth > 0 and (width // heads) % 2 != 0:
            raise ValueError(f"per-head width {width // heads} must be even for rotary phases")
        self.blocks = nn.ModuleList(
            _Block(width, heads, ff_mult, dropout, rotary) for _ in range(depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


# ---------------------------------------------------------------------------
# Modality dropout
# ---------------------------------------------------------------------------

def sample_modality_mask(p: float, rng: np.random.Generator, modalities=MODALITIES) -> frozenset:
    """Drop each modality independently with probability ``p``; never drop all.

    A draw that would silence every modality is rejected and resampled, so the
    returned set is always non-empty.
    """
    check_probability(p, "p")
    modalities = tuple(modalities)
    if not modalities:
        raise ValueError("modalities must be non-empty")
    while True:
        keep = rng.random(len(modalities)) >= p
        if keep.any():
            return frozenset(m for m, k in zip(modalities, keep) if k)


# ---------------------------------------------------------------------------
# Full network
# ---------------------------------------------------------------------------

class EncodingNetwork(nn.Module):
    """Pooler(s) + fusion + temporal trunk + per-subject readout."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        enc = spec.encoder
        self.width = len(MODALITIES) * enc.hidden

        if spec.pooler_kind == "xattn":
            self.poolers = nn.ModuleDict(
                {m: CrossAttentionLayerPooler(d, spec.pooler) for m, d in spec.channels.items()}
            )
        else:
            self.poolers = nn.ModuleDict()

        self.projectors = nn.ModuleDict(
            {m: nn.Linear(spec.stream_width(m), enc.hidden, bias=False) for m in spec.channels}
        )
        self.nulls = nn.ParameterDict(
            {
                m: nn.Parameter(torch.zeros(enc.hidden), requires_grad=enc.learned_null)
                for m in MODALITIES
            }
        )
        self.positions = nn.Parameter(torch.randn(enc.max_frames, self.width) * 0.02)
        self.trunk = TemporalTransformer(
            self.width, enc.depth, enc.heads, enc.ff_mult, enc.inner_dropout, rotary=True
        )
        self.subject_weight = nn.Parameter(torch.empty(enc.n_subjects, self.width, enc.parcels))
        self.subject_bias = nn.Parameter(torch.zeros(enc.n_subjects, enc.parcels))
        bound = self.width**-0.5
        nn.init.uniform_(self.subject_weight, -bound, bound)
        nn.init.uniform_(self.subject_bias, -bound, bound)

        # Target normalization statistics; identity until a trainer fits them.
        self.register_buffer("target_mean", torch.zeros(enc.parcels))
        self.register_buffer("target_std", torch.ones(enc.parcels))

    # -- pooling ----------------------------------------------------------

    def pool_streams(self, features: dict[str, torch.Tensor], capture: bool = False) -> dict[str, torch.Tensor]:
        """Collapse each (B, L, T, d) stack to a (B, T, width_m) stream."""
        streams = {}
        for m, stack in features.items():
            if self.spec.pooler_kind == "xattn":
                streams[m] = self.poolers[m](stack, capture=capture)
            elif self.spec.pooler_kind == "mean":
                streams[m] = stack.mean(dim=1)
            else:
                group_a, group_b = depth_group_indices(stack.shape[1])
                streams[m] = torch.cat(
                    [stack[:, group_a].mean(dim=1), stack[:, group_b].mean(dim=1)], dim=-1
                )
        return streams

    # -- fusion -----------------------------------------------------------

    def fuse(self, streams: dict[str, torch.Tensor], active) -> torch.Tensor:
        """Project streams and concatenate modality blocks in canonical order.

        ``active`` is either a collection of modality names applied to the
        whole batch, or a (B, 3) boolean mask over the canonical order.
        Inactive or absent modalities contribute their null embedding.
        """
        ref = next(iter(streams.values()))
        B, T = ref.shape[0], ref.shape[1]
        if isinstance(active, torch.Tensor):
            mask = active.to(dtype=torch.bool, device=ref.device)
            if mask.shape != (B, len(MODALITIES)):
                raise ValueError(f"active mask must be (batch, {len(MODALITIES)}), got {tuple(mask.shape)}")
        else:
            row = torch.tensor([m in active for m in MODALITIES], device=ref.device)
            mask = row.expand(B, len(MODALITIES))

        blocks = []
        for i, m in enumerate(MODALITIES):
            null_block = self.nulls[m].to(ref.dtype).expand(B, T, -1)
            if m in streams:
                projected = self.projectors[m](streams[m])
                keep = mask[:, i].view(B, 1, 1)
                blocks.append(torch.where(keep, projected, null_block))
            else:
                blocks.append(null_block)
        return torch.cat(blocks, dim=-1)

    # -- trunk and readout --------------------------------------------------

    def trunk_forward(self, fused: torch.Tensor) -> torch.Tensor:
        T = fused.shape[-2]
        if T > self.spec.encoder.max_frames:
            raise ValueError(f"sequence of {T} frames exceeds max_frames={self.spec.encoder.max_frames}")
        return self.trunk(fused + self.positions[:T].to(fused.dtype))

    def readout(self, latents: torch.Tensor, subjects: torch.Tensor) -> torch.Tensor:
        """Per-subject linear head at every frame, then block-average to k_out."""
        w = self.subject_weight[subjects]  # (B, width, P)
        b = self.subject_bias[subjects]  # (B, P)
        per_frame = torch.einsum("btw,bwp->btp", latents, w) + b[:, None, :]
        pool = torch.from_numpy(pool_matrix(per_frame.shape[1], self.spec.encoder.k_out, np.float64))
        pool = pool.to(dtype=per_frame.dtype, device=per_frame.device)
        return torch.einsum("kt,btp->bkp", pool, per_frame)

    def forward(self, features: dict[str, torch.Tensor], subjects: torch.Tensor,
                active=None, capture: bool = False) -> torch.Tensor:
        """Normalized-space predictions of shape (B, k_out, parcels)."""
        if active is None:
            active = MODALITIES
        streams = self.pool_streams(features, capture=capture)
        fused = self.fuse(streams, active)
        return self.readout(self.trunk_forward(fused), subjects)

    def predict(self, features: dict[str, torch.Tensor], subjects: torch.Tensor,
                active=None) -> torch.Tensor:
        """Predictions mapped back to target units via the stored statistics."""
        out = self.forward(features, subjects, active=active)
        return out * self.target_std + self.target_mean

    def captured_attention(self) -> dict[str, torch.Tensor]:
        """Post-softmax pooler weights from the last captured forward pass."""
        out = {}
        for m, pooler in self.poolers.items():
            if pooler.last_attention_ is not None:
                out[m] = pooler.last_attention_
        return out


def stack_windows(windows: list[StimulusWindow], device=None, dtype=torch.float32):
    """Batch windows into (features dict, subjects, targets) torch tensors.

    All windows must agree on shapes; ragged batches are rejected rather than
    padded.
    """
    if not windows:
        raise ValueError("cannot stack an empty batch")
    modalities = sorted(windows[0].features.keys())
    for win in windows[1:]:
        if sorted(win.features.keys()) != modalities:
            raise ValueError("windows disagree on available modalities")
    features = {}
    for m in modalities:
        stacks = [win.features[m].data for win in windows]
        shapes = {s.shape for s in stacks}
        if len(shapes) > 1:
            raise ValueError(f"modality {m}: inconsistent feature shapes {sorted(shapes)}")
        features[m] = torch.as_tensor(np.stack(stacks), dtype=dtype, device=device)
    subjects = torch.as_tensor([win.subject for win in windows], dtype=torch.long, device=device)
    targets = torch.as_tensor(
        np.stack([win.target for win in windows]), dtype=dtype, device=device
    )
    return features, subjects, targets
