"""Layer pooling: collapse (layers, frames, channels) to (frames, width).

Three interchangeable strategies:

* ``xattn``: learned queries cross-attend over the layer axis independently
  at every frame (multi-head, scaled dot product); the post-softmax weights
  can be captured for attribution.
* ``mean``: uniform average over layers.
* ``depth_groups``: averages over two relative-depth bands, concatenated.

The cross-attention pooler is written with explicit einsums rather than
``nn.MultiheadAttention`` so the full (batch, frames, heads, queries, layers)
weight tensor is available and dropout is applied exactly on the attention
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .validation import check_positive_int, check_probability

__all__ = [
    "POOLER_KINDS",
    "PoolerConfig",
    "CrossAttentionLayerPooler",
    "depth_group_indices",
    "pool_mean",
    "pool_depth_groups",
    "pooled_width",
]

POOLER_KINDS = ("xattn", "mean", "depth_groups")

# Relative-depth bands for the fixed two-group baseline, half-open at the
# bottom: a layer at exactly half depth belongs to neither band.
_GROUP_BANDS = ((0.5, 0.75), (0.75, 1.0))


@dataclass
class PoolerConfig:
    """Hyperparameters of the cross-attention layer pooler."""

    n_queries: int = 24
    heads: int = 4
    attention_dropout: float = 0.2

    def __post_init__(self):
        check_positive_int(self.n_queries, "n_queries")
        check_positive_int(self.heads, "heads")
        check_probability(self.attention_dropout, "attention_dropout")

    def validate_channels(self, channels: int) -> None:
        if channels % self.heads != 0:
            raise ValueError(f"channels ({channels}) must be divisible by heads ({self.heads})")


class CrossAttentionLayerPooler(nn.Module):
    """Learned-query attention over the layer axis of one modality.

    Input is a (batch, layers, frames, channels) stack; each of the
    ``n_queries`` learned queries attends over the ``layers`` tokens at every
    frame, heads are concatenated and passed through an output projection, and
    the per-query outputs are concatenated to (batch, frames,
    n_queries * channels).

    When ``capture`` is set, ``last_attention_`` holds the post-softmax,
    pre-dropout weights with shape (batch, frames, heads, queries, layers);
    capture never changes the computed output.
    """

    def __init__(self, channels: int, config: PoolerConfig | None = None):
        super().__init__()
        self.config = config or PoolerConfig()
        self.config.validate_channels(channels)
        self.channels = channels
        self.head_dim = channels // self.config.heads
        self.queries = nn.Parameter(torch.randn(self.config.n_queries, channels) * channels**-0.5)
        self.k_proj = nn.Linear(channels, channels)
        self.v_proj = nn.Linear(channels, channels)
        self.out_proj = nn.Linear(channels, channels)
        self.dropout = nn.Dropout(self.config.attention_dropout)
        self.last_attention_: torch.Tensor | None = None

    @property
    def output_width(self) -> int:
        return self.config.n_queries * self.channels

    def forward(self, stack: torch.Tensor, capture: bool = False) -> torch.Tensor:
        if stack.ndim == 3:
            return self.forward(stack.unsqueeze(0), capture=capture).squeeze(0)
        if stack.ndim != 4:
            raise ValueError(f"expected (batch, layers, frames, channels), got shape {tuple(stack.shape)}")
        B, L, T, d = stack.shape
        if d != self.channels:
            raise ValueError(f"channel mismatch: pooler built for {self.channels}, got {d}")
        h, n_q, d_h = self.config.heads, self.config.n_queries, self.head_dim

        keys = self.k_proj(stack).view(B, L, T, h, d_h)
        values = self.v_proj(stack).view(B, L, T, h, d_h)
        queries = self.queries.view(n_q, h, d_h)

        logits = torch.einsum("qhe,blthe->bthql", queries, keys) / d_h**0.5
        attn = torch.softmax(logits, dim=-1)
        if capture:
            self.last_attention_ = attn.detach()
        mixed = torch.einsum("bthql,blthe->bthqe", self.dropout(attn), values)
        # (B, T, h, n_q, d_h) -> heads concatenated per query -> (B, T, n_q, d)
        mixed = mixed.permute(0, 1, 3, 2, 4).reshape(B, T, n_q, d)
        out = self.out_proj(mixed)
        return out.reshape(B, T, n_q * d)


def depth_group_indices(n_layers: int) -> tuple[list[int], list[int]]:
    """0-based layer indices of the two relative-depth bands.

    Layer ``i`` (0-based) has relative depth (i+1)/L.  Band membership is
    decided with integer arithmetic ((i+1)/L > a  <=>  (i+1)*q > a*q*L for the
    band edges a in {1/2, 3/4}), avoiding float boundary errors.
    """
    check_positive_int(n_layers, "n_layers")
    group_a = [i for i in range(n_layers) if 2 * (i + 1) > n_layers and 4 * (i + 1) <= 3 * n_layers]
    group_b = [i for i in range(n_layers) if 4 * (i + 1) > 3 * n_layers]
    if not group_a or not group_b:
        raise ValueError(
            f"depth grouping needs both bands non-empty; with {n_layers} layers "
            f"groups have sizes ({len(group_a)}, {len(group_b)})"
        )
    return group_a, group_b


def pool_mean(stack: np.ndarray) -> np.ndarray:
    """Uniform layer average: (layers, frames, channels) -> (frames, channels)."""
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise ValueError(f"expected (layers, frames, channels), got shape {stack.shape}")
    return stack.mean(axis=0)


def pool_depth_groups(stack: np.ndarray) -> np.ndarray:
    """Concatenate the two depth-band averages: -> (frames, 2 * channels)."""
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise ValueError(f"expected (layers, frames, channels), got shape {stack.shape}")
    group_a, group_b = depth_group_indices(stack.shape[0])
    return np.concatenate([stack[group_a].mean(axis=0), stack[group_b].mean(axis=0)], axis=1)


def pooled_width(kind: str, channels: int, config: PoolerConfig | None = None) -> int:
    """Per-modality stream width produced by each pooling strategy."""
    if kind == "xattn":
        cfg = config or PoolerConfig()
        return cfg.n_queries * channels
    if kind == "mean":
        return channels
    if kind == "depth_groups":
        return 2 * channels
    raise ValueError(f"unknown pooler kind {kind!r}; expected one of {POOLER_KINDS}")
