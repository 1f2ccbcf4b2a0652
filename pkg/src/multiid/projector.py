"""Q-former projector mapping per-identity face features into the backbone's token space."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import LayerOutOfRange, NonFiniteParams, ShapeMismatch


@dataclass
class QFormerConfig:
    num_latents: int = 4
    channel_width: int = 64
    num_blocks: int = 1
    num_injection_layers: int = 8
    face_width: int = 48
    num_scales: int = 2
    heads: int = 1

    def __post_init__(self):
        for name in ("num_latents", "channel_width", "num_blocks", "num_injection_layers", "face_width",
                     "num_scales", "heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.channel_width % self.heads:
            raise ValueError("channel_width must be divisible by heads")

    def scale_of_layer(self, layer: int) -> int:
        """Layers are split evenly across scales, coarse scales feeding early layers."""
        return layer * self.num_scales // self.num_injection_layers


class CrossAttentionBlock(nn.Module):
    def __init__(self, q_dim: int, kv_dim: int, width: int, heads: int = 1):
        super().__init__()
        self.Wq = nn.Parameter(torch.randn(q_dim, width) / math.sqrt(q_dim))
        self.Wk = nn.Parameter(torch.randn(kv_dim, width) / math.sqrt(kv_dim))
        self.Wv = nn.Parameter(torch.randn(kv_dim, width) / math.sqrt(kv_dim))
        self.heads = heads

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.Wq.shape[1] // self.heads)


def cross_attention(queries: torch.Tensor, keys_values: torch.Tensor, block: CrossAttentionBlock,
                    return_weights: bool = False):
    """``softmax(Q K^T * scale) V`` with ``Q = queries Wq``, ``K = kv Wk``, ``V = kv Wv``.

    Leading dimensions broadcast, so one call handles a batch of identities.
    """
    if queries.shape[-1] != block.Wq.shape[0] or keys_values.shape[-1] != block.Wk.shape[0]:
        raise ShapeMismatch(
            f"queries width {queries.shape[-1]} / kv width {keys_values.shape[-1]} vs projections "
            f"{tuple(block.Wq.shape)}, {tuple(block.Wk.shape)}"
        )
    q = queries @ block.Wq
    k = keys_values @ block.Wk
    v = keys_values @ block.Wv
    h = block.heads
    if h > 1:
        q, k, v = (x.unflatten(-1, (h, -1)).transpose(-3, -2) for x in (q, k, v))
    weights = torch.softmax((q @ k.transpose(-1, -2)) * block.scale, dim=-1)
    out = weights @ v
    if h > 1:
        out = out.transpose(-3, -2).flatten(-2)
    return (out, weights) if return_weights else out


@dataclass
class ProjectedIdentity:
    per_layer: list[torch.Tensor]  # each (..., num_latents, channel_width)
    identity_index: int = 0


class QFormerProjector(nn.Module):
    """Learnable latents, one cross-attention stack per injection layer, and ``W_aggr``.

    Layer i forms its queries from the latents plus the layer's pooled visual
    tokens, then attends into the identity features of scale ``scale_of_layer(i)``.
    """

    def __init__(self, cfg: QFormerConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.channel_width
        self.latents = nn.Parameter(torch.randn(cfg.num_latents, w))
        for i in range(cfg.num_injection_layers * cfg.num_blocks):
            self.add_module(f"block{i}", CrossAttentionBlock(w, cfg.face_width, w, cfg.heads))
        self.W_aggr = nn.Parameter(torch.full((cfg.num_latents,), 1.0 / cfg.num_latents))

    def block(self, layer: int, j: int = 0) -> CrossAttentionBlock:
        return getattr(self, f"block{layer * self.cfg.num_blocks + j}")

    def queries(self, visual_tokens: torch.Tensor) -> torch.Tensor:
        pooled = F.layer_norm(visual_tokens.mean(dim=-2, keepdim=True), visual_tokens.shape[-1:])
        return self.latents + pooled

    def project_layer(self, layer: int, features: torch.Tensor, visual_tokens: torch.Tensor) -> torch.Tensor:
        """features ``(B, N, K, D)``, visual tokens ``(B, L, W)`` -> ``(B, N, P, W)``."""
        if not 0 <= layer < self.cfg.num_injection_layers:
            raise LayerOutOfRange(f"layer {layer} not in [0, {self.cfg.num_injection_layers})")
        q = self.queries(visual_tokens)
        if features.dim() == visual_tokens.dim() + 1:
            q = q.unsqueeze(-3)
        for j in range(self.cfg.num_blocks):
            q = cross_attention(q, features, self.block(layer, j))
        return q


def project_identity(features, visual_tokens_per_layer, projector: QFormerProjector,
                     identity_index: int = 0) -> ProjectedIdentity:
    """Project one identity's features against every injection layer's visual tokens.

    ``features`` is either a single token matrix used at every layer or a list
    with one matrix per recognition scale (each already joined with the
    semantic tokens).
    """
    cfg = projector.cfg
    if len(visual_tokens_per_layer) != cfg.num_injection_layers:
        raise ShapeMismatch(f"expected {cfg.num_injection_layers} layers of visual tokens, "
                            f"got {len(visual_tokens_per_layer)}")
    for name, p in projector.named_parameters():
        if not torch.isfinite(p).all():
            raise NonFiniteParams(f"projector parameter {name} is not finite")
    per_scale = isinstance(features, (list, tuple))
    if per_scale and len(features) != cfg.num_scales:
        raise ShapeMismatch(f"expected {cfg.num_scales} scales, got {len(features)}")
    out = []
    for i, h in enumerate(visual_tokens_per_layer):
        f = features[cfg.scale_of_layer(i)] if per_scale else features
        out.append(projector.project_layer(i, f, h))
    return ProjectedIdentity(out, identity_index)


def aggregate_token(projected: ProjectedIdentity, layer: int, W_aggr: torch.Tensor) -> torch.Tensor:
    """Weighted sum of the latent tokens at one layer: ``W_aggr . F_layer`` -> ``(..., 1, W)``."""
    if not 0 <= layer < len(projected.per_layer):
        raise LayerOutOfRange(f"layer {layer} not in [0, {len(projected.per_layer)})")
    return aggregate(projected.per_layer[layer], W_aggr).unsqueeze(-2)


def aggregate(latent_tokens: torch.Tensor, W_aggr: torch.Tensor) -> torch.Tensor:
    """``(..., P, W)`` -> ``(..., W)``."""
    return torch.einsum("p,...pw->...w", W_aggr, latent_tokens)
