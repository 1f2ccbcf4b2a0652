"""Position-wise identity router and residual injection.

Visual tokens are ``(B, L, W)`` with positions flattened in (t, h, w) order;
identity tokens are ``(B, N, W)``; logits are ``(B, N, L)``. Unbatched inputs
(drop the leading B) work as well.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import IndexOutOfRange, ShapeMismatch


class RouterNetwork(nn.Module):
    """``f`` embeds visual tokens, ``g`` embeds identity tokens; logits are their dot products."""

    def __init__(self, width: int, hidden: int | None = None, alpha_m: float = 1.0):
        super().__init__()
        hidden = hidden or width
        self.f = nn.Sequential(nn.LayerNorm(width, elementwise_affine=False), nn.Linear(width, hidden), nn.GELU(),
                               nn.Linear(hidden, width))
        self.g = nn.Sequential(nn.LayerNorm(width, elementwise_affine=False), nn.Linear(width, hidden), nn.GELU(),
                               nn.Linear(hidden, width))
        self.alpha_m = float(alpha_m)


def route_logits(H: torch.Tensor, id_tokens: torch.Tensor, net: RouterNetwork) -> torch.Tensor:
    if H.shape[-1] != id_tokens.shape[-1] or H.dim() != id_tokens.dim():
        raise ShapeMismatch(f"visual tokens {tuple(H.shape)} vs identity tokens {tuple(id_tokens.shape)}")
    return net.g(id_tokens) @ net.f(H).transpose(-1, -2)


def assign_ids(logits: torch.Tensor) -> torch.Tensor:
    """Argmax over the identity axis (-2); ties go to the lowest index.

    Softmax is monotone, so this is the argmax of the routing probabilities.
    """
    return torch.argmax(logits, dim=-2)


def gather_features(routing_map: torch.Tensor, id_tokens: torch.Tensor) -> torch.Tensor:
    """``out[..., p, :] = id_tokens[..., routing_map[..., p], :]``."""
    n = id_tokens.shape[-2]
    if routing_map.numel() and (int(routing_map.min()) < 0 or int(routing_map.max()) >= n):
        raise IndexOutOfRange(f"routing indices outside [0, {n})")
    idx = routing_map.long().unsqueeze(-1).expand(*routing_map.shape, id_tokens.shape[-1])
    return torch.gather(id_tokens, -2, idx)


def inject_residual(H: torch.Tensor, routed: torch.Tensor, alpha_m: float) -> torch.Tensor:
    if H.shape != routed.shape:
        raise ShapeMismatch(f"visual tokens {tuple(H.shape)} vs routed feature {tuple(routed.shape)}")
    return H + alpha_m * routed
