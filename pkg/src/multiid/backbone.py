"""Miniature video diffusion transformer, toy latent codec, text stub and LoRA adapters."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import RankInvalid, ShapeMismatch

# Codec output lives in [0, 1]; the diffusion model sees it shifted and scaled to [-1, 1].
LATENT_SHIFT = 0.5
LATENT_SCALE = 2.0


class ToyCodec:
    """Space-to-depth averaging codec.

    Pixels are first averaged over ``average`` cells; each ``factors`` block of
    the averaged volume is then folded into channels, so a latent has
    ``C * prod(factors / average)`` channels. ``decode`` unfolds and replicates,
    which makes it an exact pseudo-inverse: ``encode . decode`` is the identity
    and ``decode . encode`` replaces every average cell by its mean.
    """

    def __init__(self, factors: tuple[int, int, int] = (2, 4, 4), average: tuple[int, int, int] | None = None):
        self.factors = tuple(int(f) for f in factors)
        self.average = tuple(int(a) for a in (average or factors))
        if any(a < 1 or f % a for f, a in zip(self.factors, self.average)):
            raise ShapeMismatch(f"average cells {self.average} must divide codec factors {self.factors}")
        self.depth = tuple(f // a for f, a in zip(self.factors, self.average))

    def latent_channels(self, channels: int) -> int:
        return channels * int(np.prod(self.depth))

    def encode(self, video: torch.Tensor) -> torch.Tensor:
        """``(..., C, T, H, W)`` -> ``(..., C * prod(depth), T/ft, H/fh, W/fw)``."""
        video = torch.as_tensor(video)
        ft, fh, fw = self.factors
        at, ah, aw = self.average
        T, H, W = video.shape[-3:]
        if T % ft or H % fh or W % fw:
            raise ShapeMismatch(f"volume {(T, H, W)} not divisible by codec factors {self.factors}")
        x = video.unflatten(-1, (W // aw, aw)).unflatten(-3, (H // ah, ah)).unflatten(-5, (T // at, at))
        x = x.mean(dim=(-1, -3, -5))  # (..., C, T/at, H/ah, W/aw)
        dt, dh, dw = self.depth
        x = x.unflatten(-1, (W // fw, dw)).unflatten(-3, (H // fh, dh)).unflatten(-5, (T // ft, dt))
        # (..., C, t, dt, h, dh, w, dw) -> (..., C, dt, dh, dw, t, h, w)
        n = x.dim()
        lead = list(range(n - 7))
        x = x.permute(*lead, n - 7, n - 5, n - 3, n - 1, n - 6, n - 4, n - 2)
        return x.flatten(-7, -4)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        latent = torch.as_tensor(latent)
        dt, dh, dw = self.depth
        t, h, w = latent.shape[-3:]
        x = latent.unflatten(-4, (-1, dt, dh, dw))  # (..., C, dt, dh, dw, t, h, w)
        n = x.dim()
        lead = list(range(n - 7))
        x = x.permute(*lead, n - 7, n - 3, n - 6, n - 2, n - 5, n - 1, n - 4)
        x = x.reshape(*x.shape[:-6], t * dt, h * dh, w * dw)
        at, ah, aw = self.average
        return x.repeat_interleave(at, dim=-3).repeat_interleave(ah, dim=-2).repeat_interleave(aw, dim=-1)


def to_model_space(latent: torch.Tensor) -> torch.Tensor:
    return (latent - LATENT_SHIFT) * LATENT_SCALE


def from_model_space(z: torch.Tensor) -> torch.Tensor:
    return z / LATENT_SCALE + LATENT_SHIFT


class TextStub:
    """Deterministic prompt embedding: SHA-256 of the prompt seeds a unit Gaussian vector.

    The empty prompt (or None) maps to the all-zeros unconditional embedding.
    """

    def __init__(self, width: int = 32):
        self.width = width

    def __call__(self, prompt: str | None) -> torch.Tensor:
        if not prompt:
            return torch.zeros(self.width)
        seed = int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")
        v = np.random.default_rng(seed).standard_normal(self.width)
        return torch.from_numpy(v / np.linalg.norm(v)).float()

    def null(self) -> torch.Tensor:
        return torch.zeros(self.width)


@dataclass
class LoRAAdapter:
    A: torch.Tensor  # (rank, in)
    B: torch.Tensor  # (out, rank)
    scaling: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    def check(self, base: torch.Tensor) -> None:
        out_dim, in_dim = base.shape
        if not 1 <= self.rank <= min(out_dim, in_dim):
            raise RankInvalid(f"rank {self.rank} invalid for a {out_dim}x{in_dim} matrix")
        if self.A.shape != (self.rank, in_dim) or self.B.shape != (out_dim, self.rank):
            raise ShapeMismatch(f"adapter A{tuple(self.A.shape)} B{tuple(self.B.shape)} vs base {tuple(base.shape)}")


def lora_apply(base: torch.Tensor, adapter: LoRAAdapter, x: torch.Tensor) -> torch.Tensor:
    """``base x + scaling * B (A x)`` for x of shape ``(in,)`` or ``(..., in)``."""
    adapter.check(base)
    return x @ base.T + adapter.scaling * ((x @ adapter.A.T) @ adapter.B.T)


def lora_merge(base: torch.Tensor, adapter: LoRAAdapter) -> torch.Tensor:
    adapter.check(base)
    return base + adapter.scaling * (adapter.B @ adapter.A)


class LoRALinear(nn.Module):
    """Linear layer carrying any number of named low-rank adapters, all summed into the output."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        super().__init__()
        self.base = nn.Linear(in_features, out_features, bias=bias)
        self.lora_A = nn.ParameterDict()
        self.lora_B = nn.ParameterDict()
        self.scaling: dict[str, float] = {}

    def add_adapter(self, name: str, rank: int, alpha: float | None = None, generator=None) -> None:
        out_dim, in_dim = self.base.weight.shape
        if not 1 <= rank <= min(out_dim, in_dim):
            raise RankInvalid(f"rank {rank} invalid for a {out_dim}x{in_dim} matrix")
        a = torch.randn(rank, in_dim, generator=generator) / math.sqrt(in_dim)
        self.lora_A[name] = nn.Parameter(a)
        self.lora_B[name] = nn.Parameter(torch.zeros(out_dim, rank))
        self.scaling[name] = float(alpha if alpha is not None else rank) / rank

    def adapter(self, name: str) -> LoRAAdapter:
        return LoRAAdapter(self.lora_A[name], self.lora_B[name], self.scaling[name])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        for name in self.lora_A:
            y = y + self.scaling[name] * ((x @ self.lora_A[name].T) @ self.lora_B[name].T)
        return y


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class DiTBlock(nn.Module):
    """adaLN-Zero transformer block; the injection hook sees tokens right after self-attention."""

    def __init__(self, width: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.qkv = LoRALinear(width, 3 * width)
        self.proj = LoRALinear(width, width)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.GELU(approximate="tanh"),
                                 nn.Linear(mlp_ratio * width, width))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(width, 6 * width))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, L, W = x.shape
        q, k, v = self.qkv(x).view(B, L, 3, self.heads, W // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, L, W))

    def forward(self, x, c, hook=None, layer: int = 0):
        sh1, sc1, g1, sh2, sc2, g2 = self.ada(c).unsqueeze(1).chunk(6, dim=-1)
        x = x + g1 * self.attention(_modulate(self.norm1(x), sh1, sc1))
        if hook is not None:
            x = hook(layer, x)
        return x + g2 * self.mlp(_modulate(self.norm2(x), sh2, sc2))


@dataclass
class BackboneConfig:
    latent_channels: int = 3
    grid: tuple[int, int, int] = (8, 8, 8)  # latent (T, H, W)
    patch: tuple[int, int, int] = (1, 2, 2)
    width: int = 64
    depth: int = 8
    heads: int = 4
    text_width: int = 32

    @property
    def token_grid(self) -> tuple[int, int, int]:
        return tuple(g // p for g, p in zip(self.grid, self.patch))

    @property
    def num_tokens(self) -> int:
        t, h, w = self.token_grid
        return t * h * w


class MiniVideoDiT(nn.Module):
    """Patchify -> depth x DiTBlock -> unpatchify, conditioned on timestep and text.

    An optional global conditioning latent is concatenated along channels before
    patchification; its half of the patch-embedding weight is ``cond_embed``,
    zero-initialised so an unused conditioning channel contributes nothing.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        for g, p in zip(cfg.grid, cfg.patch):
            if g % p:
                raise ShapeMismatch(f"latent grid {cfg.grid} not divisible by patch {cfg.patch}")
        pt, ph, pw = cfg.patch
        self.patch_dim = cfg.latent_channels * pt * ph * pw
        w = cfg.width
        self.x_embed = nn.Linear(self.patch_dim, w)
        self.cond_embed = nn.Linear(self.patch_dim, w, bias=False)
        nn.init.zeros_(self.cond_embed.weight)
        self.pos_embed = nn.Parameter(torch.randn(cfg.num_tokens, w) * 0.02)
        self.t_mlp = nn.Sequential(nn.Linear(w, w), nn.SiLU(), nn.Linear(w, w))
        self.text_proj = nn.Linear(cfg.text_width, w)
        self.blocks = nn.ModuleList(DiTBlock(w, cfg.heads) for _ in range(cfg.depth))
        self.final_norm = nn.LayerNorm(w, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(w, 2 * w))
        self.final = nn.Linear(w, self.patch_dim)
        for m in (self.final_ada[1], self.final):
            nn.init.zeros_(m.weight)
            nn.init.zeros_(m.bias)

    def patchify(self, x: torch.Tensor) -> torch.Tensor:
        B, C, T, H, W = x.shape
        pt, ph, pw = self.cfg.patch
        x = x.reshape(B, C, T // pt, pt, H // ph, ph, W // pw, pw)
        return x.permute(0, 2, 4, 6, 1, 3, 5, 7).reshape(B, -1, C * pt * ph * pw)

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        B = tokens.shape[0]
        C = self.cfg.latent_channels
        pt, ph, pw = self.cfg.patch
        t, h, w = self.cfg.token_grid
        x = tokens.reshape(B, t, h, w, C, pt, ph, pw).permute(0, 4, 1, 5, 2, 6, 3, 7)
        return x.reshape(B, C, t * pt, h * ph, w * pw)

    def input_channels(self, with_global: bool) -> int:
        return self.cfg.latent_channels * (2 if with_global else 1)

    def embed(self, x: torch.Tensor, global_cond: torch.Tensor | None) -> torch.Tensor:
        C = self.cfg.latent_channels
        if x.shape[1:] != (C, *self.cfg.grid):
            raise ShapeMismatch(f"latent {tuple(x.shape[1:])} != {(C, *self.cfg.grid)}")
        if global_cond is None:
            return self.x_embed(self.patchify(x))
        if global_cond.shape != x.shape:
            raise ShapeMismatch(f"global conditioning {tuple(global_cond.shape)} != latent {tuple(x.shape)}")
        p = self.patchify(torch.cat([x, global_cond], dim=1))
        # channel-major patch vectors: first patch_dim entries come from x
        return self.x_embed(p[..., :self.patch_dim]) + self.cond_embed(p[..., self.patch_dim:])

    def forward(self, x, t, text, global_cond=None, hook=None):
        tokens = self.embed(x, global_cond) + self.pos_embed
        c = self.t_mlp(timestep_embedding(t, self.cfg.width).to(tokens.dtype)) + self.text_proj(text)
        for i, block in enumerate(self.blocks):
            tokens = block(tokens, c, hook, i)
        shift, scale = self.final_ada(c).unsqueeze(1).chunk(2, dim=-1)
        return self.unpatchify(self.final(_modulate(self.final_norm(tokens), shift, scale)))

    def lora_layers(self):
        for i, block in enumerate(self.blocks):
            yield f"blocks.{i}.qkv", block.qkv
            yield f"blocks.{i}.proj", block.proj

    def add_lora(self, name: str, rank: int, seed: int = 0) -> None:
        g = torch.Generator().manual_seed(seed)
        for _, layer in self.lora_layers():
            layer.add_adapter(name, rank, generator=g)
