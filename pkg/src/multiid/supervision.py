"""Ground-truth routing labels and the routing loss.

Label volumes use the layout ``(T, H, W)`` (frames first, width fastest),
which is also the on-disk order of mask files. Background is ``-1``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import GridInvalid, LambdaNegative, ModeInvalid, RegionOutOfBounds, ShapeMismatch

BACKGROUND = -1


@dataclass
class Region:
    """An identity's footprint in one frame: a box plus an optional exact bitmap inside it."""

    top: int
    left: int
    height: int
    width: int
    seg: np.ndarray | None = None

    def __post_init__(self):
        if self.seg is not None and self.seg.shape != (self.height, self.width):
            raise ShapeMismatch(f"seg bitmap {self.seg.shape} does not match box {(self.height, self.width)}")


@dataclass
class MaskVolume:
    labels: np.ndarray  # int8 (T, H, W)
    n_ids: int
    resolution: str = "pixel"

    def __post_init__(self):
        if self.labels.min(initial=BACKGROUND) < BACKGROUND or self.labels.max(initial=BACKGROUND) >= self.n_ids:
            raise ValueError("mask labels outside [-1, n_ids)")


@dataclass
class RoutingLabels:
    one_hot: np.ndarray  # (N, t, h, w) float
    valid: np.ndarray  # (t, h, w) bool
    labels: np.ndarray  # (t, h, w) int, -1 where invalid


def build_masks(shape: tuple[int, int, int], regions: Sequence[Sequence[Region | None]], mode: str = "seg") -> MaskVolume:
    """Rasterise per-identity, per-frame regions into a pixel label volume.

    ``regions[n][t]`` is identity n's region in frame t (or None when absent).
    Box mode fills the whole rectangle, seg mode only the bitmap. Where regions
    overlap the lowest identity index wins.
    """
    if mode not in ("box", "seg"):
        raise ModeInvalid(f"supervision mode must be 'box' or 'seg', got {mode!r}")
    T, H, W = shape
    labels = np.full(shape, BACKGROUND, dtype=np.int8)
    for n in reversed(range(len(regions))):
        for t, r in enumerate(regions[n]):
            if r is None:
                continue
            if t >= T or r.top < 0 or r.left < 0 or r.top + r.height > H or r.left + r.width > W:
                raise RegionOutOfBounds(f"identity {n} frame {t}: region {r.top, r.left, r.height, r.width} outside {shape}")
            window = labels[t, r.top:r.top + r.height, r.left:r.left + r.width]
            if mode == "box" or r.seg is None:
                window[...] = n
            else:
                window[r.seg] = n
    return MaskVolume(labels, len(regions))


def downsample_masks(mask: MaskVolume, grid: tuple[int, int, int]) -> RoutingLabels:
    """Trilinear downsampling of one-hot label channels, then argmax.

    Channel 0 is background and identity n sits in channel n + 1, so a tie
    between background and an identity resolves to background.
    """
    t, h, w = grid
    T, H, W = mask.labels.shape
    if min(grid) < 1 or t > T or h > H or w > W:
        raise GridInvalid(f"latent grid {grid} incompatible with mask {mask.labels.shape}")
    lab = torch.from_numpy(mask.labels.astype(np.int64)) + 1
    chans = F.one_hot(lab, mask.n_ids + 1).permute(3, 0, 1, 2).to(torch.float64)
    small = F.interpolate(chans[None], size=grid, mode="trilinear", align_corners=False)[0]
    winner = small.argmax(dim=0)
    valid = winner != 0
    ident = small[1:].argmax(dim=0)
    labels = torch.where(valid, ident, torch.full_like(ident, BACKGROUND))
    one_hot = F.one_hot(ident, mask.n_ids).permute(3, 0, 1, 2).to(torch.float64) * valid
    return RoutingLabels(one_hot.numpy(), valid.numpy(), labels.numpy())


def routing_term(logits: torch.Tensor, one_hot: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Cross-entropy routing term averaged over valid positions.

    logits, one_hot: ``(..., N, L)``; valid: ``(..., L)``. Each position contributes
    ``-(1/N) sum_n y_n log softmax(logits)_n``; background positions are masked
    out so they carry neither value nor gradient.
    """
    if logits.shape != one_hot.shape or logits.shape[:-2] + logits.shape[-1:] != valid.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)}, labels {tuple(one_hot.shape)}, valid {tuple(valid.shape)}")
    n = logits.shape[-2]
    logp = torch.log_softmax(logits, dim=-2)
    per_pos = -(one_hot * logp).sum(dim=-2) / n
    v = valid.to(logits.dtype)
    per_pos = torch.where(valid, per_pos, torch.zeros_like(per_pos))
    return (per_pos * v).sum() / v.sum().clamp(min=1.0)


def mse_term(logits: torch.Tensor, one_hot: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Squared error between routing probabilities and one-hot labels over valid positions."""
    if logits.shape != one_hot.shape:
        raise ShapeMismatch(f"logits {tuple(logits.shape)} vs labels {tuple(one_hot.shape)}")
    p = torch.softmax(logits, dim=-2)
    per_pos = ((p - one_hot) ** 2).mean(dim=-2)
    v = valid.to(logits.dtype)
    per_pos = torch.where(valid, per_pos, torch.zeros_like(per_pos))
    return (per_pos * v).sum() / v.sum().clamp(min=1.0)


def routing_loss(logits, one_hot, valid, l_diff, lam: float = 1.0, variant: str = "route"):
    """Total stage-2 objective ``L_diff + lam * term``.

    ``logits`` may be a single tensor or a list of per-layer tensors, in which
    case the term is averaged over layers. ``variant`` selects the
    cross-entropy term (``route``), a probability MSE (``mse``) or none.
    """
    if lam < 0:
        raise LambdaNegative(f"lambda must be >= 0, got {lam}")
    if variant == "none" or lam == 0:
        return l_diff
    fn = {"route": routing_term, "mse": mse_term}.get(variant)
    if fn is None:
        raise ModeInvalid(f"unknown loss variant {variant!r}")
    layers = logits if isinstance(logits, (list, tuple)) else [logits]
    term = sum(fn(lg, one_hot, valid) for lg in layers) / len(layers)
    return l_diff + lam * term


def save_mask(mask: MaskVolume, path: str | Path) -> None:
    """Write int8 little-endian labels (W fastest, then H, then T) plus a JSON sidecar."""
    path = Path(path)
    T, H, W = mask.labels.shape
    path.write_bytes(mask.labels.astype("<i1").tobytes(order="C"))
    side = {"n_ids": int(mask.n_ids), "shape": [1, H, W, T]}
    Path(str(path) + ".json").write_text(json.dumps(side, sort_keys=True))


def load_mask(path: str | Path) -> MaskVolume:
    path = Path(path)
    side = json.loads(Path(str(path) + ".json").read_text())
    _, H, W, T = side["shape"]
    labels = np.frombuffer(path.read_bytes(), dtype="<i1").reshape(T, H, W).astype(np.int8)
    return MaskVolume(labels, int(side["n_ids"]))
