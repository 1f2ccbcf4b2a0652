"""The full conditioned model: backbone + projector + router, plus per-clip input preparation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .backbone import BackboneConfig, MiniVideoDiT, TextStub, ToyCodec, to_model_space
from .diffusion import NoiseSchedule, add_noise, sample
from .errors import ModeInvalid
from .identity_embedding import (
    FaceCrop,
    OracleRecognitionEncoder,
    OracleSemanticEncoder,
    ScriptDetector,
    build_global_composite,
    concat_multiscale,
    detect_faces,
    encode_local,
)
from .imaging import nearest_resize
from .projector import QFormerConfig, QFormerProjector, aggregate
from .router import RouterNetwork, assign_ids, gather_features, inject_residual, route_logits
from .supervision import build_masks, downsample_masks
from .synthdata import Clip

VAE_MODES = ("before", "after")
IDENTITY_VARIANT = ((0, 1, 2), False)
# RGB channel orders times optional inversion; geometry untouched, so scripts and masks carry over
COLOR_VARIANTS = tuple((perm, inv) for inv in (False, True) for perm in itertools.permutations(range(3)))


def recolor(pixels: np.ndarray, perm=(0, 1, 2), invert: bool = False) -> np.ndarray:
    out = np.ascontiguousarray(pixels[list(perm)])
    return (1.0 - out).astype(out.dtype) if invert else out


@dataclass
class ModelConfig:
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 3
    codec_factors: tuple[int, int, int] = (2, 4, 4)
    codec_average: tuple[int, int, int] = (2, 2, 2)
    patch: tuple[int, int, int] = (1, 2, 2)
    hidden: int = 64
    depth: int = 8
    heads: int = 4
    text_width: int = 32
    num_latents: int = 4
    face_width: int = 48
    recognition_cells: tuple[int, ...] = (2, 6)  # face grid per recognition scale, coarse to fine
    semantic_tokens: int = 1
    qformer_blocks: int = 1
    qformer_heads: int = 1
    lora_rank: int = 4
    alpha_m: float = 1.0

    def __post_init__(self):
        self.codec_factors = tuple(self.codec_factors)
        self.codec_average = tuple(self.codec_average)
        self.patch = tuple(self.patch)
        self.recognition_cells = tuple(self.recognition_cells)

    @property
    def latent_grid(self) -> tuple[int, int, int]:
        ft, fh, fw = self.codec_factors
        return self.frames // ft, self.height // fh, self.width // fw

    def codec(self) -> ToyCodec:
        return ToyCodec(self.codec_factors, self.codec_average)

    @property
    def latent_channels(self) -> int:
        return self.codec().latent_channels(self.channels)

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.latent_channels, self.latent_grid, self.patch, self.hidden, self.depth, self.heads,
                              self.text_width)

    def qformer(self) -> QFormerConfig:
        return QFormerConfig(self.num_latents, self.hidden, self.qformer_blocks, self.depth, self.face_width,
                             len(self.recognition_cells), self.qformer_heads)

    @property
    def token_grid(self) -> tuple[int, int, int]:
        return self.backbone().token_grid


class IngredientsModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = MiniVideoDiT(cfg.backbone())
        self.projector = QFormerProjector(cfg.qformer())
        self.router = RouterNetwork(cfg.hidden, alpha_m=cfg.alpha_m)
        self.codec = cfg.codec()
        self.text = TextStub(cfg.text_width)

    def forward(self, x, t, text, features=None, global_cond=None, routing: str = "router", teacher_map=None,
                trace: list | None = None):
        """Predict noise.

        ``features`` is a list (one per recognition scale) of ``(B, N, K, D)``
        identity feature tensors, or None for no local identity conditioning.
        ``routing='teacher'`` injects identities by ``teacher_map`` ``(B, L)``
        instead of the router's argmax. When ``trace`` is a list, one dict per
        injection layer with ``logits`` and ``map`` is appended to it.
        """
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        hook = None
        if features is not None:
            hook = self._hook(features, routing, teacher_map, trace)
        return self.backbone(x, t, text, global_cond, hook)

    def _hook(self, features, routing, teacher_map, trace):
        cfg_q = self.projector.cfg
        if routing not in ("router", "teacher"):
            raise ModeInvalid(f"routing must be 'router' or 'teacher', got {routing!r}")

        def hook(layer, H):
            feats = features[cfg_q.scale_of_layer(layer)]
            tokens = aggregate(self.projector.project_layer(layer, feats, H), self.projector.W_aggr)
            logits = None
            if routing == "teacher":
                rmap = teacher_map
            else:
                logits = route_logits(H, tokens, self.router)
                rmap = assign_ids(logits)
            if trace is not None:
                trace.append({"layer": layer, "logits": logits, "map": rmap})
            return inject_residual(H, gather_features(rmap, tokens), self.router.alpha_m)

        return hook


def global_condition(crops: list[FaceCrop], cfg: ModelConfig, codec: ToyCodec, mode: str = "before") -> torch.Tensor:
    """Global facial conditioning latent ``(C, t, h, w)`` in model space.

    ``before``: tile crops into one white-padded pixel composite, repeat it over
    frames and encode once. ``after``: encode each crop on its own, then tile
    the crop latents into a latent canvas padded with the encoding of white.
    """
    if mode == "before":
        comp = build_global_composite(crops, (cfg.height, cfg.width)).image
        video = np.repeat(comp[:, None], cfg.frames, axis=1)
        return to_model_space(codec.encode(torch.from_numpy(video)))
    if mode != "after":
        raise ModeInvalid(f"vae concat mode must be one of {VAE_MODES}, got {mode!r}")
    t, h, w = cfg.latent_grid
    canvas = torch.ones(cfg.latent_channels, t, h, w)
    n = len(crops)
    cell_w = w // n
    for k, crop in enumerate(sorted(crops, key=lambda c: c.identity_index)):
        video = np.repeat(crop.pixels[:, None], cfg.frames, axis=1)
        lat = codec.encode(torch.from_numpy(np.ascontiguousarray(video)))  # (C, t, ch, cw)
        ch, cw = lat.shape[-2:]
        scale = min(1.0, h / ch, cell_w / cw)
        nh, nw = max(1, int(ch * scale)), max(1, int(cw * scale))
        if (nh, nw) != (ch, cw):
            lat = torch.from_numpy(np.stack([nearest_resize(lat[:, i].numpy(), nh, nw) for i in range(t)], axis=1))
        top, left = (h - nh) // 2, k * cell_w + (cell_w - nw) // 2
        canvas[:, :, top:top + nh, left:left + nw] = lat
    return to_model_space(canvas)


def local_features(crops: list[FaceCrop], cfg: ModelConfig, recognition=None, semantic=None) -> list[torch.Tensor]:
    """Per-scale identity features ``(N, K_s, D)``: recognition scale s joined with semantic tokens."""
    recognition = recognition or OracleRecognitionEncoder(cfg.recognition_cells, cfg.face_width)
    semantic = semantic or OracleSemanticEncoder(cfg.face_width, cfg.semantic_tokens)
    stacks = [encode_local(c, recognition, semantic, cfg.face_width) for c in sorted(crops, key=lambda c: c.identity_index)]
    return [
        torch.from_numpy(np.stack([concat_multiscale(s, [k]) for s in stacks])).float()
        for k in range(len(cfg.recognition_cells))
    ]


@dataclass
class ClipTensors:
    """Everything training and evaluation need from one clip, precomputed."""

    x0: torch.Tensor  # (C, t, h, w) model-space latent
    text: torch.Tensor
    features: list[list[torch.Tensor]]  # per frame, per scale (N, K, D)
    global_cond: dict[str, list[torch.Tensor]]  # mode -> per frame latent
    first_frame: torch.Tensor  # image-to-video conditioning latent for base pretraining
    labels: dict[str, dict[str, torch.Tensor]]  # supervision mode -> one_hot (N, L), valid (L,), labels (L,)
    n_ids: int
    clip: Clip | None = field(default=None, repr=False)


def prepare_clip(clip: Clip, cfg: ModelConfig, text: TextStub | None = None, codec: ToyCodec | None = None,
                 variant=IDENTITY_VARIANT) -> ClipTensors:
    """Precompute latents, identity features, global conditions and routing labels for a clip.

    ``variant`` = (channel order, invert) recolours the clip first.
    """
    codec = codec or cfg.codec()
    text = text or TextStub(cfg.text_width)
    perm, invert = variant
    pixels = recolor(clip.video, perm, invert) if variant != IDENTITY_VARIANT else clip.video
    transform = None if variant == IDENTITY_VARIANT else (lambda face: recolor(face, perm, invert))
    video = torch.from_numpy(pixels)
    x0 = to_model_space(codec.encode(video))
    feats, conds = [], {m: [] for m in VAE_MODES}
    for f in range(pixels.shape[1]):
        crops = detect_faces(pixels[:, f], ScriptDetector(clip.script, f, transform))
        feats.append(local_features(crops, cfg))
        for m in VAE_MODES:
            conds[m].append(global_condition(crops, cfg, codec, m).float())
    first = video[:, :1].expand(-1, cfg.frames, -1, -1)
    first_frame = to_model_space(codec.encode(first.contiguous()))
    labels = {}
    for mode in ("seg", "box"):
        mask = build_masks(clip.mask.labels.shape, clip.script.regions(), mode)
        rl = downsample_masks(mask, cfg.token_grid)
        n = mask.n_ids
        labels[mode] = {
            "one_hot": torch.from_numpy(rl.one_hot.reshape(n, -1)).float(),
            "valid": torch.from_numpy(rl.valid.reshape(-1)),
            "labels": torch.from_numpy(rl.labels.reshape(-1)).long(),
        }
    return ClipTensors(x0.float(), text(clip.manifest.prompt), feats, conds, first_frame.float(), labels,
                       clip.script.n_ids, clip)


def prepare_corpus(clips, cfg: ModelConfig, augment: bool = False) -> list[ClipTensors]:
    """Clip tensors for a corpus; ``augment`` adds every recoloured variant of each clip."""
    text, codec = TextStub(cfg.text_width), cfg.codec()
    variants = COLOR_VARIANTS if augment else (IDENTITY_VARIANT,)
    return [prepare_clip(c, cfg, text, codec, v) for c in clips for v in variants]


def dit_forward(model: IngredientsModel, latent, t, text, features=None, global_crops=None, mode: str = "before",
                **kw):
    """Single forward with optional identity features and a global composite built per ``mode``."""
    if mode not in VAE_MODES:
        raise ModeInvalid(f"vae concat mode must be one of {VAE_MODES}, got {mode!r}")
    cond = None
    if global_crops is not None:
        cond = global_condition(global_crops, model.cfg, model.codec, mode).to(latent.dtype)
        cond = cond.unsqueeze(0).expand(latent.shape[0], *cond.shape)
    return model(latent, torch.as_tensor(t), text, features, cond, **kw)


@torch.no_grad()
def generate(model: IngredientsModel, ct: ClipTensors, sched: NoiseSchedule, steps: int = 50, guidance: float = 6.0,
             seed: int = 0, vae_concat: str = "before", frame: int = 0, start_t: int | None = None,
             use_global: bool = True, use_local: bool = True, record: list | None = None) -> torch.Tensor:
    """Sample a latent video conditioned on one clip's prompt and identities.

    With ``start_t`` the clip's own latent is noised to ``start_t`` (seeded) and
    denoised from there, keeping its layout; otherwise sampling starts from
    pure noise. ``record`` collects ``(step, layer, map)`` routing maps.
    """
    model.eval()
    feats = [f.unsqueeze(0) for f in ct.features[frame]] if use_local else None
    gcond = ct.global_cond[vae_concat][frame].unsqueeze(0) if use_global else None
    cond_text = ct.text.unsqueeze(0)
    null_text = torch.zeros_like(cond_text)
    step_counter = {"i": 0}

    def fn(x, t, text):
        trace = [] if (record is not None and text is cond_text) else None
        out = model(x, torch.tensor([t]), text, feats, gcond, trace=trace)
        if trace is not None:
            for entry in trace:
                record.append((step_counter["i"], entry["layer"], entry["map"][0].clone()))
        return out

    def cb(i, t, x):
        step_counter["i"] = i + 1

    shape = (1, *ct.x0.shape)
    x_init = None
    if start_t is not None:
        g = torch.Generator().manual_seed(int(seed))
        eps = torch.randn(shape, generator=g, dtype=torch.float64).float()
        x_init = add_noise(ct.x0.unsqueeze(0), eps, torch.tensor([start_t]), sched)
    return sample(fn, shape, sched, cond_text, null_text, steps, guidance, seed, x_init, start_t, cb)[0]
