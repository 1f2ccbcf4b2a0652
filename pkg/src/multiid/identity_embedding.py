"""Facial extractor: detection, the white-padded global composite, and local feature stacks.

Detectors and encoders are plain callables so real face models can be
dropped in later:

* detector: ``frame (3, H, W) -> list[Detection]``
* recognition encoder: ``FaceCrop -> list of (tokens, D) arrays``, coarse to fine
* semantic encoder: ``FaceCrop -> (tokens, D) array``

The oracle implementations below are exact for corpora from :mod:`multiid.synthdata`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NoFaceFound, ShapeMismatch, TargetTooSmall
from .imaging import RECOGNITION_CELLS, disk_mask, nearest_resize, recognition_tokens
from .synthdata import SceneScript, render_face

PAD_VALUE = 1.0


class Detection(NamedTuple):
    box: tuple[int, int, int, int]  # top, left, height, width
    identity_index: int
    pose: tuple[float, float] | None = None


@dataclass
class FaceCrop:
    pixels: np.ndarray  # (3, h, w)
    box: tuple[int, int, int, int]
    identity_index: int
    pose: tuple[float, float] | None = None

    def __post_init__(self):
        if self.pixels.shape[1:] != tuple(self.box[2:]):
            raise ShapeMismatch(f"crop pixels {self.pixels.shape[1:]} do not match box {self.box}")


@dataclass
class IdentitySet:
    references: list[np.ndarray]

    def __post_init__(self):
        if len(self.references) < 1:
            raise ValueError("an identity set needs at least one reference")

    @property
    def N(self) -> int:
        return len(self.references)


@dataclass
class GlobalComposite:
    image: np.ndarray  # (3, H, W)
    layout: list[tuple[int, int, int, int]]
    pad_value: float = PAD_VALUE


@dataclass
class LocalFeatureStack:
    recognition_scales: list[np.ndarray]
    semantic_features: np.ndarray
    identity_index: int

    @property
    def width(self) -> int:
        return self.semantic_features.shape[1]


class ScriptDetector:
    """Oracle detector for one frame of a scripted clip.

    Reports each identity at its scripted box after checking the frame really
    shows that identity's pattern there. ``transform`` maps a rendered face to
    the appearance expected in the frame (for recoloured clips).
    """

    def __init__(self, script: SceneScript, frame_index: int, transform: Callable[[np.ndarray], np.ndarray] | None = None):
        self.script = script
        self.frame_index = frame_index
        self.transform = transform

    def __call__(self, frame: np.ndarray) -> list[Detection]:
        found, missing = [], []
        for n in range(self.script.n_ids):
            top, left, h, w = self.script.box(n, self.frame_index)
            patch = frame[:, top:top + h, left:left + w]
            expected = render_face(self.script.identities[n].pattern_params, self.script.hair[n])
            if self.transform is not None:
                expected = self.transform(expected)
            if patch.shape == expected.shape and np.allclose(patch, expected, atol=1e-6):
                found.append(Detection((top, left, h, w), n, self.script.pose(n, self.frame_index)))
            else:
                missing.append(n)
        if missing:
            raise NoFaceFound(missing)
        return found


class TemplateDetector:
    """Locates each reference face in an arbitrary frame by masked least squares.

    Used on generated frames where no script exists; it always reports the best
    location, so it never raises ``NoFaceFound``.
    """

    def __init__(self, references: Sequence[np.ndarray]):
        self.references = [np.asarray(r, dtype=np.float64) for r in references]

    def __call__(self, frame: np.ndarray) -> list[Detection]:
        out = []
        frame = np.asarray(frame, dtype=np.float64)
        for n, ref in enumerate(self.references):
            h, w = ref.shape[1:]
            m = disk_mask(h) if h == w else np.ones((h, w), bool)
            win = sliding_window_view(frame, (h, w), axis=(1, 2))  # (3, H-h+1, W-w+1, h, w)
            err = (((win - ref[:, None, None]) ** 2) * m).sum(axis=(0, 3, 4))
            top, left = np.unravel_index(int(np.argmin(err)), err.shape)
            out.append(Detection((int(top), int(left), h, w), n, None))
        return out


def detect_faces(frame: np.ndarray, detector: Callable[[np.ndarray], list[Detection]]) -> list[FaceCrop]:
    """Run a detector and cut crops, returned in identity-index order."""
    crops = []
    for det in sorted(detector(frame), key=lambda d: d.identity_index):
        top, left, h, w = det.box
        crops.append(FaceCrop(np.array(frame[:, top:top + h, left:left + w]), det.box, det.identity_index, det.pose))
    return crops


def build_global_composite(crops: Sequence[FaceCrop], target: tuple[int, int]) -> GlobalComposite:
    """Tile crops left to right in equal-width cells on a white canvas.

    A crop larger than its cell is shrunk isotropically (nearest neighbour);
    smaller crops are never enlarged, and each sits centred in its cell.
    """
    if not crops:
        raise ValueError("need at least one crop")
    H, W = target
    if H <= 0 or W <= 0:
        raise TargetTooSmall(f"target {target} must be positive")
    n = len(crops)
    cell_w = W // n
    if cell_w == 0:
        raise TargetTooSmall(f"{n} cells do not fit in width {W}")
    image = np.full((3, H, W), PAD_VALUE, dtype=np.float32)
    layout = []
    for k, crop in enumerate(sorted(crops, key=lambda c: c.identity_index)):
        _, h, w = crop.pixels.shape
        scale = min(1.0, H / h, cell_w / w)
        nh, nw = int(h * scale), int(w * scale)
        if nh == 0 or nw == 0:
            raise TargetTooSmall(f"crop {k} collapses to zero area in a {H}x{cell_w} cell")
        pix = crop.pixels if (nh, nw) == (h, w) else nearest_resize(crop.pixels, nh, nw)
        top = (H - nh) // 2
        left = k * cell_w + (cell_w - nw) // 2
        image[:, top:top + nh, left:left + nw] = pix
        layout.append((top, left, nh, nw))
    return GlobalComposite(image, layout)


class OracleRecognitionEncoder:
    """Recognition features: one token per face cell, coarse grid first.

    A token is a fixed colour embedding of the cell's disk-masked mean, so the
    token set tells which colours the face is made of and never depends on
    placement or hair.
    """

    def __init__(self, cells_per_scale: Sequence[int] = RECOGNITION_CELLS, width: int = 48):
        self.cells_per_scale = tuple(cells_per_scale)
        self.width = width

    def __call__(self, crop: FaceCrop) -> list[np.ndarray]:
        return recognition_tokens(crop.pixels, self.cells_per_scale, self.width)


class OracleSemanticEncoder:
    """Semantic features that depend only on the crop's pose (motion angle and speed)."""

    def __init__(self, width: int = 48, tokens: int = 1):
        self.width = width
        self.tokens = tokens
        self._proj = np.random.default_rng(0x5E).standard_normal((tokens, width, 4))

    def __call__(self, crop: FaceCrop) -> np.ndarray:
        angle, speed = crop.pose if crop.pose is not None else (0.0, 0.0)
        x = np.array([np.cos(angle) * min(speed, 1.0), np.sin(angle) * min(speed, 1.0), speed / 4.0, 1.0])
        out = self._proj @ x
        return out / np.linalg.norm(out, axis=1, keepdims=True)


def encode_local(crop: FaceCrop, recognition, semantic, width: int | None = None) -> LocalFeatureStack:
    scales = [np.asarray(s, dtype=np.float64) for s in recognition(crop)]
    sem = np.asarray(semantic(crop), dtype=np.float64)
    if not scales:
        raise ShapeMismatch("recognition encoder returned no scales")
    widths = {s.shape[1] for s in scales} | {sem.shape[1]}
    if len(widths) != 1 or (width is not None and widths != {width}):
        raise ShapeMismatch(f"feature widths disagree: {sorted(widths)} (expected {width})")
    return LocalFeatureStack(scales, sem, crop.identity_index)


def concat_multiscale(stack: LocalFeatureStack, scales: Sequence[int] | None = None) -> np.ndarray:
    """Token-axis concatenation: recognition scales coarse to fine, then semantic tokens.

    ``scales`` picks a subset (in the given order); the default takes all of them.
    """
    idx = range(len(stack.recognition_scales)) if scales is None else scales
    parts = [stack.recognition_scales[i] for i in idx] + [stack.semantic_features]
    if len({p.shape[1] for p in parts}) != 1:
        raise ShapeMismatch(f"channel widths disagree: {[p.shape[1] for p in parts]}")
    return np.concatenate(parts, axis=0)
