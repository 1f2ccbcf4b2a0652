"""Small image helpers shared by the data generator, extractor and metrics.

Images are channel-first float arrays ``(C, H, W)`` with intensities in [0, 1].
"""

from __future__ import annotations

import numpy as np

FACE_SIZE = 12
DESCRIPTOR_CELLS = 4


def disk_mask(size: int) -> np.ndarray:
    """Boolean inscribed-disk mask sampled at pixel centres."""
    c = (np.arange(size) + 0.5) - size / 2.0
    return (c[:, None] ** 2 + c[None, :] ** 2) <= (size / 2.0) ** 2


def nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Nearest-neighbour resize of a ``(C, H, W)`` array; source index = floor(i * in / out)."""
    _, h, w = img.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    return img[:, rows][:, :, cols]


def _cell_means(crop: np.ndarray, cells: int) -> np.ndarray:
    crop = np.asarray(crop, dtype=np.float64)
    if crop.shape[1:] != (FACE_SIZE, FACE_SIZE):
        crop = nearest_resize(crop, FACE_SIZE, FACE_SIZE)
    mask = disk_mask(FACE_SIZE).astype(np.float64)
    step = FACE_SIZE // cells
    c = crop.shape[0]
    out = np.empty((c, cells, cells))
    for i in range(cells):
        for j in range(cells):
            m = mask[i * step:(i + 1) * step, j * step:(j + 1) * step]
            block = crop[:, i * step:(i + 1) * step, j * step:(j + 1) * step]
            out[:, i, j] = (block * m).sum(axis=(1, 2)) / m.sum()
    return out


def disk_cell_colours(crop: np.ndarray, cells: int) -> np.ndarray:
    """Disk-masked mean colour of every cell in a ``cells x cells`` grid that overlaps the disk, ``(K, C)``.

    Cells run row-major; cells with no disk pixel are skipped, so K depends only on ``cells``.
    """
    crop = np.asarray(crop, dtype=np.float64)
    if crop.shape[1:] != (FACE_SIZE, FACE_SIZE):
        crop = nearest_resize(crop, FACE_SIZE, FACE_SIZE)
    if cells <= 0 or FACE_SIZE % cells:
        raise ValueError(f"cells must divide {FACE_SIZE}, got {cells}")
    mask = disk_mask(FACE_SIZE).astype(np.float64)
    step = FACE_SIZE // cells
    out = []
    for i in range(cells):
        for j in range(cells):
            m = mask[i * step:(i + 1) * step, j * step:(j + 1) * step]
            if m.sum() == 0:
                continue
            block = crop[:, i * step:(i + 1) * step, j * step:(j + 1) * step]
            out.append((block * m).sum(axis=(1, 2)) / m.sum())
    return np.stack(out)


RECOGNITION_CELLS = (2, 6)
_RFF = np.random.default_rng(0x5C)
_RFF_FREQ = _RFF.standard_normal((48, 3)) * 5.0
_RFF_PHASE = _RFF.uniform(0.0, 2 * np.pi, 48)


def colour_embedding(colours: np.ndarray, width: int = 48) -> np.ndarray:
    """Fixed random Fourier features of RGB colours, ``(K, 3) -> (K, width)``; width at most 48."""
    if not 0 < width <= _RFF_FREQ.shape[0]:
        raise ValueError(f"width must be in [1, {_RFF_FREQ.shape[0]}], got {width}")
    return np.sqrt(2.0 / width) * np.cos(colours @ _RFF_FREQ[:width].T + _RFF_PHASE[:width])


def recognition_tokens(crop: np.ndarray, cells=RECOGNITION_CELLS, width: int = 48) -> list[np.ndarray]:
    """Per-scale token matrices: the colour embedding of every disk cell, coarse grid first."""
    return [colour_embedding(disk_cell_colours(crop, c), width) for c in cells]


def face_descriptor(crop: np.ndarray) -> np.ndarray:
    """Unit-norm identity descriptor of a face crop.

    Disk-masked 4x4 cell colour means, centred at mid-grey. Pixels outside the
    inscribed disk (hair, background) never contribute, so the descriptor of a
    rendered identity does not depend on where it stands or what surrounds it.
    """
    v = (_cell_means(crop, DESCRIPTOR_CELLS) - 0.5).ravel()
    n = np.linalg.norm(v)
    if n == 0.0:
        return v
    return v / n


def region_features(crop: np.ndarray) -> np.ndarray:
    """Low-dimensional appearance features (2x2 disk-masked cell means) for Frechet statistics."""
    return _cell_means(crop, 2).ravel()
