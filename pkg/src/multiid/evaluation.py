"""Metrics (face similarity, Fréchet distance, text relevance), routing accuracy and routing-map graymaps."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .backbone import from_model_space
from .diffusion import NoiseSchedule, add_noise
from .errors import EmptyInput, ShapeMismatch, StrideInvalid
from .identity_embedding import TemplateDetector
from .imaging import face_descriptor, region_features
from .synthdata import DIRECTIONS, SceneScript, gen_identity, render_clip

# ---------------------------------------------------------------- face similarity


def face_similarity_greedy(generated, references, exhaustive: bool = False) -> float:
    """Minimum cosine over greedily matched (generated, reference) pairs.

    Repeatedly takes the highest-cosine pair whose members are both unmatched
    until references (or generated faces) run out. Ties go to the lowest
    (generated, reference) index pair. ``exhaustive`` instead uses the
    assignment maximising the total similarity, for comparison only.
    """
    g = np.atleast_2d(np.asarray(generated, dtype=np.float64))
    r = np.atleast_2d(np.asarray(references, dtype=np.float64))
    if g.size == 0 or r.size == 0:
        raise EmptyInput("face similarity needs at least one generated and one reference face")
    if g.shape[1] != r.shape[1]:
        raise ShapeMismatch(f"embedding widths {g.shape[1]} vs {r.shape[1]}")
    return float(min(similarity_matches(g @ r.T, exhaustive).values()))


def similarity_matches(sim: np.ndarray, exhaustive: bool = False) -> dict[tuple[int, int], float]:
    """Chosen (generated, reference) pairs with their similarity."""
    sim = np.asarray(sim, dtype=np.float64)
    if exhaustive:
        rows, cols = linear_sum_assignment(sim, maximize=True)
        return {(int(i), int(j)): float(sim[i, j]) for i, j in zip(rows, cols)}
    work = sim.copy()
    out = {}
    for _ in range(min(sim.shape)):
        # argmax over the flattened matrix returns the first (row-major) maximum
        i, j = np.unravel_index(int(np.argmax(work)), work.shape)
        out[(int(i), int(j))] = float(sim[i, j])
        work[i, :] = -np.inf
        work[:, j] = -np.inf
    return out


# ---------------------------------------------------------------- Fréchet distance


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(features_a, features_b, eps: float = 1e-6) -> float:
    """Fréchet distance between Gaussians fitted to two sample matrices ``(n, d)``.

    The cross term uses the symmetric form ``tr sqrt(sA^1/2 sB sA^1/2)``, which
    equals ``tr sqrt(sA sB)`` for PSD inputs. ``eps`` is added to both diagonals.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"feature matrices {a.shape} vs {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise EmptyInput("need at least 2 samples per side")
    mu_a, mu_b = a.mean(0), b.mean(0)
    eye = np.eye(a.shape[1]) * eps
    sa = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1]) + eye
    sb = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1]) + eye
    ra = _sqrtm_psd(sa)
    cross = np.trace(_sqrtm_psd(ra @ sb @ ra))
    return float(max(0.0, ((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb) - 2 * cross))


# ---------------------------------------------------------------- text relevance

_CLAUSE = re.compile(r"<id(\d+)>\s+moves\s+(up|down|left|right)")


def prompt_embedding(prompt: str, n_ids: int | None = None) -> np.ndarray:
    """Concatenated per-identity direction vectors parsed from the prompt template, unit norm."""
    clauses = {int(i): d for i, d in _CLAUSE.findall(prompt)}
    n = n_ids if n_ids is not None else (max(clauses) + 1 if clauses else 0)
    v = np.zeros((n, 2))
    for i, d in clauses.items():
        if i < n:
            v[i] = DIRECTIONS[d]
    return _unit(v.reshape(-1))


def motion_embeddings(positions, window: int | None = None) -> np.ndarray:
    """Per-frame motion features ``(T, 2N)`` from face positions ``(N, T, 2)``.

    Each identity contributes its dominant-axis direction of travel over a
    window around the frame (zero when it did not move).
    """
    p = np.asarray(positions, dtype=np.float64)
    n, T = p.shape[:2]
    window = window or max(1, T // 4)
    out = np.zeros((T, n, 2))
    for f in range(T):
        a, b = (f, min(f + window, T - 1)) if f + window < T else (max(0, f - window), f)
        d = p[:, b] - p[:, a]
        for k in range(n):
            axis = int(abs(d[k, 1]) > abs(d[k, 0]))
            out[f, k, axis] = np.sign(d[k, axis])
    return np.stack([_unit(o.reshape(-1)) for o in out])


def text_relevance(frames, prompt) -> float:
    """Mean cosine between per-frame embeddings ``(T, F)`` and a prompt (string or embedding)."""
    frames = np.atleast_2d(np.asarray(frames, dtype=np.float64))
    if frames.shape[0] == 0:
        raise EmptyInput("no frames")
    q = prompt_embedding(prompt, frames.shape[1] // 2) if isinstance(prompt, str) else _unit(np.asarray(prompt, float))
    if q.shape[0] != frames.shape[1]:
        raise ShapeMismatch(f"frame width {frames.shape[1]} vs prompt width {q.shape[0]}")
    return float(np.mean([_unit(f) @ q for f in frames]))


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


# ---------------------------------------------------------------- generated-clip scoring


def face_crops(video: np.ndarray, boxes) -> list[list[np.ndarray]]:
    """Crops ``[frame][identity]`` cut from ``(3, T, H, W)`` pixels at ``boxes[n][t] = (top, left, h, w)``."""
    T = video.shape[1]
    return [[video[:, f, y:y + h, x:x + w] for (y, x, h, w) in (b[f] for b in boxes)] for f in range(T)]


def track_faces(video: np.ndarray, references) -> np.ndarray:
    """Face positions ``(N, T, 2)`` in a video located by template search."""
    det = TemplateDetector(references)
    pos = [[d.box[:2] for d in sorted(det(video[:, f]), key=lambda d: d.identity_index)] for f in range(video.shape[1])]
    return np.asarray(pos, dtype=np.int64).transpose(1, 0, 2)


@dataclass
class ClipScore:
    clip_id: str
    face_sim_min: float
    frechet: float
    text_relevance: float


@dataclass
class EvalReport:
    face_sim_min: float
    frechet: float
    text_relevance: float
    per_clip: list[ClipScore] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: list[ClipScore], extra: dict | None = None) -> "EvalReport":
        if not rows:
            raise EmptyInput("no clips to report")
        return cls(float(np.mean([r.face_sim_min for r in rows])), float(np.mean([r.frechet for r in rows])),
                   float(np.mean([r.text_relevance for r in rows])), rows, extra or {})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")


def score_video(clip_id: str, video: np.ndarray, identity_seeds, prompt: str, script: SceneScript | None = None) -> ClipScore:
    """Score generated pixels ``(3, T, H, W)`` against the identities they should show.

    With a script, faces are cut at its boxes and the re-rendered script is the
    reference video; otherwise faces are located by template search and the
    bare reference faces are the reference set. Face similarity is the mean over
    frames of the greedy-match minimum; Fréchet distance compares face-region
    features; text relevance compares tracked face motion with the prompt.
    """
    ids = [gen_identity(int(s)) for s in identity_seeds]
    hair = script.hair if script is not None else [None] * len(ids)
    faces = [s.face(h) if h is not None else s.face() for s, h in zip(ids, hair)]
    refs = np.stack([s.canonical_embedding for s in ids])
    T = video.shape[1]
    if script is not None:
        boxes = [[script.box(n, t) for t in range(T)] for n in range(len(ids))]
        ref_frames = face_crops(render_clip(script)[0], boxes)
    else:
        pos = track_faces(video, faces)
        boxes = [[(int(y), int(x), *faces[n].shape[1:]) for y, x in pos[n]] for n in range(len(ids))]
        ref_frames = [faces] * T
    gen = face_crops(video, boxes)
    sims = [face_similarity_greedy([face_descriptor(c) for c in frame], refs) for frame in gen]
    fa = np.stack([region_features(c) for frame in gen for c in frame])
    fb = np.stack([region_features(c) for frame in ref_frames for c in frame])
    rel = text_relevance(motion_embeddings(track_faces(video, faces)), prompt)
    return ClipScore(clip_id, float(np.mean(sims)), frechet_distance(fa, fb), rel)


def decode_latent(model, latent: torch.Tensor) -> np.ndarray:
    """Model-space latent ``(C, t, h, w)`` to clipped pixels ``(3, T, H, W)``."""
    return model.codec.decode(from_model_space(latent)).clamp(0, 1).numpy().astype(np.float32)


# ---------------------------------------------------------------- routing accuracy


@torch.no_grad()
def routing_accuracy(model, clips, sched: NoiseSchedule | None = None, timesteps=None, supervision: str = "seg",
                     seed: int = 0, frame: int = 0, steps: int = 50) -> dict:
    """Share of valid positions whose argmax route matches the ground-truth label.

    Each clip latent is noised with a seeded draw at every timestep in
    ``timesteps`` (default: the last quarter of the ``steps``-step sampling
    schedule, where layouts have formed); accuracy pools all injection layers.
    """
    sched = sched or NoiseSchedule()
    if timesteps is None:
        ts = sched.inference_timesteps(steps)
        timesteps = ts[len(ts) - len(ts) // 4:]
    model.eval()
    gen = torch.Generator().manual_seed(seed)
    hits = total = 0
    per_t = {}
    for t in timesteps:
        th = tt = 0
        for ct in clips:
            eps = torch.randn((1, *ct.x0.shape), generator=gen)
            xt = add_noise(ct.x0[None], eps, torch.tensor([t]), sched).float()
            trace = []
            model(xt, torch.tensor([t]), ct.text[None], [f[None] for f in ct.features[frame]],
                  ct.global_cond["before"][frame][None], trace=trace)
            lab = ct.labels[supervision]
            v = lab["valid"]
            for e in trace:
                th += int((e["map"][0][v] == lab["labels"][v]).sum())
                tt += int(v.sum())
        per_t[int(t)] = th / max(tt, 1)
        hits += th
        total += tt
    return {"accuracy": hits / max(total, 1), "per_timestep": per_t, "positions": total}


# ---------------------------------------------------------------- routing-map graymaps


def map_to_gray(routing_map: np.ndarray, n_ids: int) -> np.ndarray:
    """Identity index k to gray level ``floor(255 k / (N - 1))``; all zeros when N = 1."""
    k = np.asarray(routing_map, dtype=np.int64)
    if n_ids < 2:
        return np.zeros(k.shape, np.uint8)
    return (255 * k // (n_ids - 1)).astype(np.uint8)


def gray_to_map(gray: np.ndarray, n_ids: int) -> np.ndarray:
    """Inverse of :func:`map_to_gray` for N up to 256: ``k = ceil(v (N - 1) / 255)``."""
    v = np.asarray(gray, dtype=np.int64)
    if n_ids < 2:
        return np.zeros(v.shape, np.int64)
    return -((-v * (n_ids - 1)) // 255)


def write_pgm(image: np.ndarray, path) -> None:
    img = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 graymap")
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w).copy()


def upsample_nearest(m: np.ndarray, factor: tuple[int, int]) -> np.ndarray:
    return np.repeat(np.repeat(m, factor[0], axis=-2), factor[1], axis=-1)


def emit_routing_maps(records, grid: tuple[int, int, int], out_dir, n_ids: int, frame_stride: int = 4,
                      layer_stride: int = 8, upsample: int | tuple[int, int] = 1) -> list[Path]:
    """Write one graymap per (denoise step, layer, frame) for every ``layer_stride``-th layer and ``frame_stride``-th frame.

    ``records`` holds ``(step, layer, map)`` with ``map`` flattened over the
    ``(t, h, w)`` token ``grid``. Maps are nearest-upsampled by ``upsample``.
    """
    if frame_stride < 1 or layer_stride < 1:
        raise StrideInvalid(f"strides must be >= 1, got frame {frame_stride}, layer {layer_stride}")
    fy, fx = (upsample, upsample) if isinstance(upsample, int) else tuple(upsample)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for step, layer, m in records:
        if layer % layer_stride:
            continue
        vol = np.asarray(m).reshape(grid)
        for f in range(0, grid[0], frame_stride):
            p = out / f"step{step}_layer{layer}_frame{f}.pgm"
            write_pgm(upsample_nearest(map_to_gray(vol[f], n_ids), (fy, fx)), p)
            written.append(p)
    return written


def load_routing_map(path, n_ids: int, upsample: int | tuple[int, int] = 1) -> np.ndarray:
    """Read an emitted graymap back to token-grid identity indices."""
    fy, fx = (upsample, upsample) if isinstance(upsample, int) else tuple(upsample)
    return gray_to_map(read_pgm(path)[::fy, ::fx], n_ids)
