"""Procedural multi-identity video corpus with exact ground truth.

Each identity is a seeded disk-shaped "face" pattern (base colour, stripes,
two blobs) drawn inside a square box whose corners carry a per-clip "hair"
colour. Clips move identities along scripted piecewise-linear paths, so
boxes, segmentation masks and identity descriptors are all known exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imaging import FACE_SIZE, disk_mask, face_descriptor, recognition_tokens
from .supervision import MaskVolume, Region, build_masks, load_mask, save_mask

MAX_COSINE = 0.5
MAX_DRAWS = 1000  # per identity before identity_pool gives up
DIRECTIONS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
NEUTRAL_HAIR = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class IdentitySpec:
    seed: int
    pattern_params: tuple
    canonical_embedding: np.ndarray = field(compare=False, repr=False)

    def face(self, hair=NEUTRAL_HAIR) -> np.ndarray:
        return render_face(self.pattern_params, hair)


def _pattern_params(rng: np.random.Generator) -> tuple:
    base = rng.uniform(0.05, 0.95, 3)
    stripe = rng.uniform(0.0, 1.0, 3)
    freq = float(rng.integers(1, 4))
    orient = float(rng.integers(0, 3))
    phase = rng.uniform(0, 2 * np.pi)
    blobs = []
    for _ in range(2):
        ang, rad = rng.uniform(0, 2 * np.pi), rng.uniform(0.0, 3.0)
        blobs += [6 + rad * np.sin(ang), 6 + rad * np.cos(ang), rng.uniform(1.8, 3.0), *rng.uniform(0.0, 1.0, 3)]
    return tuple(float(v) for v in (*base, *stripe, freq, orient, phase, *blobs))


def render_face(params, hair=NEUTRAL_HAIR) -> np.ndarray:
    """Render the ``(3, 12, 12)`` box of an identity: disk pattern, hair colour in the corners."""
    p = np.asarray(params, dtype=np.float64)
    base, stripe, freq, orient, phase = p[0:3], p[3:6], p[6], int(p[7]), p[8]
    yy, xx = np.mgrid[0:FACE_SIZE, 0:FACE_SIZE] + 0.5
    u = (xx, yy, (xx + yy) / np.sqrt(2.0))[orient]
    img = np.empty((3, FACE_SIZE, FACE_SIZE))
    img[:] = base[:, None, None]
    on = np.sin(2 * np.pi * freq * u / FACE_SIZE + phase) > 0.3
    img[:, on] = stripe[:, None]
    for b in range(2):
        cy, cx, r = p[9 + 6 * b:12 + 6 * b]
        color = p[12 + 6 * b:15 + 6 * b]
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[:, inside] = color[:, None]
    img[:, ~disk_mask(FACE_SIZE)] = np.asarray(hair, dtype=np.float64)[:, None]
    return img.astype(np.float32)


def gen_identity(seed: int) -> IdentitySpec:
    params = _pattern_params(np.random.default_rng([0x1D, int(seed)]))
    emb = face_descriptor(render_face(params))
    return IdentitySpec(int(seed), params, emb)


def _recognition_signature(spec: IdentitySpec) -> np.ndarray:
    v = np.concatenate([t.ravel() for t in recognition_tokens(spec.face())])
    return v / np.linalg.norm(v)


def identity_pool(count: int, seed: int, max_cos: float = MAX_COSINE) -> list[IdentitySpec]:
    """Draw ``count`` identities that are pairwise separated below ``max_cos``.

    Both the canonical embeddings and the oracle recognition features must be separated.
    """
    rng = np.random.default_rng([0xC0, int(seed)])
    pool: list[IdentitySpec] = []
    sigs: list[np.ndarray] = []
    attempts = 0
    while len(pool) < count:
        attempts += 1
        if attempts > MAX_DRAWS * count:
            raise ValueError(f"could not draw {count} identities separated below cosine {max_cos}")
        spec = gen_identity(int(rng.integers(0, 2**31 - 1)))
        sig = _recognition_signature(spec)
        if all(float(spec.canonical_embedding @ o.canonical_embedding) < max_cos and float(sig @ q) < max_cos
               for o, q in zip(pool, sigs)):
            pool.append(spec)
            sigs.append(sig)
    return pool


@dataclass
class SceneScript:
    identities: list[IdentitySpec]
    positions: np.ndarray  # (N, T, 2) integer top-left of each identity box per frame
    hair: np.ndarray  # (N, 3)
    background: tuple
    num_frames: int
    height: int
    width: int
    directions: list[str] = field(default_factory=list)
    frame_stride: int = 1
    face_size: int = FACE_SIZE

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.hair = np.asarray(self.hair, dtype=np.float64).reshape(len(self.identities), 3)
        if self.positions.shape != (len(self.identities), self.num_frames, 2):
            raise ValueError(f"positions shape {self.positions.shape} mismatches script")
        s = self.face_size
        if (self.positions < 0).any() or (self.positions[..., 0] + s > self.height).any() or (
            self.positions[..., 1] + s > self.width
        ).any():
            raise ValueError("identity leaves the frame")

    @property
    def n_ids(self) -> int:
        return len(self.identities)

    def regions(self) -> list[list[Region]]:
        seg = disk_mask(self.face_size)
        return [
            [Region(int(y), int(x), self.face_size, self.face_size, seg) for y, x in self.positions[n]]
            for n in range(self.n_ids)
        ]

    def box(self, n: int, t: int) -> tuple[int, int, int, int]:
        y, x = self.positions[n, t]
        return int(y), int(x), self.face_size, self.face_size

    def pose(self, n: int, t: int) -> tuple[float, float]:
        """Motion angle and speed (pixels per frame) of identity n around frame t."""
        a, b = max(t - 1, 0), min(t + 1, self.num_frames - 1)
        if a == b:
            return 0.0, 0.0
        d = (self.positions[n, b] - self.positions[n, a]) / float(b - a)
        return float(np.arctan2(d[0], d[1])), float(np.hypot(d[0], d[1]))

    def prompt(self) -> str:
        return " and ".join(f"<id{n}> moves {d}" for n, d in enumerate(self.directions))

    def to_json(self) -> dict:
        return {
            "identity_seeds": [s.seed for s in self.identities],
            "positions": self.positions.tolist(),
            "hair": self.hair.tolist(),
            "background": list(self.background),
            "num_frames": self.num_frames,
            "height": self.height,
            "width": self.width,
            "directions": list(self.directions),
            "frame_stride": self.frame_stride,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneScript":
        return cls(
            identities=[gen_identity(s) for s in d["identity_seeds"]],
            positions=np.asarray(d["positions"]),
            hair=np.asarray(d["hair"]),
            background=tuple(d["background"]),
            num_frames=d["num_frames"],
            height=d["height"],
            width=d["width"],
            directions=list(d["directions"]),
            frame_stride=d.get("frame_stride", 1),
        )


def make_script(identities, rng: np.random.Generator, num_frames=16, height=32, width=32, frame_stride=1) -> SceneScript:
    """Random scene: identities occupy disjoint halves of the frame and sweep along the free axis.

    The split axis and the side each identity takes are random, so position
    alone never reveals identity. Paths are piecewise linear with one interior
    knot, sampled on a fine timeline of ``num_frames * frame_stride`` steps and
    subsampled every ``frame_stride`` steps.
    """
    n = len(identities)
    s = FACE_SIZE
    split_w = bool(rng.integers(0, 2))
    order = rng.permutation(n)
    fine = num_frames * frame_stride
    knots = np.array([0, int(rng.integers(1, fine - 1)) if fine > 2 else 0, fine - 1])
    times = np.arange(0, fine, frame_stride)
    positions = np.zeros((n, num_frames, 2), dtype=np.int64)
    directions = []
    for k in range(n):
        slot = int(order[k])
        if split_w:
            span = width // n
            x_lo, x_hi = slot * span, slot * span + span - s
            y_lo, y_hi = 0, height - s
            long_axis = 0
        else:
            span = height // n
            y_lo, y_hi = slot * span, slot * span + span - s
            x_lo, x_hi = 0, width - s
            long_axis = 1
        if x_hi < x_lo or y_hi < y_lo:
            raise ValueError("frame too small for the requested number of identities")
        lo_hi = [(y_lo, y_hi), (x_lo, x_hi)]
        path = np.zeros((3, 2))
        forward = bool(rng.integers(0, 2))
        for axis in range(2):
            lo, hi = lo_hi[axis]
            if axis == long_axis:
                # full sweep through a strictly interior knot, so the stated direction always holds
                mid = int(rng.integers(lo + 1, hi)) if hi - lo >= 2 else lo
                vals = np.array([lo, mid, hi])
                path[:, axis] = vals if forward else vals[::-1]
            else:
                path[:, axis] = int(rng.integers(lo, hi + 1))
        traj = np.stack([np.interp(times, knots, path[:, a]) for a in range(2)], axis=1)
        positions[k] = np.rint(traj).astype(np.int64)
        if long_axis == 0:
            directions.append("down" if forward else "up")
        else:
            directions.append("right" if forward else "left")
    hair = rng.uniform(0.0, 1.0, (n, 3))
    background = tuple(float(v) for v in rng.uniform(0.0, 1.0, 3))
    return SceneScript(list(identities), positions, hair, background, num_frames, height, width, directions, frame_stride)


def render_clip(script: SceneScript) -> tuple[np.ndarray, MaskVolume]:
    """Render ``(3, T, H, W)`` float32 pixels and the exact segmentation label volume."""
    T, H, W = script.num_frames, script.height, script.width
    video = np.empty((3, T, H, W), dtype=np.float32)
    video[:] = np.asarray(script.background, dtype=np.float32)[:, None, None, None]
    s = script.face_size
    # draw highest index first so lower indices end on top, matching mask overlap rule
    for n in reversed(range(script.n_ids)):
        face = render_face(script.identities[n].pattern_params, script.hair[n])
        for t in range(T):
            y, x = script.positions[n, t]
            video[:, t, y:y + s, x:x + s] = face
    mask = build_masks((T, H, W), script.regions(), "seg")
    return video, mask


@dataclass
class ClipManifest:
    clip_id: str
    video: str
    mask: str
    prompt: str
    identity_seeds: list[int]
    script: str

    def to_json(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "video": self.video,
            "mask": self.mask,
            "prompt": self.prompt,
            "identity_seeds": list(self.identity_seeds),
            "script": self.script,
        }


def save_video(video: np.ndarray, path: str | Path) -> None:
    """Little-endian float32, row-major ``(C, T, H, W)``, JSON sidecar with the shape."""
    path = Path(path)
    path.write_bytes(np.ascontiguousarray(video, dtype="<f4").tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"shape": list(video.shape)}))


def load_video(path: str | Path) -> np.ndarray:
    path = Path(path)
    shape = json.loads(Path(str(path) + ".json").read_text())["shape"]
    return np.frombuffer(path.read_bytes(), dtype="<f4").reshape(shape).astype(np.float32)


def write_corpus(num_clips: int, num_ids: int, out_dir, seed: int, num_frames=16, height=32, width=32,
                 frame_stride=1) -> list[ClipManifest]:
    """Render a reproducible corpus; every clip gets fresh identities from one separated pool."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    pool = identity_pool(num_clips * num_ids, seed)
    rng = np.random.default_rng([0x5C, int(seed)])
    manifests = []
    for c in range(num_clips):
        ids = pool[c * num_ids:(c + 1) * num_ids]
        script = make_script(ids, rng, num_frames, height, width, frame_stride)
        video, mask = render_clip(script)
        cid = f"clip_{c:04d}"
        save_video(video, out / "clips" / f"{cid}.video.f32")
        save_mask(mask, out / "clips" / f"{cid}.mask.i8")
        (out / "clips" / f"{cid}.script.json").write_text(json.dumps(script.to_json(), sort_keys=True))
        manifests.append(ClipManifest(cid, f"clips/{cid}.video.f32", f"clips/{cid}.mask.i8", script.prompt(),
                                      [s.seed for s in ids], f"clips/{cid}.script.json"))
    with open(out / "manifest.jsonl", "w") as fh:
        for m in manifests:
            fh.write(json.dumps(m.to_json(), sort_keys=True) + "\n")
    return manifests


def read_manifest(corpus_dir) -> list[ClipManifest]:
    path = Path(corpus_dir) / "manifest.jsonl"
    with open(path) as fh:
        return [ClipManifest(**json.loads(line)) for line in fh if line.strip()]


@dataclass
class Clip:
    manifest: ClipManifest
    video: np.ndarray
    mask: MaskVolume
    script: SceneScript


def load_clip(corpus_dir, manifest: ClipManifest) -> Clip:
    root = Path(corpus_dir)
    script = SceneScript.from_json(json.loads((root / manifest.script).read_text()))
    return Clip(manifest, load_video(root / manifest.video), load_mask(root / manifest.mask), script)


def load_corpus(corpus_dir) -> list[Clip]:
    return [load_clip(corpus_dir, m) for m in read_manifest(corpus_dir)]
