"""Training stages, freeze policy, checkpoint container and loss logs.

Stage 0 pretrains the base video model (text-to-video or image-to-video
initialisation). Stage 1 aligns facial embeddings: projector, global
conditioning projection and a LoRA are trained with the diffusion loss while
identities are injected along ground-truth regions. Stage 2 fine-tunes only
the router and a fresh LoRA under the routing loss.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import NoiseSchedule, add_noise, diffusion_loss
from .errors import (
    CorpusEmpty,
    CorruptFile,
    FreezeViolation,
    ModeInvalid,
    NonFiniteLoss,
    ProbsInvalid,
    VersionMismatch,
)
from .model import VAE_MODES, ClipTensors, IngredientsModel, ModelConfig
from .supervision import mse_term, routing_loss, routing_term

log = logging.getLogger(__name__)

CONDITION_MODES = ("global_only", "local_only", "both")
STAGE_DEFAULTS = {
    0: {"steps": 2000, "lr": 1e-3},
    1: {"steps": 300, "lr": 1e-3},
    2: {"steps": 200, "lr": 3e-3},
}
TRAINABLE = {
    1: {"extractor", "projector", "lora.stage1"},
    2: {"router", "lora.stage2"},
}


@dataclass
class TrainConfig:
    stage: int = 1
    batch_size: int = 8
    lr: float | None = None
    steps: int | None = None
    lam: float = 1.0
    drop_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    init_mode: str = "i2v"
    supervision_mode: str = "seg"
    vae_concat: str = "before"
    loss_variant: str = "route"
    seed: int = 0
    text_drop: float = 0.1
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    restarts: int = 1
    grad_clip: float = 1.0
    train_steps: int = 1000  # diffusion timesteps

    def __post_init__(self):
        self.drop_probs = tuple(float(p) for p in self.drop_probs)
        self.betas = tuple(self.betas)
        if self.stage not in (0, 1, 2):
            raise ValueError(f"stage must be 0, 1 or 2, got {self.stage}")
        if self.lr is None:
            self.lr = STAGE_DEFAULTS[self.stage]["lr"]
        if self.steps is None:
            self.steps = STAGE_DEFAULTS[self.stage]["steps"]
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        _check_probs(self.drop_probs)
        for name, value, allowed in (
            ("init_mode", self.init_mode, ("t2v", "i2v")),
            ("supervision_mode", self.supervision_mode, ("box", "seg")),
            ("vae_concat", self.vae_concat, VAE_MODES),
            ("loss_variant", self.loss_variant, ("none", "mse", "route")),
        ):
            if value not in allowed:
                raise ModeInvalid(f"{name} must be one of {allowed}, got {value!r}")


def _check_probs(p) -> None:
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise ProbsInvalid(f"drop probabilities must be 3 non-negative numbers summing to 1, got {p.tolist()}")


def sample_condition_mode(drop_probs, rng: np.random.Generator) -> str:
    """Draw which facial conditioning a step sees: global only, local only, or both."""
    _check_probs(drop_probs)
    return CONDITION_MODES[int(rng.choice(3, p=np.asarray(drop_probs, dtype=np.float64)))]


# ---------------------------------------------------------------- parameter groups

def canonical_name(name: str) -> str:
    """Map a module parameter name to its checkpoint name."""
    parts = name.split(".")
    if parts[0] == "backbone" and parts[1] == "cond_embed":
        return "extractor." + ".".join(parts[1:])
    if parts[0] == "backbone" and len(parts) >= 3 and parts[-2] in ("lora_A", "lora_B"):
        stage = parts[-1]
        return f"lora.{stage}." + ".".join(parts[1:-2]) + "." + parts[-2][-1]
    return name


def group_of(canonical: str) -> str:
    head = canonical.split(".")
    return ".".join(head[:2]) if head[0] == "lora" else head[0]


def named_groups(model: IngredientsModel) -> dict[str, torch.nn.Parameter]:
    return {canonical_name(n): p for n, p in model.named_parameters()}


@dataclass
class FreezePolicy:
    trainable: dict[str, bool]

    @classmethod
    def for_stage(cls, stage: int, groups, init_mode: str = "i2v") -> "FreezePolicy":
        if stage == 0:
            allowed = {"backbone"} | ({"extractor"} if init_mode == "i2v" else set())
        else:
            allowed = TRAINABLE[stage]
        return cls({g: g in allowed for g in sorted(set(groups))})

    def apply(self, model: IngredientsModel) -> list[str]:
        names = []
        for name, p in named_groups(model).items():
            flag = self.trainable.get(group_of(name), False)
            p.requires_grad_(flag)
            if flag:
                names.append(name)
        return names


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MIDCKPT\x00"
VERSION = 1


@dataclass
class CheckpointBundle:
    params: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config: dict = field(default_factory=dict)

    def groups(self) -> set[str]:
        return {group_of(n) for n in self.params}

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.config.get("model", {}))


def save_checkpoint(bundle: CheckpointBundle, path) -> None:
    """Single file: magic, u64 header length, JSON header, then float32 LE tensors by name."""
    tensors = [("param", k, bundle.params[k]) for k in sorted(bundle.params)]
    tensors += [("optim", k, bundle.optimizer[k]) for k in sorted(bundle.optimizer)]
    entries, blobs, offset = [], [], 0
    for kind, name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"kind": kind, "name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    blob = b"".join(blobs)
    header = {"version": VERSION, "step": int(bundle.step), "config": bundle.config, "tensors": entries,
              "checksum": hashlib.sha256(blob).hexdigest()}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + blob)


def load_checkpoint(path) -> CheckpointBundle:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != MAGIC:
        raise CorruptFile(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise CorruptFile(f"{path}: unreadable header") from exc
    if header.get("version") != VERSION:
        raise VersionMismatch(f"{path}: version {header.get('version')} != {VERSION}")
    blob = raw[16 + hlen:]
    if hashlib.sha256(blob).hexdigest() != header["checksum"]:
        raise CorruptFile(f"{path}: checksum mismatch")
    params, optim = {}, {}
    for e in header["tensors"]:
        arr = np.frombuffer(blob[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f4").reshape(e["shape"])
        (params if e["kind"] == "param" else optim)[e["name"]] = arr.astype(np.float32)
    return CheckpointBundle(params, optim, header["step"], header["config"])


def bundle_from_model(model: IngredientsModel, optimizer=None, step: int = 0, config: dict | None = None):
    named = named_groups(model)
    params = {k: p.detach().cpu().numpy().astype(np.float32) for k, p in named.items()}
    optim = {}
    if optimizer is not None:
        by_id = {id(p): k for k, p in named.items()}
        for p, state in optimizer.state.items():
            for key, val in state.items():
                optim[f"optim.{by_id[id(p)]}.{key}"] = np.asarray(torch.as_tensor(val).detach().cpu(), np.float32)
    return CheckpointBundle(params, optim, step, config or {})


def model_from_bundle(bundle: CheckpointBundle, extra_lora: str | None = None, seed: int = 0) -> IngredientsModel:
    """Rebuild a model by name; adapters present in the bundle are recreated, ``extra_lora`` added fresh."""
    cfg = bundle.model_config()
    torch.manual_seed(seed)
    model = IngredientsModel(cfg)
    stages = sorted({g.split(".")[1] for g in bundle.groups() if g.startswith("lora.")})
    for s in stages:
        model.backbone.add_lora(s, cfg.lora_rank)
    named = named_groups(model)
    missing = set(named) - set(bundle.params)
    if missing:
        raise CorruptFile(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    with torch.no_grad():
        for k, p in named.items():
            p.copy_(torch.from_numpy(bundle.params[k]))
    if extra_lora is not None:
        model.backbone.add_lora(extra_lora, cfg.lora_rank, seed=seed + 17)
    return model


# ---------------------------------------------------------------- loss logs

LOG_FIELDS = ("step", "l_diff", "l_route_term", "lr", "mode")


def write_loss_log(history: list[dict], path) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        if new:
            w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in LOG_FIELDS})


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"step": int(r["step"]), "l_diff": float(r["l_diff"]), "l_route_term": float(r["l_route_term"]),
             "lr": float(r["lr"]), "mode": r["mode"]}
            for r in csv.DictReader(fh)
        ]


def smooth(values, window: int = 10) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(v, 0, 0.0))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------- training loop

@dataclass
class TrainResult:
    bundle: CheckpointBundle
    history: list[dict]
    model: IngredientsModel


def _batch(corpus: list[ClipTensors], idx, frames, cfg: TrainConfig, mode: str, stage: int, gen: torch.Generator):
    x0 = torch.stack([corpus[i].x0 for i in idx])
    text = torch.stack([corpus[i].text for i in idx])
    drop = torch.rand(len(idx), generator=gen) < cfg.text_drop
    text = torch.where(drop[:, None], torch.zeros_like(text), text)
    feats = gcond = None
    if stage == 0:
        if cfg.init_mode == "i2v":
            gcond = torch.stack([corpus[i].first_frame for i in idx])
    else:
        if mode in ("local_only", "both"):
            n_scales = len(corpus[idx[0]].features[0])
            feats = [torch.stack([corpus[i].features[f][s] for i, f in zip(idx, frames)]) for s in range(n_scales)]
        if mode in ("global_only", "both"):
            gcond = torch.stack([corpus[i].global_cond[cfg.vae_concat][f] for i, f in zip(idx, frames)])
    lab = [corpus[i].labels[cfg.supervision_mode] for i in idx]
    labels = {k: torch.stack([d[k] for d in lab]) for k in ("one_hot", "valid", "labels")}
    return x0, text, feats, gcond, labels


def run_stage(cfg: TrainConfig, corpus: list[ClipTensors], init: CheckpointBundle | None = None,
              model_cfg: ModelConfig | None = None, log_every: int = 50) -> TrainResult:
    """Run one training stage and return the resulting checkpoint and per-step loss history."""
    if not corpus:
        raise CorpusEmpty("training corpus is empty")
    stage = cfg.stage
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + stage)
    rng = np.random.default_rng([cfg.seed, stage])
    if stage == 0:
        model = IngredientsModel(model_cfg or ModelConfig())
    else:
        if init is None:
            raise ValueError(f"stage {stage} needs the stage-{stage - 1} checkpoint")
        prev = init.config.get("train", {}).get("stage")
        if prev is not None and prev != stage - 1:
            raise ValueError(f"stage {stage} expects a stage-{stage - 1} checkpoint, got stage {prev}")
        model = model_from_bundle(init, extra_lora=f"stage{stage}", seed=cfg.seed)
        if stage == 1 and cfg.init_mode == "t2v":
            # text-to-video base never saw a conditioning channel; its projection starts at zero
            torch.nn.init.zeros_(model.backbone.cond_embed.weight)
    named = named_groups(model)
    policy = FreezePolicy.for_stage(stage, {group_of(n) for n in named}, cfg.init_mode)
    trainable = policy.apply(model)
    frozen_before = {n: p.detach().clone() for n, p in named.items() if n not in set(trainable)}
    params = [named[n] for n in trainable]
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    period = max(1, math.ceil(cfg.steps / cfg.restarts))
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(opt, T_0=period)
    sched = NoiseSchedule(cfg.train_steps)
    n_frames = model.cfg.frames
    history = []
    model.train()
    for step in range(cfg.steps):
        mode = "both" if stage == 2 else (sample_condition_mode(cfg.drop_probs, rng) if stage == 1 else "none")
        idx = rng.integers(0, len(corpus), cfg.batch_size)
        frames = rng.integers(0, n_frames, cfg.batch_size)
        x0, text, feats, gcond, labels = _batch(corpus, idx, frames, cfg, mode, stage, gen)
        t = torch.randint(0, cfg.train_steps, (cfg.batch_size,), generator=gen)
        eps = torch.randn(x0.shape, generator=gen)
        xt = add_noise(x0, eps, t, sched).float()
        trace = [] if stage == 2 else None
        teacher = None
        if stage == 1 and feats is not None:
            n = labels["one_hot"].shape[1]
            rand_ids = torch.randint(0, n, labels["labels"].shape, generator=gen)
            teacher = torch.where(labels["valid"], labels["labels"], rand_ids)
        pred = model(xt, t, text, feats, gcond, routing="teacher" if stage == 1 else "router",
                     teacher_map=teacher, trace=trace)
        l_diff = diffusion_loss(pred, eps)
        l_route = float("nan")
        if stage == 2:
            logits = [e["logits"] for e in trace]
            loss = routing_loss(logits, labels["one_hot"], labels["valid"], l_diff, cfg.lam, cfg.loss_variant)
            with torch.no_grad():
                l_route = float(sum(routing_term(lg, labels["one_hot"], labels["valid"]) for lg in logits) / len(logits))
        else:
            loss = l_diff
        if not torch.isfinite(loss):
            raise NonFiniteLoss(step, float(loss.detach()))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        lr_now = opt.param_groups[0]["lr"]
        opt.step()
        lr_sched.step()
        history.append({"step": step, "l_diff": float(l_diff.detach()), "l_route_term": l_route, "lr": lr_now, "mode": mode})
        if log_every and (step % log_every == 0 or step == cfg.steps - 1):
            log.info("stage %d step %d l_diff %.4f l_route %.4f", stage, step, float(l_diff.detach()), l_route)
    changed = [n for n, before in frozen_before.items() if not torch.equal(before, named[n].detach())]
    if changed:
        raise FreezeViolation(changed)
    config = {"model": _jsonable(asdict(model.cfg)), "train": _jsonable(asdict(cfg))}
    bundle = bundle_from_model(model, opt, cfg.steps, config)
    return TrainResult(bundle, history, model)


def _jsonable(d):
    if isinstance(d, dict):
        return {k: _jsonable(v) for k, v in d.items()}
    if isinstance(d, (tuple, list)):
        return [_jsonable(v) for v in d]
    return d


def train_base(cfg: TrainConfig, corpus, model_cfg: ModelConfig | None = None) -> TrainResult:
    if cfg.stage != 0:
        raise ValueError("train_base needs stage 0")
    return run_stage(cfg, corpus, None, model_cfg)


def train_stage1(cfg: TrainConfig, corpus, base: CheckpointBundle) -> TrainResult:
    if cfg.stage != 1:
        raise ValueError("train_stage1 needs stage 1")
    return run_stage(cfg, corpus, base)


def train_stage2(cfg: TrainConfig, corpus, stage1: CheckpointBundle) -> TrainResult:
    if cfg.stage != 2:
        raise ValueError("train_stage2 needs stage 2")
    return run_stage(cfg, corpus, stage1)


def freeze_audit(before: CheckpointBundle, after: CheckpointBundle, frozen_groups) -> list[str]:
    """Names in ``frozen_groups`` whose bytes differ between two checkpoints."""
    bad = []
    for name, arr in before.params.items():
        if group_of(name) in frozen_groups:
            other = after.params.get(name)
            if other is None or other.tobytes() != arr.tobytes():
                bad.append(name)
    return bad


# kept importable for callers that want the raw MSE term
__all__ = [
    "TrainConfig", "CheckpointBundle", "FreezePolicy", "sample_condition_mode", "train_base", "train_stage1",
    "train_stage2", "run_stage", "save_checkpoint", "load_checkpoint", "model_from_bundle", "freeze_audit",
    "write_loss_log", "read_loss_log", "smooth", "mse_term",
]
