"""Command-line entry point: ``multiid {gen-data,train,sample,eval,viz}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, load_config
from .diffusion import NoiseSchedule
from .errors import ConfigError, MultiIDError
from .evaluation import (
    EvalReport,
    decode_latent,
    emit_routing_maps,
    routing_accuracy,
    score_video,
)
from .identity_embedding import FaceCrop
from .model import ClipTensors, generate, global_condition, local_features, prepare_corpus
from .synthdata import SceneScript, gen_identity, load_corpus, load_video, save_video, write_corpus
from .training import load_checkpoint, model_from_bundle, run_stage, save_checkpoint, write_loss_log

log = logging.getLogger("multiid")


def _ckpt_path(cfg: RunConfig, stage: int, tag: str | None = None) -> Path:
    return Path(cfg.ckpt_dir) / (f"stage{stage}" + (f"_{tag}" if tag else "") + ".ckpt")


def _load_clips(corpus_dir, indices=None):
    clips = load_corpus(corpus_dir)
    if not clips:
        raise FileNotFoundError(f"no clips in {corpus_dir}")
    if indices:
        clips = [clips[i] for i in indices]
    return clips


def cmd_gen_data(cfg: RunConfig, args) -> dict:
    d = cfg.data
    manifests = write_corpus(d.num_clips, d.num_ids, cfg.corpus_dir, cfg.seed, d.frames, d.height, d.width,
                             d.frame_stride)
    return {"corpus_dir": cfg.corpus_dir, "clips": len(manifests)}


def cmd_train(cfg: RunConfig, args) -> dict:
    stage = args.stage
    tcfg = cfg.train_config(stage, steps=args.steps, lr=args.lr, batch_size=args.batch_size, lam=args.lam,
                            loss_variant=args.loss_variant, supervision_mode=args.supervision,
                            vae_concat=args.vae_concat, init_mode=args.init_mode)
    clips = _load_clips(cfg.corpus_dir)
    corpus = prepare_corpus(clips, cfg.model, augment=cfg.data.augment)
    init = None
    if stage > 0:
        src = Path(args.init) if args.init else _ckpt_path(cfg, stage - 1, args.init_tag)
        init = load_checkpoint(src)
    out = _ckpt_path(cfg, stage, args.tag)
    out.parent.mkdir(parents=True, exist_ok=True)
    result = run_stage(tcfg, corpus, init, cfg.model)
    save_checkpoint(result.bundle, out)
    log_path = out.with_suffix(".loss.csv")
    log_path.unlink(missing_ok=True)
    write_loss_log(result.history, log_path)
    last = result.history[-1]
    route = last["l_route_term"]
    return {"checkpoint": str(out), "loss_log": str(log_path), "final_l_diff": last["l_diff"],
            "final_l_route_term": None if np.isnan(route) else route}


def _faces_condition(seeds, prompt: str, model) -> ClipTensors:
    cfg = model.cfg
    ids = [gen_identity(int(s)) for s in seeds]
    crops = [FaceCrop(s.face(), (0, 0, *s.face().shape[1:]), n, None) for n, s in enumerate(ids)]
    gc = {m: [global_condition(crops, cfg, model.codec, m).float()] for m in ("before", "after")}
    x0 = torch.zeros(cfg.latent_channels, *cfg.latent_grid)
    return ClipTensors(x0, model.text(prompt), [local_features(crops, cfg)], gc, x0, {}, len(ids))


def cmd_sample(cfg: RunConfig, args) -> dict:
    bundle = load_checkpoint(args.ckpt)
    model = model_from_bundle(bundle)
    sched = NoiseSchedule(cfg.diffusion.train_steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    if args.identity_seeds:
        if not args.prompt:
            raise ConfigError("--prompt is required with --identity-seeds", "prompt")
        jobs = [("sample", _faces_condition(args.identity_seeds, args.prompt, model), None, None)]
    else:
        clips = _load_clips(args.corpus or cfg.corpus_dir, args.clips)
        cts = prepare_corpus(clips, model.cfg)
        root = Path(args.corpus or cfg.corpus_dir).resolve()
        jobs = [(c.manifest.clip_id, ct, str(root / c.manifest.script), c.manifest) for c, ct in zip(clips, cts)]
    for name, ct, script, manifest in jobs:
        lat = generate(model, ct, sched, cfg.diffusion.steps, cfg.diffusion.guidance, args.seed,
                       args.vae_concat or cfg.train.get("vae_concat", "before"), start_t=args.start_t)
        video = decode_latent(model, lat)
        path = out / f"{name}.video.f32"
        save_video(video, path)
        entry = {"clip_id": name, "video": path.name, "seed": args.seed, "script": script}
        if manifest is not None:
            entry.update(prompt=manifest.prompt, identity_seeds=manifest.identity_seeds)
        else:
            entry.update(prompt=args.prompt, identity_seeds=[int(s) for s in args.identity_seeds])
        entries.append(entry)
    with open(out / "generated.jsonl", "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    return {"out": str(out), "clips": len(entries)}


def cmd_eval(cfg: RunConfig, args) -> dict:
    gen_dir = Path(args.generated)
    with open(gen_dir / "generated.jsonl") as fh:
        entries = [json.loads(line) for line in fh if line.strip()]
    rows = []
    for e in entries:
        video = load_video(gen_dir / e["video"])
        script = SceneScript.from_json(json.loads(Path(e["script"]).read_text())) if e.get("script") else None
        rows.append(score_video(e["clip_id"], video, e["identity_seeds"], e["prompt"], script))
    extra = {}
    if args.ckpt:
        model = model_from_bundle(load_checkpoint(args.ckpt))
        clips = _load_clips(args.corpus or cfg.corpus_dir)
        acc = routing_accuracy(model, prepare_corpus(clips, model.cfg), NoiseSchedule(cfg.diffusion.train_steps),
                               supervision=args.supervision, seed=cfg.seed, steps=cfg.diffusion.steps)
        extra["routing_accuracy"] = acc["accuracy"]
    report = EvalReport.from_rows(rows, extra)
    out = Path(cfg.report_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "report.json")
    return {"report": str(out / "report.json"), "face_sim_min": report.face_sim_min, "frechet": report.frechet,
            "text_relevance": report.text_relevance, **extra}


def cmd_viz(cfg: RunConfig, args) -> dict:
    model = model_from_bundle(load_checkpoint(args.ckpt))
    clip = _load_clips(args.corpus or cfg.corpus_dir, [args.clip])[0]
    ct = prepare_corpus([clip], model.cfg)[0]
    records = []
    generate(model, ct, NoiseSchedule(cfg.diffusion.train_steps), cfg.diffusion.steps, cfg.diffusion.guidance,
             args.seed, start_t=args.start_t, record=records)
    grid = model.cfg.token_grid
    factor = (model.cfg.height // grid[1], model.cfg.width // grid[2])
    files = emit_routing_maps([(s, l, m.numpy()) for s, l, m in records], grid, args.out, ct.n_ids,
                              args.frame_stride, args.layer_stride, factor)
    return {"out": args.out, "files": len(files)}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval, "viz": cmd_viz}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="multiid", description="Multi-identity routed video diffusion at desk scale.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--corpus-dir")
    common.add_argument("--ckpt-dir")
    common.add_argument("--report-dir")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic corpus")
    g.add_argument("--num-clips", type=int)
    g.add_argument("--num-ids", type=int)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, choices=(0, 1, 2), required=True)
    t.add_argument("--init", help="checkpoint to start from (default: previous stage in ckpt dir)")
    t.add_argument("--init-tag", help="tag of the previous-stage checkpoint")
    t.add_argument("--tag", help="suffix for the output checkpoint name")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lam", type=float)
    t.add_argument("--loss-variant", choices=("none", "mse", "route"))
    t.add_argument("--supervision", choices=("box", "seg"))
    t.add_argument("--vae-concat", choices=("before", "after"))
    t.add_argument("--init-mode", choices=("t2v", "i2v"))

    s = sub.add_parser("sample", parents=[common], help="generate clips")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--corpus", help="corpus whose clips provide identities and prompts")
    s.add_argument("--clips", type=int, nargs="*", help="clip indices (default: all)")
    s.add_argument("--prompt")
    s.add_argument("--identity-seeds", type=int, nargs="*")
    s.add_argument("--start-t", type=int, help="denoise from the clip noised to this timestep")
    s.add_argument("--vae-concat", choices=("before", "after"))

    e = sub.add_parser("eval", parents=[common], help="score generated clips")
    e.add_argument("--generated", required=True)
    e.add_argument("--ckpt", help="also report routing accuracy of this checkpoint")
    e.add_argument("--corpus", help="corpus for routing accuracy (default: config corpus)")
    e.add_argument("--supervision", choices=("box", "seg"), default="seg")

    v = sub.add_parser("viz", parents=[common], help="emit routing-map graymaps")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--corpus")
    v.add_argument("--clip", type=int, default=0)
    v.add_argument("--start-t", type=int)
    v.add_argument("--frame-stride", type=int, default=4)
    v.add_argument("--layer-stride", type=int, default=8)
    return p


def _overrides(args) -> dict:
    ov = {"seed": args.seed, "corpus_dir": args.corpus_dir, "ckpt_dir": args.ckpt_dir,
          "report_dir": args.report_dir}
    if args.command == "gen-data":
        ov.update({"data.num_clips": args.num_clips, "data.num_ids": args.num_ids})
    return ov


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.seed is None:
            args.seed = cfg.seed
        print(json.dumps({"command": args.command, "config": cfg.to_dict()}, sort_keys=True))
        result = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        _fail(exc, 2, key=exc.key)
        return 2
    except (MultiIDError, OSError, ValueError) as exc:
        _fail(exc, 1)
        return 1
    print(json.dumps({"command": args.command, "result": result}, sort_keys=True, default=_num))
    return 0


def _num(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x))


def _fail(exc: Exception, code: int, **extra) -> None:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    err.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(err, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
