"""Command-line entry points.

Commands: gen-data, train-lift, train-neutralizer, train --stage {1,2,3,superres},
train-superres, finetune, reenact, eval, simulate-telepresence, report.

Exit codes: 0 success, 2 invalid input, 3 invalid state, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_hash, load_config
from .errors import (
    FormatError,
    InvalidArgumentError,
    InvalidStateError,
    NumericFailureError,
)
from .expression import ExpressionConfig
from .geometry import Camera
from .images import load_png, save_png
from .lifting import (
    LiftingConfig,
    LiftingNet,
    LiftTrainConfig,
    NeutralizerNet,
    NeutralizerTrainConfig,
    train_lifting,
    train_neutralizer,
)
from .metrics import build_expression_probe, evaluate_model, file_hash
from .synthdata import DatasetSpec, gen_dataset, load_dataset, save_dataset
from .telepresence import (
    SessionConfig,
    latency_report,
    load_script,
    run_session,
    write_latency_csv,
)
from .training import (
    Discriminator,
    EmbedderTrainConfig,
    FewShotConfig,
    IdentityEmbedder,
    LossWeights,
    ReenactModel,
    StageConfig,
    SuperRes,
    SuperResTrainConfig,
    TrainBundle,
    finetune_fewshot,
    pretrain_identity_embedder,
    run_stage1,
    run_stage2,
    run_stage3,
    stage1_optimizer,
    train_superres,
    write_history_csv,
)
from .features import PerceptualProxy


def _lifting_config(cfg: dict) -> LiftingConfig:
    m = cfg["model"]
    return LiftingConfig(
        input_res=m["input_res"], token_patch=m["token_patch"], width=m["width"],
        depth_low=m["depth_low"], depth_fuse=m["depth_fuse"], heads=m["heads"],
        plane_res=m["plane_res"], plane_channels=m["plane_channels"],
        insert_positions=tuple(m["insert_positions"]))


def _expression_config(cfg: dict) -> ExpressionConfig:
    m = cfg["model"]
    return ExpressionConfig(input_res=m["input_res"], token_patch=m["token_patch"],
                            width=m["exp_width"], depth=m["exp_depth"], heads=m["heads"])


def _build_model(cfg: dict) -> ReenactModel:
    return ReenactModel.build(_lifting_config(cfg), _expression_config(cfg),
                              seed=cfg["model"]["seed"])


def _stage_config(cfg: dict, stage: int, start_step: int = 0) -> StageConfig:
    s = cfg[f"stage{stage}"]
    weights = LossWeights(lambda_neu=s.get("lambda_neu", 0.01 if stage == 1 else 0.0),
                          lambda_gan=s.get("lambda_gan", 0.05))
    return StageConfig(
        stage=stage, steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"],
        seed=s["seed"], render_resolution=s["render_resolution"],
        samples_per_ray=s["samples_per_ray"], patch_size=s.get("patch_size"),
        eye_loss=s.get("eye_loss", False), weights=weights,
        frozen_modules=() if stage == 3 else ("lifter",),
        lift_finetune_steps=s.get("lift_finetune_steps", 0),
        n_stage2_records=s.get("n_stage2_records", 256), start_step=start_step)


def _load_model(path, cfg: dict, override: bool = False) -> tuple[ReenactModel, dict]:
    model = _build_model(cfg)
    meta = load_checkpoint(path, model.modules_dict(),
                           expected_config_hash=config_hash(cfg),
                           override_config_mismatch=override)
    return model, meta


def cmd_gen_data(args, cfg) -> int:
    spec = DatasetSpec(args.identities, args.expressions, args.views,
                       args.res, args.seed)
    ds = gen_dataset(spec, progress=args.verbose)
    save_dataset(ds, args.out)
    print(f"wrote {spec.n_frames} frames to {args.out}")
    return 0


def cmd_train_lift(args, cfg) -> int:
    ds = load_dataset(args.data)
    torch.manual_seed(cfg["lift"]["seed"])
    net = LiftingNet(_lifting_config(cfg))
    lcfg = LiftTrainConfig(steps=args.steps or cfg["lift"]["steps"],
                           batch_size=cfg["lift"]["batch_size"],
                           lr=cfg["lift"]["lr"], seed=cfg["lift"]["seed"],
                           samples_per_ray=cfg["lift"]["samples_per_ray"],
                           render_resolution=cfg["lift"]["render_resolution"])
    net, hist = train_lifting(net, ds, lcfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "lifter.vxpc"), {"lifter": net},
                    {"kind": "lifter", "config_hash": config_hash(cfg),
                     "seed": lcfg.seed, "step": lcfg.steps})
    write_history_csv(hist, os.path.join(args.out, "lift_loss.csv"))
    print(f"lifter trained ({lcfg.steps} steps), final loss {hist[-1]['loss']:.4f}")
    return 0


def cmd_train_neutralizer(args, cfg) -> int:
    ds = load_dataset(args.data)
    lifter = LiftingNet(_lifting_config(cfg))
    load_checkpoint(args.lifter, {"lifter": lifter},
                    expected_config_hash=config_hash(cfg),
                    override_config_mismatch=args.override_config)
    neut = NeutralizerNet(lifter)
    ncfg = NeutralizerTrainConfig(steps=args.steps or cfg["neutralizer"]["steps"],
                                  batch_size=cfg["neutralizer"]["batch_size"],
                                  lr=cfg["neutralizer"]["lr"],
                                  seed=cfg["neutralizer"]["seed"],
                                  norm=cfg["neutralizer"]["norm"])
    neut, hist = train_neutralizer(neut, ds, ncfg)
    neut.trained = True
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "neutralizer.vxpc"), {"neutralizer": neut},
                    {"kind": "neutralizer", "config_hash": config_hash(cfg),
                     "norm": ncfg.norm, "step": ncfg.steps})
    write_history_csv(hist, os.path.join(args.out, "neutralizer_loss.csv"))
    print(f"neutralizer trained ({ncfg.steps} steps, {ncfg.norm})")
    return 0


def _load_or_train_embedder(args, cfg, ds) -> IdentityEmbedder:
    emb = IdentityEmbedder()
    if args.embedder and os.path.exists(args.embedder):
        load_checkpoint(args.embedder, {"embedder": emb})
        emb.trained = True
        for p in emb.parameters():
            p.requires_grad_(False)
    else:
        e = cfg["embedder"]
        pretrain_identity_embedder(emb, ds, EmbedderTrainConfig(
            steps=e["steps"], batch_size=e["batch_size"], lr=e["lr"], seed=e["seed"]))
        if args.embedder:
            save_checkpoint(args.embedder, {"embedder": emb},
                            {"kind": "embedder", "config_hash": config_hash(cfg)})
    return emb


def cmd_train(args, cfg) -> int:
    if args.stage == "superres":
        return cmd_train_superres(args, cfg)
    stage = int(args.stage)
    ds = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)

    model = _build_model(cfg)
    if stage == 1:
        load_checkpoint(args.lifter, {"lifter": model.lifter},
                        override_config_mismatch=True)
        neut = None
        scfg = _stage_config(cfg, 1)
        if scfg.weights.lambda_neu > 0:
            if not args.neutralizer:
                raise InvalidStateError("stage 1 needs --neutralizer (or lambda_neu=0)")
            neut = NeutralizerNet(model.lifter)
            load_checkpoint(args.neutralizer, {"neutralizer": neut},
                            override_config_mismatch=True)
            neut.trained = True
        emb = _load_or_train_embedder(args, cfg, ds)
        bundle = TrainBundle(model=model, embedder=emb, perceptual=PerceptualProxy(),
                             neutralizer=neut)
        start = 0
        opt = None
        if args.resume:
            opt = stage1_optimizer(bundle, scfg)
            meta = load_checkpoint(args.resume, model.modules_dict(), opt,
                                   override_config_mismatch=True)
            start = int(meta.get("step", 0))
            scfg = _stage_config(cfg, 1, start_step=start)
        _, hist, _ = run_stage1(bundle, ds, scfg, out_dir=args.out, optimizer=opt)
        print(f"stage 1 done at step {scfg.steps}; final total {hist[-1]['total']:.4f}")
        return 0

    # stages 2 and 3 start from a previous model checkpoint
    if not args.model:
        raise InvalidStateError(f"stage {stage} requires --model (previous stage checkpoint)")
    load_checkpoint(args.model, model.modules_dict(), override_config_mismatch=True)
    emb = _load_or_train_embedder(args, cfg, ds)
    bundle = TrainBundle(model=model, embedder=emb, perceptual=PerceptualProxy(),
                         discriminator=Discriminator() if stage == 3 else None)
    scfg = _stage_config(cfg, stage)
    if stage == 2:
        import copy as _copy
        stage1_model = _copy.deepcopy(model)
        _, hist, _ = run_stage2(bundle, stage1_model, ds, scfg, out_dir=args.out)
    else:
        _, hist = run_stage3(bundle, ds, scfg, out_dir=args.out)
    print(f"stage {stage} done; final total {hist[-1]['total']:.4f}")
    return 0


def cmd_train_superres(args, cfg) -> int:
    ds = load_dataset(args.data)
    model, _ = _load_model(args.model, cfg, override=True)
    s = cfg["superres"]
    net, hist, _ = train_superres(model, ds, SuperResTrainConfig(
        n_pairs=s["n_pairs"], steps=args.steps or s["steps"],
        batch_size=s["batch_size"], lr=s["lr"], seed=s["seed"]))
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "superres.vxpc"), {"superres": net},
                    {"kind": "superres", "config_hash": config_hash(cfg)})
    write_history_csv(hist, os.path.join(args.out, "superres_loss.csv"))
    print(f"super-resolution trained; final loss {hist[-1]['loss']:.4f}")
    return 0


def cmd_finetune(args, cfg) -> int:
    ds = load_dataset(args.data)
    model, _ = _load_model(args.model, cfg, override=True)
    emb = _load_or_train_embedder(args, cfg, ds)
    if not (0 <= args.identity < ds.n_identities):
        raise InvalidArgumentError(f"identity {args.identity} outside dataset")
    frames = []
    for e in range(ds.n_expressions):
        for v in range(ds.n_views):
            frames.append((ds.image(args.identity, e, v), ds.camera(args.identity, e, v)))
            if len(frames) >= args.images:
                break
        if len(frames) >= args.images:
            break
    aux_id = (args.identity + 1) % ds.n_identities
    aux = ds.image(aux_id, 0, 0)
    bundle = TrainBundle(model=model, embedder=emb, perceptual=PerceptualProxy(),
                         discriminator=Discriminator())
    f = cfg["fewshot"]
    _, hist = finetune_fewshot(bundle, frames, FewShotConfig(
        steps=args.steps or f["steps"], lr=f["lr"], seed=f["seed"],
        samples_per_ray=f["samples_per_ray"]), aux_source=aux)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "fewshot.vxpc"), model.modules_dict(),
                    {"kind": "fewshot", "identity": args.identity,
                     "config_hash": config_hash(cfg)})
    print(f"few-shot fine-tuned on {len(frames)} images of identity {args.identity}")
    return 0


def cmd_reenact(args, cfg) -> int:
    model, _ = _load_model(args.model, cfg, override=True)
    source = load_png(args.source)
    driver = load_png(args.driver)
    os.makedirs(args.out, exist_ok=True)
    res = cfg["model"]["input_res"]
    rows = []
    for k in range(args.cameras):
        azim = (k / max(args.cameras, 1) * 2 - 1) * 45 * np.pi / 180
        eye = 2.6 * np.array([np.sin(azim), 0.0, np.cos(azim)])
        cam = Camera.look_at(eye, (0, 0, 0), resolution=(res, res))
        out = model.reenact_image(source, driver, cam)
        path = os.path.join(args.out, f"view_{k:02d}.png")
        save_png(out, path)
        rows.append({"view": k, "azimuth_deg": float(np.degrees(azim)), "png": path})
    with open(os.path.join(args.out, "views.csv"), "w") as f:
        f.write(f"# config_hash={config_hash(cfg)}\n")
        f.write(f"# checkpoint_hash={file_hash(args.model)}\n")
        f.write("view,azimuth_deg,png\n")
        for r in rows:
            f.write(f"{r['view']},{r['azimuth_deg']:.3f},{r['png']}\n")
    print(f"wrote {args.cameras} views to {args.out}")
    return 0


def cmd_eval(args, cfg) -> int:
    ds = load_dataset(args.data)
    model, _ = _load_model(args.model, cfg, override=True)
    emb = _load_or_train_embedder(args, cfg, ds)
    probe = build_expression_probe(ds, cfg["eval"]["probe_scenes"],
                                   cfg["eval"]["seed"], resolution=cfg["model"]["input_res"])
    report = evaluate_model(model, ds, args.mode, emb, probe,
                            max_pairs=cfg["eval"]["max_pairs"],
                            seed=cfg["eval"]["seed"],
                            metadata={"config_hash": config_hash(cfg),
                                      "checkpoint_hash": file_hash(args.model),
                                      "dataset_hash": file_hash(args.data)})
    report.to_csv(args.out)
    agg = report.aggregates()
    printable = {k: (None if v is None else round(v, 4)) for k, v in agg.items()}
    print(f"{args.mode}-reenactment over {len(report.rows)} pairs: {printable}")
    return 0


def cmd_simulate(args, cfg) -> int:
    model, _ = _load_model(args.model, cfg, override=True)
    script_a = load_script(args.script_a)
    script_b = load_script(args.script_b)
    superres = None
    if args.superres:
        superres = SuperRes()
        load_checkpoint(args.superres, {"superres": superres})
    scfg = SessionConfig(latency_ms=args.latency_ms, jitter_ms=args.jitter_ms,
                         drop_rate=args.drop_rate, seed=args.seed,
                         render_resolution=cfg["model"]["input_res"])
    res = cfg["model"]["input_res"]
    # peer avatars: synthetic portraits from the dataset when given, else flat
    if args.data:
        ds = load_dataset(args.data)
        src_a = ds.image(0, 0, 0)
        src_b = ds.image(min(1, ds.n_identities - 1), 0, 0)
    else:
        src_a = np.full((res, res, 3), 0.5, np.float32)
        src_b = np.full((res, res, 3), 0.5, np.float32)
    log, frames = run_session(src_a, src_b, script_a, script_b, model, scfg,
                              superres=superres, collect_frames=bool(args.out))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        for peer in ("a", "b"):
            for t, eyes in enumerate(frames[peer]):
                for e, img in enumerate(eyes):
                    save_png(img, os.path.join(args.out, f"peer{peer}_t{t:03d}_eye{e}.png"))
        rows = latency_report(log)
        write_latency_csv(rows, os.path.join(args.out, "latency.csv"))
        with open(os.path.join(args.out, "session.json"), "w") as f:
            f.write(log.deterministic_blob())
    total_bytes = sum(d["bytes"] for rec in log.ticks for d in rec["directions"].values())
    print(f"simulated {len(log.ticks)} ticks; {total_bytes} payload bytes on wire")
    return 0


def cmd_report(args, cfg) -> int:
    lines = []
    for path in args.inputs:
        with open(path) as f:
            lines.append(f"== {path}\n" + f.read())
    body = "\n".join(lines)
    omitted = "LPIPS, FID, AKD omitted: pretrained backbones out of scope\n"
    with open(args.out, "w") as f:
        f.write(omitted + body)
    print(f"merged {len(args.inputs)} reports into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="triface",
                                description="One-shot 3D head reenactment on a synthetic head world")
    p.add_argument("--config", default=None, help="JSON run configuration")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--identities", type=int, default=8)
    g.add_argument("--expressions", type=int, default=4)
    g.add_argument("--views", type=int, default=2)
    g.add_argument("--res", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--verbose", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train-lift", help="train the 3D lifting network")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.set_defaults(fn=cmd_train_lift)

    n = sub.add_parser("train-neutralizer", help="train the neutralizer inserts")
    n.add_argument("--data", required=True)
    n.add_argument("--lifter", required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--steps", type=int, default=None)
    n.add_argument("--override-config", action="store_true")
    n.set_defaults(fn=cmd_train_neutralizer)

    tr = sub.add_parser("train", help="run a training stage")
    tr.add_argument("--stage", required=True, choices=["1", "2", "3", "superres"])
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--lifter", help="lifter checkpoint (stage 1)")
    tr.add_argument("--neutralizer", help="neutralizer checkpoint (stage 1)")
    tr.add_argument("--embedder", help="identity embedder checkpoint (trained if absent)")
    tr.add_argument("--model", help="previous-stage model checkpoint (stages 2/3, superres)")
    tr.add_argument("--resume", help="resume checkpoint")
    tr.add_argument("--steps", type=int, default=None)
    tr.set_defaults(fn=cmd_train)

    ts = sub.add_parser("train-superres", help="train the 2x upsampler")
    ts.add_argument("--data", required=True)
    ts.add_argument("--model", required=True)
    ts.add_argument("--out", required=True)
    ts.add_argument("--steps", type=int, default=None)
    ts.set_defaults(fn=cmd_train_superres)

    ft = sub.add_parser("finetune", help="few-shot personalize on one identity")
    ft.add_argument("--data", required=True)
    ft.add_argument("--model", required=True)
    ft.add_argument("--identity", type=int, default=0)
    ft.add_argument("--images", type=int, default=10)
    ft.add_argument("--out", required=True)
    ft.add_argument("--steps", type=int, default=None)
    ft.add_argument("--embedder", default=None)
    ft.set_defaults(fn=cmd_finetune)

    re = sub.add_parser("reenact", help="one-shot reenactment + novel views")
    re.add_argument("--model", required=True)
    re.add_argument("--source", required=True)
    re.add_argument("--driver", required=True)
    re.add_argument("--cameras", type=int, default=1)
    re.add_argument("--out", required=True)
    re.set_defaults(fn=cmd_reenact)

    ev = sub.add_parser("eval", help="self-/cross-reenactment metrics")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--mode", choices=["self", "cross"], required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--embedder", default=None)
    ev.set_defaults(fn=cmd_eval)

    sim = sub.add_parser("simulate-telepresence", help="two-peer session simulator")
    sim.add_argument("--model", required=True)
    sim.add_argument("--script-a", required=True)
    sim.add_argument("--script-b", required=True)
    sim.add_argument("--latency-ms", type=float, default=0.0)
    sim.add_argument("--jitter-ms", type=float, default=0.0)
    sim.add_argument("--drop-rate", type=float, default=0.0)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--data", default=None)
    sim.add_argument("--superres", default=None)
    sim.add_argument("--out", default=None)
    sim.set_defaults(fn=cmd_simulate)

    rp = sub.add_parser("report", help="merge evaluation CSVs")
    rp.add_argument("--inputs", nargs="+", required=True)
    rp.add_argument("--out", required=True)
    rp.set_defaults(fn=cmd_report)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except (InvalidArgumentError, FormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except InvalidStateError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except NumericFailureError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
