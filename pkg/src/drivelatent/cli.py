"""Command-line entry point: ``drivelatent <verb> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import load_config
from .evaluation import evaluate_model, smoothness_report
from .generation import rollout
from .pipeline import load_checkpoint, run_ablation, train_stage1, train_stage2
from .scenario import GeneratorConfig, generate_dataset, read_dataset, write_dataset

log = logging.getLogger("drivelatent")


def write_ppm(path, image):
    """Binary portable pixmap from an (H, W, 3) array in [0, 1]."""
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    H, W, _ = img.shape
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + img.tobytes())


def _train_config(args, stage):
    overrides = list(args.set or [])
    cfg = load_config(args.config, overrides)
    cfg.stage = stage
    cfg.data = args.data
    cfg.checkpoint = args.out
    if args.log:
        cfg.log = args.log
    return cfg


def cmd_gen_data(args):
    cfg = GeneratorConfig(n=args.n, height=args.height, width=args.width, horizon=args.horizon)
    seqs = generate_dataset(range(args.seed, args.seed + args.count), cfg)
    write_dataset(args.out, seqs)
    print(f"wrote {len(seqs)} sequences to {args.out}")


def cmd_train_recon(args):
    res = train_stage1(_train_config(args, 1))
    last = res.reports[-1] if res.reports else None
    print(json.dumps({"checkpoint": res.checkpoint, "steps": res.step,
                      "final": json.loads(last.to_json()) if last else None}))


def cmd_train_joint(args):
    res = train_stage2(_train_config(args, 2), args.init)
    last = res.reports[-1] if res.reports else None
    print(json.dumps({"checkpoint": res.checkpoint, "steps": res.step,
                      "initial_param_hash": res.initial_param_hash,
                      "final": json.loads(last.to_json()) if last else None}))


def cmd_rollout(args):
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    seq = read_dataset(args.data)[args.index]
    hist = model.cfg.dit.history
    prefix = max(hist, 1)
    batch = model.batch_from_sequences([seq])
    gen = torch.Generator().manual_seed(args.seed)
    with torch.no_grad():
        out = rollout(model, batch["images"][:, :prefix], batch["status"][:, :prefix], args.steps,
                      batch["command"], batch["goal"], gen, args.sample_steps, seq.dt)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    with open(dest / "poses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "x", "y", "yaw"])
        for k, fr in enumerate(out["frames"]):
            rec = fr["recon"]
            write_ppm(dest / f"frame_{k:03d}.ppm", rec.colors[0, 0].double().numpy())
            keep = rec.depth[0, 0, ..., 0] > 0
            pts = torch.cat([rec.points[0, 0][keep], rec.colors[0, 0][keep]], -1).double().numpy()
            np.savetxt(dest / f"points_{k:03d}.txt", pts, fmt="%.5f", header="x y z r g b")
            w.writerow([k] + [f"{v:.6f}" for v in rec.ego[0, 0].double().tolist()])
    np.savetxt(dest / "points_merged.txt", out["points"].double().numpy(), fmt="%.5f", header="x y z r g b")
    print(f"wrote {args.steps} frames to {dest}")


def cmd_eval(args):
    model, ckpt = load_checkpoint(args.checkpoint)
    seqs = read_dataset(args.data)
    report = evaluate_model(model, seqs, k=args.k, pca_m=args.pca_m, seed=args.seed)
    report.config["train_config"] = ckpt.get("train_config")
    report.write(args.out)
    print(report.to_json())


def cmd_smoothness(args):
    model, _ = load_checkpoint(args.checkpoint)
    model.eval()
    seqs = read_dataset(args.data)
    pooled = []
    with torch.no_grad():
        for seq in seqs:
            b = model.batch_from_sequences([seq])
            pooled.append(model.encode(b["images"], b["status"])[0].mean(dim=(0, 1)).double().numpy())
    X = np.stack(pooled)
    k = min(args.k, len(X) - 1)
    rep = smoothness_report(X, k=k, pca_m=min(args.pca_m, k))
    text = json.dumps(rep.__dict__, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)


def cmd_ablate(args):
    cfg = load_config(args.config, list(args.set or []))
    cfg.data = args.data
    train = read_dataset(args.data)
    test = read_dataset(args.test_data) if args.test_data else None
    rows = run_ablation(cfg, train, test, args.out)
    for r in rows:
        print(json.dumps({k: v for k, v in r.items() if k != "items"}))


def cmd_verify(args):
    from .verify import run_all

    results = run_all()
    ok = True
    for name, passed, detail in results:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    return 0 if ok else 1


def build_parser():
    p = argparse.ArgumentParser(prog="drivelatent", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=200)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=4)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--width", type=int, default=96)
    g.add_argument("--horizon", type=int, default=8)
    g.set_defaults(fn=cmd_gen_data)

    for verb, fn, helptext in (("train-recon", cmd_train_recon, "stage 1: reconstruction training"),
                               ("train-joint", cmd_train_joint, "stage 2: joint generation training")):
        t = sub.add_parser(verb, help=helptext)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True, help="checkpoint path to write")
        t.add_argument("--config", help="JSON config layered over the defaults")
        t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. epochs=2")
        t.add_argument("--log", help="JSON-lines loss log")
        if verb == "train-joint":
            t.add_argument("--init", required=True, help="stage-1 checkpoint")
        t.set_defaults(fn=fn)

    r = sub.add_parser("rollout", help="autoregressive future frames from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--index", type=int, default=0)
    r.add_argument("--steps", type=int, default=3, help="number of generated frames K")
    r.add_argument("--sample-steps", type=int, default=None, help="Euler steps per frame")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_rollout)

    e = sub.add_parser("eval", help="Chamfer, smoothness and planning metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", "--split", dest="data", required=True)
    e.add_argument("--k", type=int, default=32)
    e.add_argument("--pca-m", type=int, default=2)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="directory for summary.json and items.csv")
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("smoothness", help="smoothness metrics of pooled latents")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--k", type=int, default=32)
    s.add_argument("--pca-m", type=int, default=2)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_smoothness)

    a = sub.add_parser("ablate", help="train and score the six ablation rows")
    a.add_argument("--data", required=True)
    a.add_argument("--test-data")
    a.add_argument("--out", required=True, help="CSV path")
    a.add_argument("--config")
    a.add_argument("--set", action="append", metavar="KEY=VALUE")
    a.set_defaults(fn=cmd_ablate)

    v = sub.add_parser("verify", help="run the oracle cross-checks")
    v.set_defaults(fn=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.fn(args)
    except (FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
