"""Command-line entry point: synth, augment, train, eval and gradcheck."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .augment import FaParams, GaParams, IntensityMap, WeakAugConfig, focal_augment, global_augment
from .config import load_kv
from .rng import STAGE_FA, STAGE_GA, KeyedRNG
from .saliency import SaliencyConfig, domain_diffusion
from .trainer import TrainConfig, checkpoint_load, evaluate, train


def _seed(args) -> int:
    env = os.environ.get("SSLDG_SEED")
    if env is not None and env.strip():
        return int(env)
    return args.seed


def cmd_synth(args) -> int:
    out = Path(args.out)
    if dataio.dataset_exists(out) and not args.force:
        print(f"refusing to write into non-empty directory {out} (use --force)", file=sys.stderr)
        return 2
    domains = [d.strip() for d in args.domains.split(",") if d.strip()]
    cfg = dataio.PhantomConfig(image_size=args.size)
    for d in domains:
        if d not in cfg.palettes:
            print(f"unknown domain {d!r}", file=sys.stderr)
            return 2
    ds = dataio.synth_dataset(args.n, domains, seed=_seed(args), labeled_fraction=args.labeled, cfg=cfg)
    out.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(ds, out)
    for d in domains:
        part = ds.domain(d)
        print(f"domain {d}: {len(part)} samples, {len(part.labeled_indices())} labeled")
    return 0


def cmd_augment(args, parser) -> int:
    if args.mode in ("fa", "sba") and not args.mask:
        parser.error(f"--mode {args.mode} requires --mask")
    if args.mode == "sba" and not args.ckpt:
        parser.error("--mode sba requires --ckpt")
    img = dataio.read_image(args.input)
    mask = dataio.read_mask(args.mask) if args.mask else None
    seed = _seed(args)
    rng = KeyedRNG(seed, 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.no_random:
        ga, fa = GaParams(0.0, 0.0, 0.0), FaParams(0.0, 0.0)
        ga_map = fa_maps = IntensityMap.identity()
    else:
        ga, fa = GaParams(), FaParams()
        ga_map = fa_maps = None
    if args.mode == "ga":
        res = global_augment(img, ga, rng.child(STAGE_GA).generator(), intensity_map=ga_map)
        dataio.write_image(out / "ga.pgm", res)
    elif args.mode == "fa":
        res = focal_augment(img, mask, fa, rng.child(STAGE_FA), maps=fa_maps)
        dataio.write_image(out / "fa.pgm", res)
    else:
        state, _ = checkpoint_load(args.ckpt)
        r = domain_diffusion(img, mask, state.model, ga, fa, SaliencyConfig(args.grid), rng,
                             WeakAugConfig.all_off(), ga_map=ga_map, fa_maps=fa_maps)
        for name, arr in (("ga", r.ga), ("fa", r.fa), ("saliency", r.saliency), ("sba", r.sba)):
            dataio.write_image(out / f"{name}.pgm", arr)
    print(f"wrote {args.mode} output to {out}")
    return 0


def cmd_train(args) -> int:
    kv = load_kv(args.config) if args.config else {}
    cfg = TrainConfig.from_kv(kv)
    if args.seed is not None or os.environ.get("SSLDG_SEED"):
        cfg.seed = _seed(args)
    ds = dataio.load_dataset(args.data, classes=cfg.classes - 1)
    train(cfg, ds, args.out, log=print)
    out = Path(args.out)
    if not (out / "metrics.csv").exists():
        return 1
    print((out / "metrics.csv").read_text().strip())
    return 0


def cmd_eval(args) -> int:
    state, cfg = checkpoint_load(args.ckpt)
    ds = dataio.load_dataset(args.data, classes=state.model.classes - 1)
    per_class, avg = evaluate(state.model, ds, args.domain, args.branch)
    for c, d in per_class.items():
        print(f"class {c}: dice {d:.4f}")
    print(f"average: {avg:.4f}")
    if args.out:
        dataio.write_metrics_csv(args.out, per_class, avg)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import main_report

    ok, report = main_report(_seed(args), fault=args.inject_fault)
    print(report)
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssldg", description="Semi-supervised domain-generalized segmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic two-domain phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200, help="samples per domain")
    s.add_argument("--domains", default="A,B")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--labeled", type=float, default=0.2, help="labeled fraction (0.1, 0.2, 0.5 or 1.0)")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--force", action="store_true")

    a = sub.add_parser("augment", help="preview GA, FA or scale-balanced augmentation")
    a.add_argument("--in", dest="input", required=True)
    a.add_argument("--mask")
    a.add_argument("--mode", choices=("ga", "fa", "sba"), required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.add_argument("--ckpt")
    a.add_argument("--grid", type=int, default=3)
    a.add_argument("--no-random", action="store_true", help="identity maps, unit scale, zero shift")

    t = sub.add_parser("train", help="train from a key = value config")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)

    e = sub.add_parser("eval", help="Dice of a checkpoint on one domain")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--domain", default="B")
    e.add_argument("--branch", default="1", help="branch index or 'mean'")
    e.add_argument("--out")

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward rule and loss")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth":
        return cmd_synth(args)
    if args.command == "augment":
        return cmd_augment(args, parser)
    if args.command == "train":
        return cmd_train(args)
    if args.command == "eval":
        return cmd_eval(args)
    return cmd_gradcheck(args)


if __name__ == "__main__":
    sys.exit(main())
