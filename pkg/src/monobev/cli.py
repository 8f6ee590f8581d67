"""Command-line surface.

    monobev train --config cfg.txt [--seed N] [--out DIR]
    monobev eval --checkpoint f.ckpt --data DIR [--paper-protocol]
    monobev ablate --axis {n_dec,n_his} --values a,b,c [--config F] [--out DIR]
    monobev gradcheck [--module NAME]
    monobev gen-data --seeds a..b --out DIR [--config F]
    monobev render --checkpoint f.ckpt --sequence DIR [--out DIR]

Exit code 0 on success, 1 with a one-line reason on stderr otherwise.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path


def _parse_seed_range(text):
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",") if s]


def cmd_train(args):
    from .config import load_config, save_config
    from .train import Trainer

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out_dir = Path(args.out) if args.out else Path("runs") / f"train_seed{cfg.seed}"
    trainer = Trainer(cfg, out_dir=out_dir)
    save_config(out_dir / "config.txt", cfg)
    elapsed = trainer.run(quiet=False)
    print(f"trained {trainer.step} steps in {elapsed:.1f}s; checkpoint at {out_dir / 'final.ckpt'}")
    return 0


def cmd_eval(args):
    from .losses import PAPER_EVAL_SHAPE
    from .train import SequenceDataset, evaluate_model, load_model_from_checkpoint

    model, cfg = load_model_from_checkpoint(args.checkpoint)
    dataset = SequenceDataset.from_dir(args.data)
    if len(dataset.class_names) != cfg.n_c:
        raise ValueError(
            f"dataset has {len(dataset.class_names)} classes but the checkpoint was trained with {cfg.n_c}"
        )
    report = evaluate_model(model, dataset, paper_protocol=args.paper_protocol)
    if args.paper_protocol:
        print(f"(paper protocol: maps resized to {PAPER_EVAL_SHAPE[0]}x{PAPER_EVAL_SHAPE[1]})")
    print(report.format())
    csv_path = Path(str(args.checkpoint) + ".metrics.csv")
    report.write_csv(csv_path)
    print(f"wrote {csv_path}")
    return 0


def cmd_ablate(args):
    from .config import desk_preset, load_config
    from .train import ablate

    cfg = load_config(args.config) if args.config else desk_preset()
    values = [int(v) for v in args.values.split(",") if v]
    table, _ = ablate(args.axis, values, cfg, out_dir=args.out, quiet=False)
    print(table)
    return 0


def cmd_gradcheck(args):
    from .verification import run_gradcheck

    ok, _ = run_gradcheck(module=args.module, out=print)
    return 0 if ok else 1


def cmd_gen_data(args):
    from .config import desk_preset, load_config
    from .world import WorldConfig, dump_dataset

    cfg = load_config(args.config) if args.config else desk_preset()
    seeds = _parse_seed_range(args.seeds)
    rows = dump_dataset(args.out, seeds, cfg.camera(), cfg.out_spec(), cfg.seq_len,
                        WorldConfig(occluder_bias=cfg.occluder_bias), cfg.motion_model)
    print(f"wrote {len(rows)} sequences under {args.out}")
    return 0


def cmd_render(args):
    from .render import render_maps
    from .train import load_model_from_checkpoint
    from .world import DEFAULT_CLASSES, load_sequence

    model, _ = load_model_from_checkpoint(args.checkpoint)
    frames, names = load_sequence(args.sequence)
    by_name = {c.name: c for c in DEFAULT_CLASSES}
    classes = [by_name[n] for n in names if n in by_name]
    if len(classes) != len(names):
        raise ValueError(f"sequence classes {names} not all known")
    out = args.out or (str(args.sequence).rstrip("/") + "_render")
    paths = render_maps(model, frames, classes, out)
    print(f"wrote {len(paths)} panels under {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="monobev", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dumped dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--paper-protocol", action="store_true")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run a toy ablation axis")
    p.add_argument("--axis", required=True, choices=["n_dec", "n_his"])
    p.add_argument("--values", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--module", default=None,
                   choices=["autodiff", "losses", "geometry", "transformer", "temporal"])
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="dump synthetic sequences to disk")
    p.add_argument("--seeds", required=True, help="range a..b or comma list")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("render", help="render side-by-side prediction panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sequence", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_render)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # one-line reason, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
