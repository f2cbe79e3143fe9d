"""Command-line entry point: gen | fit-labels | train | infer | eval | serve."""

from __future__ import annotations

import argparse
import os
import sys

from .config import PipelineConfig, load_config


def _load(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.scene.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="cagesplat",
        description="Tactile-driven cage deformation of Gaussian-splat scenes")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="INI config file (defaults when omitted)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("gen", help="generate synthetic motion sequences")
    common(p)
    p.add_argument("--geometry", default=None,
                   help="sheet | cylinder | path to a binary STL")
    p.add_argument("--modes", nargs="*", default=None)

    p = sub.add_parser("fit-labels", help="extract cage labels for a dataset")
    common(p, out_required=False)
    p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("train", help="train the deformer on a labeled dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", choices=("cage", "direct"), default="cage")

    p = sub.add_parser("infer", help="zero-shot inference on a sensed stream")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="dataset directory with sensor frames + rest proxy")
    p.add_argument("--variant", choices=("cage", "direct"), default="cage")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    common(p, out_required=False)
    p.add_argument("--data", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--csv", default=None)

    p = sub.add_parser("serve", help="run the live reconstruction service")
    common(p, out_required=False)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--port", type=int, default=None)

    args = ap.parse_args(argv)
    cfg = _load(args)

    if args.command == "gen":
        from .pipeline import cmd_gen
        geometry = args.geometry
        kind, stl = None, None
        if geometry:
            if geometry.endswith(".stl") or os.path.exists(geometry):
                stl = geometry
            else:
                kind = geometry
        written = cmd_gen(cfg, args.out, kind=kind, stl_path=stl,
                          modes=tuple(args.modes) if args.modes else None)
        print(f"wrote {len(written)} sequences under {args.out}")
        return 0

    if args.command == "fit-labels":
        from .pipeline import cmd_fit_labels
        report = cmd_fit_labels(cfg, args.data)
        print(f"max relative fit residual: {report['max_residual']:.3e}")
        return 0

    if args.command == "train":
        from .pipeline import cmd_train
        ckpt, history = cmd_train(cfg, args.data, args.out, variant=args.variant)
        print(f"checkpoint: {ckpt}")
        return 0

    if args.command == "infer":
        from .pipeline import cmd_infer
        written = cmd_infer(cfg, args.checkpoint, args.data, args.out,
                            variant=args.variant)
        print(f"wrote predictions for {len(written)} sequences under {args.out}")
        return 0

    if args.command == "eval":
        from .pipeline import cmd_eval
        cmd_eval(cfg, args.data, args.pred, out_csv=args.csv)
        if args.csv:
            print(f"report: {args.csv}")
        return 0

    if args.command == "serve":
        from .service import serve
        if args.port is not None:
            cfg.serve.port = args.port
        serve(cfg, checkpoint=args.checkpoint)
        return 0

    return 1


if __name__ == "__main__":
    sys.exit(main())
