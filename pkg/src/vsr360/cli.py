"""Command-line surface: prepare / train / eval / infer.

Exit codes: 0 success, 1 validation error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import sys

from .data import make_sample_dataset, prepare_from_source
from .training import TrainingAborted, evaluate, infer, parse_config_file, train


def _build_parser():
    p = argparse.ArgumentParser(prog="vsr360",
                                description="360-degree video super-resolution toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    prep = sub.add_parser("prepare", help="build a dataset directory")
    src = prep.add_mutually_exclusive_group(required=True)
    src.add_argument("--source", help="directory of clip subdirectories with frame images")
    src.add_argument("--synthetic", action="store_true", help="render synthetic sample clips")
    prep.add_argument("--clips", type=int, default=2)
    prep.add_argument("--frames", type=int, default=8)
    prep.add_argument("--size", default="256x128", help="HR extents as WxH")
    prep.add_argument("--out", required=True)
    prep.add_argument("--seed", type=int, default=0)
    prep.add_argument("--test-clips", type=int, default=0)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", required=True, help="flat key = value config file")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", required=True)

    inf = sub.add_parser("infer", help="super-resolve a directory of frames")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--clip", required=True)
    inf.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "prepare":
            if args.synthetic:
                w, h = (int(v) for v in args.size.lower().split("x"))
                make_sample_dataset(args.out, clips=args.clips, frames=args.frames,
                                    width=w, height=h, seed=args.seed,
                                    test_clips=args.test_clips)
            else:
                prepare_from_source(args.source, args.out, test_clips=args.test_clips)
        elif args.command == "train":
            cfg = parse_config_file(args.config)
            train(cfg, args.data, args.out)
        elif args.command == "eval":
            report = evaluate(args.checkpoint, args.data, args.report)
            avg = report["average"]
            print(f"ws_psnr {avg['ws_psnr']:.4f}  ws_ssim {avg['ws_ssim']:.4f}  "
                  f"psnr {avg['psnr']:.4f}  ssim {avg['ssim']:.4f}")
        elif args.command == "infer":
            n = infer(args.checkpoint, args.clip, args.out)
            print(f"wrote {n} frames to {args.out}")
    except TrainingAborted as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
