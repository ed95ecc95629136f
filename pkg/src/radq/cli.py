"""Command line interface.

Subcommands: gen (synthetic dataset), train, eval (mAP tables), infer
(detections as delimited text), render (detection/attention pixmaps).
Exit codes: 0 ok, 1 usage/config, 2 data error, 3 numeric failure.
"""

import argparse
import os
import sys

import numpy as np

from . import metrics as M
from . import raddata as rd
from . import trainer as tr
from .errors import ConfigError, DataError, NumericError
from .render import render_attention_map, render_detection_map

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="radq", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a synthetic dataset directory")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--frames", type=int, default=8)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--cube", type=int, nargs=3, default=(64, 64, 16),
                     metavar=("RANGE", "AZIMUTH", "DOPPLER"))
    gen.add_argument("--objects", type=int, nargs=2, default=(1, 3),
                     metavar=("MIN", "MAX"))
    gen.add_argument("--noise", type=float, default=0.05)
    gen.add_argument("--classes", default="0,1,2",
                     help="comma-separated class ids (default desk profile 0,1,2)")

    train = sub.add_parser("train", help="run a training config")
    train.add_argument("config", help="flat key = value config file")
    train.add_argument("--seed", type=int, default=None, help="override the config seed")
    train.add_argument("--out", default="run", help="output directory")
    train.add_argument("--resume", default=None, help="checkpoint to resume from")
    train.add_argument("--quiet", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--view", choices=["rad", "ra", "rd", "all"], default="all")
    ev.add_argument("--out", default=None, help="directory for metric files")
    ev.add_argument("--score-floor", type=float, default=M.DEFAULT_SCORE_FLOOR)

    infer = sub.add_parser("infer", help="detect objects in one frame file")
    infer.add_argument("--ckpt", required=True)
    infer.add_argument("--frame", required=True)
    infer.add_argument("--score-floor", type=float, default=M.DEFAULT_SCORE_FLOOR)
    infer.add_argument("--out", default=None, help="write detections here instead of stdout")

    render = sub.add_parser("render", help="render detection overlays / attention maps")
    render.add_argument("--frame", required=True)
    render.add_argument("--dets", default=None, help="delimited detections from `infer`")
    render.add_argument("--view", choices=["ra", "rd"], default="ra")
    render.add_argument("--out", required=True, help="output .ppm path")
    render.add_argument("--attention", default=None, metavar="CKPT",
                        help="render a cross-attention map from this checkpoint instead")
    render.add_argument("--level", type=int, default=0)
    render.add_argument("--query", type=int, default=0)
    return parser


def _parse_classes(text):
    try:
        ids = tuple(int(part) for part in text.split(",") if part.strip() != "")
    except ValueError as exc:
        raise UsageError(f"bad --classes value {text!r}") from exc
    if not ids or any(not 0 <= c < rd.NUM_CLASSES for c in ids):
        raise UsageError(f"class ids must lie in [0, {rd.NUM_CLASSES - 1}]")
    return ids


def detections_to_lines(dets):
    lines = []
    for det in dets:
        fields = [str(det.class_id), f"{det.score:.6f}"]
        fields += [f"{v:.6f}" for v in (*det.box.center, *det.box.size)]
        lines.append(",".join(fields))
    return lines


def read_detections(path):
    dets = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 8:
                raise DataError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            cls = int(parts[0])
            score = float(parts[1])
            values = [float(p) for p in parts[2:]]
            dets.append(M.Detection(cls, score, rd.Box3D(tuple(values[:3]), tuple(values[3:]))))
    return dets


def _cmd_gen(args):
    spec = rd.SceneSpec(
        dims=tuple(args.cube),
        count_range=tuple(args.objects),
        noise_floor=args.noise,
        classes=_parse_classes(args.classes),
    )
    names = rd.write_dataset(args.out, args.seed, args.frames, spec)
    print(f"wrote {len(names)} frames to {args.out}")
    return EXIT_OK


def _cmd_train(args):
    cfg = tr.load_config(args.config)
    if args.seed is not None:
        cfg = tr.TrainConfig(**{**_cfg_dict(cfg), "seed": args.seed})
    log_fn = None if args.quiet else _print_step
    ckpt, history = tr.run_training(cfg, out_dir=args.out, resume_path=args.resume,
                                    log_fn=log_fn)
    steps = [h for h in history if "loss" in h]
    final = steps[-1]["loss"] if steps else float("nan")
    print(f"finished at step {ckpt.step}, final loss {final:.4f}; "
          f"checkpoint in {args.out}/checkpoint.ckpt")
    return EXIT_OK


def _cfg_dict(cfg):
    import dataclasses

    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}


def _print_step(entry):
    if "loss" in entry:
        print(f"step {entry['step']:>6} loss {entry['loss']:.4f}", file=sys.stderr)
    elif "val_map_rad" in entry:
        print(f"step {entry['step']:>6} val mAP(rad) {entry['val_map_rad']:.4f}",
              file=sys.stderr)


def _cmd_eval(args):
    ckpt = tr.load_checkpoint(args.ckpt)
    model, _ = tr.load_model(ckpt)
    frames = rd.load_dataset(args.data)
    views = ["rad", "ra", "rd"] if args.view == "all" else [args.view]
    for view in views:
        result = tr.evaluate_model(model, frames, view, args.score_floor)
        print(M.format_report(result))
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            M.write_report(
                result,
                os.path.join(args.out, f"metrics_{view}.txt"),
                os.path.join(args.out, f"metrics_{view}.csv"),
            )
    return EXIT_OK


def _cmd_infer(args):
    ckpt = tr.load_checkpoint(args.ckpt)
    model, _ = tr.load_model(ckpt)
    frame = rd.load_frame(args.frame)
    out = model(frame.cube.bins)
    dets = M.extract_detections(out.final_logits.data, out.final_boxes.data,
                                args.score_floor)
    lines = detections_to_lines(dets)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))
    else:
        for line in lines:
            print(line)
    return EXIT_OK


def _cmd_render(args):
    frame = rd.load_frame(args.frame)
    if args.attention:
        ckpt = tr.load_checkpoint(args.attention)
        model, _ = tr.load_model(ckpt)
        out = model(frame.cube.bins, collect_attention=True)
        render_attention_map(out.cross_attention[-1], out.memory, args.level,
                             args.query, args.out)
    else:
        dets = read_detections(args.dets) if args.dets else []
        render_detection_map(frame, dets, args.view, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "infer": _cmd_infer,
    "render": _cmd_render,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
