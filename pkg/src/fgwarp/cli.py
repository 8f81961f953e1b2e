"""Command-line interface.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numeric failure (non-finite loss or output).
"""

import argparse
import logging
import os
import sys
import tempfile

import numpy as np

from .data import (IMAGE_EXTS, Video, read_dataset, read_image, read_video,
                   write_dataset, write_image)
from .detector import load_checkpoint, save_checkpoint
from .evaluation import binarize, evaluate_videos, infer_video
from .flownet import estimate_flow_blockmatch, flowcnn_forward, read_flo, write_flo
from .flowwarp import warp
from .synthdata import PRESETS, generate_videos
from .training import TrainConfig, TrainingDiverged, train, write_loss_trace

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("fgwarp")


class UsageError(Exception):
    pass


def _atomic(path, write):
    """Call ``write(tmp_path)`` and move the result onto ``path``."""
    path = os.path.abspath(path)
    directory = os.path.dirname(path)
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=os.path.splitext(path)[1], dir=directory)
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return path


def _write_text(path, text):
    def write(tmp):
        with open(tmp, "w") as fh:
            fh.write(text)
    return _atomic(path, write)


def _load_ckpt(path):
    if not path or not os.path.isfile(os.path.join(path, "manifest.txt")):
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _finite(x, what):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x


# ------------------------------------------------------------------ commands

def cmd_gen_data(args):
    if args.videos < 1 or args.frames < 2 or args.size < 8:
        raise UsageError("need --videos >= 1, --frames >= 2 and --size >= 8")
    videos = generate_videos(args.videos, args.preset, seed=args.seed,
                             size=(args.size, args.size), n_frames=args.frames)
    write_dataset(videos, args.out)
    print(os.path.join(os.path.abspath(args.out), "manifest.json"))


def _train_config(args):
    overrides = {"seed": args.seed, "max_iters": args.max_iters}
    try:
        if args.config:
            if not os.path.isfile(args.config):
                raise UsageError(f"config file not found: {args.config}")
            return TrainConfig.from_file(args.config, **overrides)
        return TrainConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    except (ValueError, TypeError) as exc:
        raise UsageError(f"bad config: {exc}") from exc


def cmd_train(args):
    config = _train_config(args)
    videos = read_dataset(args.data)
    use_fgwarp = not args.no_fgwarp

    def progress(it, loss):
        if it % 100 == 0:
            log.info("iter %d/%d loss %.6f", it, config.max_iters, loss)

    result = train(videos, config, use_fgwarp=use_fgwarp, callback=progress)
    meta = {"use_fgwarp": int(use_fgwarp), "input_size": config.input_size,
            "seed": config.seed, "max_iters": config.max_iters}
    save_checkpoint(args.out, result.params, config.backbone, meta)
    trace = args.loss_trace or os.path.abspath(args.out) + ".losses.txt"
    _atomic(trace, lambda tmp: write_loss_trace(tmp, result.losses))
    print(os.path.abspath(args.out))


def _oracle_predictor(inverted):
    def predict(video):
        return [1.0 - m if inverted else m.copy() for m in video.masks]
    return predict


def _model_predictor(params, config, meta, args):
    use_fgwarp = bool(int(meta.get("use_fgwarp", 1)))
    size = args.input_size or int(meta.get("input_size", 64))

    def predict(video):
        res = infer_video(video.frames, params, config, video.flows, size, use_fgwarp)
        return [_finite(m, f"predictions for {video.name}") for m in res.masks]
    return predict


def _dump_masks(root, videos, predictions, threshold, continuous):
    for video, masks in zip(videos, predictions):
        vdir = os.path.join(root, video.name)
        for t, m in enumerate(masks):
            img = m if continuous else binarize(m, threshold).astype(np.float64)
            _atomic(os.path.join(vdir, f"{t:04d}.png"), lambda tmp, x=img: write_image(tmp, x))


def cmd_eval(args):
    if args.oracle or args.inverted_oracle:
        predict = _oracle_predictor(args.inverted_oracle)
    else:
        params, config, meta = _load_ckpt(args.ckpt)
        predict = _model_predictor(params, config, meta, args)
    videos = read_dataset(args.data)
    report, predictions = evaluate_videos(videos, predict, args.threshold)
    text = "\n".join(report.to_lines()) + "\n"
    _write_text(args.out, text)
    if args.dump_masks:
        _dump_masks(args.dump_masks, videos, predictions, args.threshold, args.continuous)
    sys.stdout.write(text)


def _read_frames_dir(path):
    if os.path.isdir(os.path.join(path, "frames")):
        return read_video(path)
    if not os.path.isdir(path):
        raise FileNotFoundError(f"video directory {path} does not exist")
    # a bare directory of images
    names = sorted(f for f in os.listdir(path) if f.lower().endswith(IMAGE_EXTS))
    if not names:
        raise FileNotFoundError(f"no images found in {path}")
    return Video(os.path.basename(os.path.normpath(path)),
                 [read_image(os.path.join(path, n)) for n in names])


def cmd_infer(args):
    params, config, meta = _load_ckpt(args.ckpt)
    video = _read_frames_dir(args.video)
    _dump_masks(args.out, [video], [_model_predictor(params, config, meta, args)(video)],
                args.threshold, args.continuous)
    print(os.path.join(os.path.abspath(args.out), video.name))


def _read_pair(a_path, b_path):
    a, b = read_image(a_path), read_image(b_path)
    if a.shape != b.shape:
        raise UsageError(f"frame sizes differ: {a.shape[2:]} vs {b.shape[2:]}")
    return a, b


def _refine(flow, a, b, params):
    out, _ = flowcnn_forward(flow, a, b, params, training=False)
    return _finite(out, "refined flow")


def cmd_warp_demo(args):
    a, b = _read_pair(args.frame_a, args.frame_b)
    if args.flo:
        flow = read_flo(args.flo)
        if flow.shape[2:] != a.shape[2:]:
            raise UsageError(f"flow size {flow.shape[2:]} does not match frames {a.shape[2:]}")
    else:
        block = min(args.block, *a.shape[2:])
        flow = estimate_flow_blockmatch(b, a, block, args.search)
    if args.ckpt:
        params, _, _ = _load_ckpt(args.ckpt)
        flow = _refine(flow, a, b, params)
    warped = warp(a, flow)
    heat = np.abs(warped - b).mean(axis=1, keepdims=True)
    _atomic(os.path.join(args.out, "warped.png"), lambda tmp: write_image(tmp, warped))
    _atomic(os.path.join(args.out, "heatmap.png"), lambda tmp: write_image(tmp, heat))
    _atomic(os.path.join(args.out, "flow.flo"), lambda tmp: write_flo(tmp, flow))
    print(os.path.abspath(args.out))


def cmd_flow_refine(args):
    flow = read_flo(args.flo)
    a, b = _read_pair(args.frame_a, args.frame_b)
    if flow.shape[2:] != a.shape[2:]:
        raise UsageError(f"flow size {flow.shape[2:]} does not match frames {a.shape[2:]}")
    params, _, _ = _load_ckpt(args.ckpt)
    refined = _refine(flow, a, b, params)
    _atomic(args.out, lambda tmp: write_flo(tmp, refined))
    print(os.path.abspath(args.out))


# -------------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                        help="random seed (default 0)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="fgwarp", parents=[common],
                                description="Flow-guided video shadow detection.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=PRESETS, default="default")
    g.add_argument("--videos", type=int, default=8)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train a detector")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--no-fgwarp", action="store_true",
                   help="baseline: no feature exchange, w2 and FlowCNN frozen")
    t.add_argument("--max-iters", type=int)
    t.add_argument("--loss-trace", help="default: <out>.losses.txt")
    t.set_defaults(func=cmd_train)

    def inference_flags(q):
        q.add_argument("--threshold", type=float, default=0.5)
        q.add_argument("--input-size", type=int, help="default: value stored in the checkpoint")
        q.add_argument("--continuous", action="store_true",
                       help="write probability maps scaled to 0-255 instead of binary masks")

    e = sub.add_parser("eval", parents=[common], help="score a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt")
    e.add_argument("--out", required=True, help="metric report file")
    e.add_argument("--dump-masks")
    oracle = e.add_mutually_exclusive_group()
    oracle.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    oracle.add_argument("--inverted-oracle", action="store_true")
    inference_flags(e)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="predict masks for one video")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video", required=True, help="video directory or directory of images")
    i.add_argument("--out", required=True)
    inference_flags(i)
    i.set_defaults(func=cmd_infer)

    w = sub.add_parser("warp-demo", parents=[common], help="warp frame A toward frame B")
    w.add_argument("--frame-a", required=True)
    w.add_argument("--frame-b", required=True)
    w.add_argument("--flo", help="flow aligning A onto B; block matching when omitted")
    w.add_argument("--ckpt", help="refine the flow with this checkpoint's FlowCNN")
    w.add_argument("--out", required=True)
    w.add_argument("--block", type=int, default=8)
    w.add_argument("--search", type=int, default=8)
    w.set_defaults(func=cmd_warp_demo)

    r = sub.add_parser("flow-refine", parents=[common], help="run FlowCNN on a .flo file")
    r.add_argument("--flo", required=True)
    r.add_argument("--frame-a", required=True)
    r.add_argument("--frame-b", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_flow_refine)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    args.seed = getattr(args, "seed", 0)
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"fgwarp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"fgwarp {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"fgwarp {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"fgwarp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
